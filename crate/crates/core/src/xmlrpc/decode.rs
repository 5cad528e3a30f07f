use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use roxmltree::{Document, Node, ParsingOptions};

use super::value::{MethodCall, MethodResponse, Value};
use super::{CodecError, CodecLimits};

type Result<T> = std::result::Result<T, CodecError>;

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::MalformedXml(msg.into())
}

fn document<'a>(body: &'a [u8], limits: &CodecLimits) -> Result<Document<'a>> {
    if body.len() > limits.max_size {
        return Err(CodecError::TooLarge {
            size: body.len(),
            limit: limits.max_size,
        });
    }
    let text =
        std::str::from_utf8(body).map_err(|e| malformed(format!("body is not UTF-8: {e}")))?;
    if element_nesting_exceeds(body, max_element_nesting(limits)) {
        return Err(CodecError::DepthExceeded {
            limit: limits.max_depth,
        });
    }
    let opts = ParsingOptions {
        allow_dtd: false,
        ..ParsingOptions::default()
    };
    Document::parse_with_options(text, opts).map_err(|e| malformed(e.to_string()))
}

/// Element nesting allowed for `max_depth` containers: three elements for the
/// envelope, three per container level and two for the innermost scalar,
/// with slack for fault envelopes.
fn max_element_nesting(limits: &CodecLimits) -> usize {
    limits.max_depth.saturating_mul(3).saturating_add(8)
}

/// Iterative scan of element nesting so that hostile documents are rejected
/// before the DOM parser recurses into them. Malformed markup is left for
/// the parser to report.
fn element_nesting_exceeds(body: &[u8], limit: usize) -> bool {
    fn skip_past(body: &[u8], from: usize, pat: &[u8]) -> usize {
        body[from..]
            .windows(pat.len())
            .position(|w| w == pat)
            .map_or(body.len(), |p| from + p + pat.len())
    }

    let mut depth = 0usize;
    let mut i = 0;
    while i < body.len() {
        if body[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &body[i..];
        if rest.starts_with(b"<!--") {
            i = skip_past(body, i + 4, b"-->");
        } else if rest.starts_with(b"<![CDATA[") {
            i = skip_past(body, i + 9, b"]]>");
        } else if rest.starts_with(b"<?") {
            i = skip_past(body, i + 2, b"?>");
        } else if rest.starts_with(b"</") {
            depth = depth.saturating_sub(1);
            i = skip_past(body, i + 2, b">");
        } else if rest.starts_with(b"<!") {
            i = skip_past(body, i + 2, b">");
        } else {
            let mut j = i + 1;
            let mut quote = None;
            while j < body.len() {
                match (quote, body[j]) {
                    (None, b'"' | b'\'') => quote = Some(body[j]),
                    (Some(q), c) if c == q => quote = None,
                    (None, b'>') => break,
                    _ => {}
                }
                j += 1;
            }
            if j >= body.len() {
                return false;
            }
            if body[j - 1] != b'/' {
                depth += 1;
                if depth > limit {
                    return true;
                }
            }
            i = j + 1;
        }
    }
    false
}

pub fn parse_call(body: &[u8], limits: &CodecLimits) -> Result<MethodCall> {
    let doc = document(body, limits)?;
    let root = doc.root_element();
    if root.tag_name().name() != "methodCall" {
        return Err(malformed(format!(
            "expected <methodCall>, found <{}>",
            root.tag_name().name()
        )));
    }

    let mut method_name = None;
    let mut params = Vec::new();
    for child in element_children(root)? {
        match child.tag_name().name() {
            "methodName" if method_name.is_none() => {
                let name = scalar_text(child)?;
                let name = name.trim();
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(malformed(format!("invalid method name {name:?}")));
                }
                method_name = Some(name.to_owned());
            }
            "params" => params = parse_params(child, limits)?,
            other => return Err(malformed(format!("unexpected <{other}> in <methodCall>"))),
        }
    }

    let method_name = method_name.ok_or_else(|| malformed("missing <methodName>"))?;
    Ok(MethodCall {
        method_name,
        params,
    })
}

pub fn parse_response(body: &[u8], limits: &CodecLimits) -> Result<MethodResponse> {
    let doc = document(body, limits)?;
    let root = doc.root_element();
    if root.tag_name().name() != "methodResponse" {
        return Err(malformed(format!(
            "expected <methodResponse>, found <{}>",
            root.tag_name().name()
        )));
    }

    let children = element_children(root)?;
    let [child] = children.as_slice() else {
        return Err(malformed(
            "<methodResponse> must hold exactly one of <params> or <fault>",
        ));
    };
    match child.tag_name().name() {
        "params" => {
            let mut params = parse_params(*child, limits)?;
            if params.len() != 1 {
                return Err(malformed(format!(
                    "response must carry exactly one value, found {}",
                    params.len()
                )));
            }
            Ok(MethodResponse::Success(params.remove(0)))
        }
        "fault" => parse_fault(*child, limits),
        other => Err(malformed(format!(
            "unexpected <{other}> in <methodResponse>"
        ))),
    }
}

/// Parses a standalone `<value>` document.
pub fn parse_value(body: &[u8], limits: &CodecLimits) -> Result<Value> {
    let doc = document(body, limits)?;
    let root = doc.root_element();
    if root.tag_name().name() != "value" {
        return Err(malformed("expected <value>"));
    }
    value(root, 0, limits)
}

fn parse_fault(node: Node, limits: &CodecLimits) -> Result<MethodResponse> {
    let children = element_children(node)?;
    let [v] = children.as_slice() else {
        return Err(malformed("<fault> must hold exactly one <value>"));
    };
    expect_tag(*v, "value")?;
    let Value::Struct(mut members) = value(*v, 0, limits)? else {
        return Err(malformed("fault value must be a struct"));
    };
    let code = match members.remove("faultCode") {
        Some(Value::Int(code)) => code,
        _ => return Err(malformed("fault struct lacks an integer faultCode")),
    };
    let message = match members.remove("faultString") {
        Some(Value::String(s)) => s,
        _ => return Err(malformed("fault struct lacks a string faultString")),
    };
    Ok(MethodResponse::Fault { code, message })
}

fn parse_params(node: Node, limits: &CodecLimits) -> Result<Vec<Value>> {
    element_children(node)?
        .into_iter()
        .map(|param| {
            expect_tag(param, "param")?;
            let inner = element_children(param)?;
            let [v] = inner.as_slice() else {
                return Err(malformed("<param> must hold exactly one <value>"));
            };
            expect_tag(*v, "value")?;
            value(*v, 0, limits)
        })
        .collect()
}

/// Decodes a `<value>` element found at container depth `depth`.
fn value(node: Node, depth: usize, limits: &CodecLimits) -> Result<Value> {
    if !node.children().any(|c| c.is_element()) {
        // Untyped `<value>text</value>` is a string, whitespace included.
        return Ok(Value::String(text_of(node)));
    }
    let children = element_children(node)?;
    let typed = match children.as_slice() {
        [typed] => *typed,
        _ => return Err(malformed("<value> must hold exactly one typed element")),
    };

    let tag = typed.tag_name().name();
    match tag {
        "i4" | "int" => {
            let text = scalar_text(typed)?;
            text.trim()
                .parse::<i32>()
                .map(Value::Int)
                .map_err(|_| malformed(format!("invalid 32-bit integer {:?}", text.trim())))
        }
        "boolean" => match scalar_text(typed)?.trim() {
            "1" | "true" => Ok(Value::Bool(true)),
            "0" | "false" => Ok(Value::Bool(false)),
            other => Err(malformed(format!("invalid boolean {other:?}"))),
        },
        "string" => scalar_text(typed).map(Value::String),
        "double" => {
            let text = scalar_text(typed)?;
            text.trim()
                .parse::<f64>()
                .map(Value::Double)
                .map_err(|_| malformed(format!("invalid double {:?}", text.trim())))
        }
        "base64" => {
            let text: String = scalar_text(typed)?
                .chars()
                .filter(|c| !c.is_ascii_whitespace())
                .collect();
            STANDARD
                .decode(text.as_bytes())
                .map(Value::Base64)
                .map_err(|e| malformed(format!("invalid base64: {e}")))
        }
        "dateTime.iso8601" => Ok(Value::DateTime(scalar_text(typed)?.trim().to_owned())),
        "array" | "struct" => {
            if depth >= limits.max_depth {
                return Err(CodecError::DepthExceeded {
                    limit: limits.max_depth,
                });
            }
            if tag == "array" {
                array(typed, depth + 1, limits)
            } else {
                structure(typed, depth + 1, limits)
            }
        }
        other => Err(malformed(format!("unsupported value type <{other}>"))),
    }
}

fn array(node: Node, depth: usize, limits: &CodecLimits) -> Result<Value> {
    let children = element_children(node)?;
    let [data] = children.as_slice() else {
        return Err(malformed("<array> must hold exactly one <data>"));
    };
    expect_tag(*data, "data")?;
    element_children(*data)?
        .into_iter()
        .map(|v| {
            expect_tag(v, "value")?;
            value(v, depth, limits)
        })
        .collect::<Result<Vec<_>>>()
        .map(Value::Array)
}

fn structure(node: Node, depth: usize, limits: &CodecLimits) -> Result<Value> {
    let mut members = BTreeMap::new();
    for member in element_children(node)? {
        expect_tag(member, "member")?;
        let parts = element_children(member)?;
        let [name, v] = parts.as_slice() else {
            return Err(malformed("<member> must hold <name> and <value>"));
        };
        expect_tag(*name, "name")?;
        expect_tag(*v, "value")?;
        members.insert(scalar_text(*name)?, value(*v, depth, limits)?);
    }
    Ok(Value::Struct(members))
}

fn expect_tag(node: Node, tag: &str) -> Result<()> {
    if node.tag_name().name() == tag {
        Ok(())
    } else {
        Err(malformed(format!(
            "expected <{tag}>, found <{}>",
            node.tag_name().name()
        )))
    }
}

/// Element children of `node`; whitespace between elements is skipped, any
/// other text is an error.
fn element_children<'a, 'i>(node: Node<'a, 'i>) -> Result<Vec<Node<'a, 'i>>> {
    let mut out = Vec::new();
    for child in node.children() {
        if child.is_element() {
            out.push(child);
        } else if child.is_text() && !child.text().unwrap_or("").trim().is_empty() {
            return Err(malformed(format!(
                "unexpected text inside <{}>",
                node.tag_name().name()
            )));
        }
    }
    Ok(out)
}

/// Text content of an element that must not contain child elements.
fn scalar_text(node: Node) -> Result<String> {
    if node.children().any(|c| c.is_element()) {
        return Err(malformed(format!(
            "<{}> must not contain elements",
            node.tag_name().name()
        )));
    }
    Ok(text_of(node))
}

fn text_of(node: Node) -> String {
    node.children()
        .filter(|c| c.is_text())
        .filter_map(|c| c.text())
        .collect()
}
