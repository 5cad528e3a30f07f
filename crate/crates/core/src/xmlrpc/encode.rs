use std::fmt::Write;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::value::{MethodCall, MethodResponse, Value};

const PROLOG: &str = "<?xml version=\"1.0\"?>\n";

pub fn encode_call(call: &MethodCall) -> Vec<u8> {
    let mut out = String::with_capacity(256);
    out.push_str(PROLOG);
    out.push_str("<methodCall><methodName>");
    escape_into(&mut out, &call.method_name);
    out.push_str("</methodName>");
    write_params(&mut out, &call.params);
    out.push_str("</methodCall>\n");
    out.into_bytes()
}

pub fn encode_response(resp: &MethodResponse) -> Vec<u8> {
    let mut out = String::with_capacity(256);
    out.push_str(PROLOG);
    out.push_str("<methodResponse>");
    match resp {
        MethodResponse::Success(value) => write_params(&mut out, std::slice::from_ref(value)),
        MethodResponse::Fault { code, message } => {
            out.push_str("<fault><value><struct><member><name>faultCode</name><value><int>");
            let _ = write!(out, "{code}");
            out.push_str("</int></value></member><member><name>faultString</name><value><string>");
            escape_into(&mut out, message);
            out.push_str("</string></value></member></struct></value></fault>");
        }
    }
    out.push_str("</methodResponse>\n");
    out.into_bytes()
}

/// Encodes a bare `<value>` element.
pub fn encode_value(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

fn write_params(out: &mut String, params: &[Value]) {
    if params.is_empty() {
        out.push_str("<params/>");
        return;
    }
    out.push_str("<params>");
    for p in params {
        out.push_str("<param>");
        write_value(out, p);
        out.push_str("</param>");
    }
    out.push_str("</params>");
}

fn write_value(out: &mut String, value: &Value) {
    out.push_str("<value>");
    match value {
        Value::Int(i) => {
            let _ = write!(out, "<int>{i}</int>");
        }
        Value::Bool(b) => {
            out.push_str(if *b {
                "<boolean>1</boolean>"
            } else {
                "<boolean>0</boolean>"
            });
        }
        Value::String(s) => {
            out.push_str("<string>");
            escape_into(out, s);
            out.push_str("</string>");
        }
        // `{}` on f64 never uses exponent notation and round-trips exactly.
        Value::Double(d) => {
            let _ = write!(out, "<double>{d}</double>");
        }
        Value::Array(items) => {
            out.push_str("<array><data>");
            for item in items {
                write_value(out, item);
            }
            out.push_str("</data></array>");
        }
        Value::Struct(members) => {
            out.push_str("<struct>");
            for (name, v) in members {
                out.push_str("<member><name>");
                escape_into(out, name);
                out.push_str("</name>");
                write_value(out, v);
                out.push_str("</member>");
            }
            out.push_str("</struct>");
        }
        Value::Base64(bytes) => {
            out.push_str("<base64>");
            out.push_str(&STANDARD.encode(bytes));
            out.push_str("</base64>");
        }
        Value::DateTime(s) => {
            out.push_str("<dateTime.iso8601>");
            escape_into(out, s);
            out.push_str("</dateTime.iso8601>");
        }
    }
    out.push_str("</value>");
}

fn escape_into(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            // A literal CR would be normalized to LF by the receiving parser.
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}
