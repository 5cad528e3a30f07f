use std::collections::BTreeMap;
use std::fmt;

/// A single XML-RPC value.
///
/// `Base64` and `DateTime` are carried opaquely: the proxy never interprets
/// them, it only has to re-encode them faithfully when forwarding.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i32),
    Bool(bool),
    String(String),
    Double(f64),
    Array(Vec<Value>),
    Struct(BTreeMap<String, Value>),
    Base64(Vec<u8>),
    DateTime(String),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<i32> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[Value]> {
        match self {
            Value::Array(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_array_mut(&mut self) -> Option<&mut Vec<Value>> {
        match self {
            Value::Array(items) => Some(items),
            _ => None,
        }
    }

    /// Array/struct nesting depth. Scalars have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Value::Array(items) => 1 + items.iter().map(Value::depth).max().unwrap_or(0),
            Value::Struct(members) => 1 + members.values().map(Value::depth).max().unwrap_or(0),
            _ => 0,
        }
    }

    /// Short type label, used in diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Bool(_) => "boolean",
            Value::String(_) => "string",
            Value::Double(_) => "double",
            Value::Array(_) => "array",
            Value::Struct(_) => "struct",
            Value::Base64(_) => "base64",
            Value::DateTime(_) => "dateTime.iso8601",
        }
    }
}

impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Double(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::String(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::String(v)
    }
}

impl<T: Into<Value>> From<Vec<T>> for Value {
    fn from(v: Vec<T>) -> Self {
        Value::Array(v.into_iter().map(Into::into).collect())
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::String(s) => write!(f, "{s:?}"),
            Value::Double(d) => write!(f, "{d}"),
            Value::Array(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            Value::Struct(members) => {
                f.write_str("{")?;
                for (i, (k, v)) in members.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k:?}: {v}")?;
                }
                f.write_str("}")
            }
            Value::Base64(bytes) => write!(f, "<{} bytes>", bytes.len()),
            Value::DateTime(s) => write!(f, "datetime({s})"),
        }
    }
}

/// An XML-RPC `methodCall`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodCall {
    pub method_name: String,
    pub params: Vec<Value>,
}

impl MethodCall {
    pub fn new(method_name: impl Into<String>, params: Vec<Value>) -> Self {
        Self {
            method_name: method_name.into(),
            params,
        }
    }

    /// First parameter as a string. Every ROS API call carries the caller id there.
    pub fn caller_id(&self) -> Option<&str> {
        self.params.first().and_then(Value::as_str)
    }
}

/// An XML-RPC `methodResponse`: exactly one value, or a fault.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodResponse {
    Success(Value),
    Fault { code: i32, message: String },
}

impl MethodResponse {
    pub fn fault(code: i32, message: impl Into<String>) -> Self {
        MethodResponse::Fault {
            code,
            message: message.into(),
        }
    }

    pub fn is_fault(&self) -> bool {
        matches!(self, MethodResponse::Fault { .. })
    }
}

impl From<RosResult> for MethodResponse {
    fn from(r: RosResult) -> Self {
        MethodResponse::Success(r.to_value())
    }
}

/// The `[code, statusMessage, value]` triple every ROS master and slave API
/// method returns.
#[derive(Debug, Clone, PartialEq)]
pub struct RosResult {
    pub code: i32,
    pub status_message: String,
    pub value: Value,
}

impl RosResult {
    pub const SUCCESS: i32 = 1;
    pub const FAILURE: i32 = 0;
    pub const ERROR: i32 = -1;

    pub fn new(code: i32, status_message: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            code,
            status_message: status_message.into(),
            value: value.into(),
        }
    }

    pub fn success(status_message: impl Into<String>, value: impl Into<Value>) -> Self {
        Self::new(Self::SUCCESS, status_message, value)
    }

    pub fn failure(status_message: impl Into<String>, value: impl Into<Value>) -> Self {
        Self::new(Self::FAILURE, status_message, value)
    }

    pub fn error(status_message: impl Into<String>) -> Self {
        Self::new(Self::ERROR, status_message, 0)
    }

    pub fn is_success(&self) -> bool {
        self.code == Self::SUCCESS
    }

    pub fn to_value(&self) -> Value {
        Value::Array(vec![
            Value::Int(self.code),
            Value::String(self.status_message.clone()),
            self.value.clone(),
        ])
    }

    /// Decodes a 3-element array whose first element is an integer. The
    /// status message is taken leniently: some client libraries send it
    /// untyped, which already decodes as a string.
    pub fn from_value(value: &Value) -> Option<Self> {
        match value.as_array()? {
            [Value::Int(code), status, value] => Some(Self {
                code: *code,
                status_message: status.as_str()?.to_owned(),
                value: value.clone(),
            }),
            _ => None,
        }
    }
}
