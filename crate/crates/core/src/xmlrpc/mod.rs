//! XML-RPC values, envelopes and their wire encoding.
//!
//! Parsing is tolerant in the ways real ROS client libraries need (`<i4>` and
//! `<int>`, untyped string values, whitespace between elements), while
//! encoding is deterministic: integers are always emitted as `<int>` and
//! strings always carry an explicit `<string>` tag.

mod decode;
mod encode;
mod value;

use thiserror::Error;

pub use encode::encode_value;
pub use value::{MethodCall, MethodResponse, RosResult, Value};

/// Default maximum array/struct nesting depth.
pub const DEFAULT_MAX_DEPTH: usize = 32;
/// Default maximum document size.
pub const DEFAULT_MAX_SIZE: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed XML-RPC document: {0}")]
    MalformedXml(String),
    #[error("value nesting exceeds the limit of {limit}")]
    DepthExceeded { limit: usize },
    #[error("document of {size} bytes exceeds the limit of {limit} bytes")]
    TooLarge { size: usize, limit: usize },
}

/// Bounds applied while decoding untrusted documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecLimits {
    pub max_depth: usize,
    pub max_size: usize,
}

impl Default for CodecLimits {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            max_size: DEFAULT_MAX_SIZE,
        }
    }
}

pub fn parse_call(body: &[u8]) -> Result<MethodCall, CodecError> {
    decode::parse_call(body, &CodecLimits::default())
}

pub fn parse_call_with(body: &[u8], limits: &CodecLimits) -> Result<MethodCall, CodecError> {
    decode::parse_call(body, limits)
}

pub fn parse_response(body: &[u8]) -> Result<MethodResponse, CodecError> {
    decode::parse_response(body, &CodecLimits::default())
}

pub fn parse_response_with(
    body: &[u8],
    limits: &CodecLimits,
) -> Result<MethodResponse, CodecError> {
    decode::parse_response(body, limits)
}

/// Parses a document whose root element is a single `<value>`.
pub fn parse_value(body: &[u8]) -> Result<Value, CodecError> {
    decode::parse_value(body, &CodecLimits::default())
}

pub fn encode_call(call: &MethodCall) -> Vec<u8> {
    encode::encode_call(call)
}

pub fn encode_response(resp: &MethodResponse) -> Vec<u8> {
    encode::encode_response(resp)
}
