//! Just enough TCPROS to prove delivery: connection headers and
//! length-prefixed frames, all lengths little-endian `u32`.

use std::collections::BTreeMap;
use std::io;

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const STRING_TYPE: &str = "std_msgs/String";
pub const STRING_MD5: &str = "992ce8a1687cec8c8bd883ec73ca41d1";
pub const ECHO_TYPE: &str = "rosproxy_sim/Echo";
pub const ECHO_MD5: &str = "6a2e34150c00229791cc89ff309fff21";

/// Upper bound for a single header or frame read from a peer.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

/// A connection header: ordered `key=value` fields.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TcpRosHeader {
    fields: Vec<(String, String)>,
}

impl TcpRosHeader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.fields.push((key.to_owned(), value.to_owned()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.fields.iter().cloned().collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let body_len: usize = self
            .fields
            .iter()
            .map(|(k, v)| 4 + k.len() + 1 + v.len())
            .sum();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        for (k, v) in &self.fields {
            out.extend_from_slice(&((k.len() + 1 + v.len()) as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    /// Decodes a header body (without the outer length prefix).
    pub fn decode(body: &[u8]) -> io::Result<Self> {
        let mut fields = Vec::new();
        let mut rest = body;
        while !rest.is_empty() {
            let (len, tail) = split_len(rest)?;
            if tail.len() < len {
                return Err(invalid("header field overruns header"));
            }
            let (field, tail) = tail.split_at(len);
            let field =
                std::str::from_utf8(field).map_err(|_| invalid("header field is not UTF-8"))?;
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| invalid("header field lacks '='"))?;
            fields.push((k.to_owned(), v.to_owned()));
            rest = tail;
        }
        Ok(Self { fields })
    }

    pub async fn write_to<W: AsyncWrite + Unpin>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode()).await?;
        w.flush().await
    }

    pub async fn read_from<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Self> {
        Self::decode(&read_frame(r).await?)
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_owned())
}

fn split_len(buf: &[u8]) -> io::Result<(usize, &[u8])> {
    if buf.len() < 4 {
        return Err(invalid("truncated length prefix"));
    }
    let (len, rest) = buf.split_at(4);
    Ok((
        u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize,
        rest,
    ))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes()).await?;
    w.write_all(payload).await?;
    w.flush().await
}

pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Vec<u8>> {
    let len = r.read_u32_le().await? as usize;
    if len > MAX_FRAME {
        return Err(invalid("frame exceeds limit"));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).await?;
    Ok(buf)
}

/// Checks a subscriber or service client header against what the server
/// offers. Returns the error text to send back on mismatch.
pub fn check_client_header(header: &TcpRosHeader, md5: &str) -> Result<(), String> {
    let Some(their_md5) = header.get("md5sum") else {
        return Err("missing required field md5sum".to_owned());
    };
    if header.get("callerid").is_none() {
        return Err("missing required field callerid".to_owned());
    }
    if their_md5 != "*" && their_md5 != md5 {
        return Err(format!("md5sum mismatch: {their_md5} != {md5}"));
    }
    Ok(())
}
