//! Byte layouts for the pool's intake/result messages and for rank-to-rank
//! envelopes. All integers are big-endian. See `docs/funcpool-protocol.md`.

use std::io::{self, Read, Write};

use serde_json::Value;
use thiserror::Error;

pub const PROTOCOL_VERSION: u8 = 1;

pub const MSG_INVOKE: u8 = 0x01;
pub const MSG_RESULT: u8 = 0x02;

/// Upper bound on a single frame, to reject garbage lengths early.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("truncated message")]
    Truncated,
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("unexpected message type {0:#04x}")]
    MessageType(u8),
    #[error("invalid utf-8 in string field")]
    Utf8,
    #[error("invalid json arguments: {0}")]
    Json(String),
    #[error("trailing bytes after message")]
    Trailing,
    #[error("frame of {0} bytes exceeds limit")]
    TooLong(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionInvocation {
    pub uid: String,
    pub function: String,
    pub args: Value,
    /// Number of ranks the function runs on.
    pub k: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultStatus {
    Ok = 0,
    Error = 1,
}

/// Reply to one invocation. On success `blobs` holds one serialized value
/// per intra-rank; on error it holds a single error message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvocationResult {
    pub uid: String,
    pub status: ResultStatus,
    pub blobs: Vec<Vec<u8>>,
}

impl InvocationResult {
    pub fn is_ok(&self) -> bool {
        self.status == ResultStatus::Ok
    }

    pub fn error_message(&self) -> Option<String> {
        match self.status {
            ResultStatus::Ok => None,
            ResultStatus::Error => Some(
                self.blobs
                    .first()
                    .map(|b| String::from_utf8_lossy(b).into_owned())
                    .unwrap_or_default(),
            ),
        }
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() < n {
            return Err(ProtocolError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, ProtocolError> {
        String::from_utf8(self.bytes()?).map_err(|_| ProtocolError::Utf8)
    }

    pub fn end(&self) -> Result<(), ProtocolError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::Trailing)
        }
    }
}

fn header(r: &mut Reader<'_>, expected: u8) -> Result<(), ProtocolError> {
    let version = r.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(version));
    }
    let ty = r.u8()?;
    if ty != expected {
        return Err(ProtocolError::MessageType(ty));
    }
    Ok(())
}

/// Message body (without the length prefix) for an invocation.
pub fn encode_invocation(inv: &FunctionInvocation) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(PROTOCOL_VERSION)
        .u8(MSG_INVOKE)
        .str(&inv.uid)
        .str(&inv.function)
        .str(&inv.args.to_string())
        .u32(inv.k);
    w.finish()
}

pub fn decode_invocation(body: &[u8]) -> Result<FunctionInvocation, ProtocolError> {
    let mut r = Reader::new(body);
    header(&mut r, MSG_INVOKE)?;
    let uid = r.str()?;
    let function = r.str()?;
    let args = r.str()?;
    let args = serde_json::from_str(&args).map_err(|e| ProtocolError::Json(e.to_string()))?;
    let k = r.u32()?;
    r.end()?;
    Ok(FunctionInvocation { uid, function, args, k })
}

pub fn encode_result(res: &InvocationResult) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(PROTOCOL_VERSION)
        .u8(MSG_RESULT)
        .str(&res.uid)
        .u8(res.status as u8)
        .u32(res.blobs.len() as u32);
    for b in &res.blobs {
        w.bytes(b);
    }
    w.finish()
}

pub fn decode_result(body: &[u8]) -> Result<InvocationResult, ProtocolError> {
    let mut r = Reader::new(body);
    header(&mut r, MSG_RESULT)?;
    let uid = r.str()?;
    let status = match r.u8()? {
        0 => ResultStatus::Ok,
        _ => ResultStatus::Error,
    };
    let n = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        blobs.push(r.bytes()?);
    }
    r.end()?;
    Ok(InvocationResult { uid, status, blobs })
}

/// Writes `body` with its u32 length prefix.
pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)
}

/// Reads one length-prefixed frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, ProtocolError::TooLong(len)));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn invocation_layout_is_stable() {
        let inv = FunctionInvocation {
            uid: "t1".into(),
            function: "noop".into(),
            args: json!(null),
            k: 4,
        };
        let body = encode_invocation(&inv);
        let expected: Vec<u8> = [
            vec![1, 1],
            vec![0, 0, 0, 2],
            b"t1".to_vec(),
            vec![0, 0, 0, 4],
            b"noop".to_vec(),
            vec![0, 0, 0, 4],
            b"null".to_vec(),
            vec![0, 0, 0, 4],
        ]
        .concat();
        assert_eq!(body, expected);
        assert_eq!(decode_invocation(&body).unwrap(), inv);
    }

    #[test]
    fn version_and_type_are_checked() {
        let inv = FunctionInvocation {
            uid: "t".into(),
            function: "f".into(),
            args: json!({}),
            k: 1,
        };
        let mut body = encode_invocation(&inv);
        body[0] = 2;
        assert_eq!(decode_invocation(&body), Err(ProtocolError::Version(2)));
        let body = encode_invocation(&inv);
        assert_eq!(decode_result(&body), Err(ProtocolError::MessageType(MSG_INVOKE)));
        assert_eq!(
            decode_invocation(&body[..body.len() - 1]),
            Err(ProtocolError::Truncated)
        );
        let mut long = body.clone();
        long.push(0);
        assert_eq!(decode_invocation(&long), Err(ProtocolError::Trailing));
    }

    #[test]
    fn frames_round_trip_through_a_stream() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(b"abc".to_vec()));
        assert_eq!(read_frame(&mut cur).unwrap(), Some(Vec::new()));
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }

    proptest! {
        #[test]
        fn results_round_trip(uid in "[a-z0-9.]{1,16}", ok in any::<bool>(),
                              blobs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..32), 0..8)) {
            let res = InvocationResult {
                uid,
                status: if ok { ResultStatus::Ok } else { ResultStatus::Error },
                blobs,
            };
            prop_assert_eq!(decode_result(&encode_result(&res)).unwrap(), res);
        }
    }
}
