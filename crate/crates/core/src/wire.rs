//! Framed binary protocol for every server↔site and site↔site exchange.
//!
//! ```text
//! +--------+---------+----------+-----------------+-----------------+
//! | "FKBP" | version | msg_type | payload_len u32 | payload ...     |
//! | 4 B    | 1 B     | 1 B      | little-endian   | payload_len B   |
//! +--------+---------+----------+-----------------+-----------------+
//! ```
//!
//! Payload fields are written in declaration order: integers little-endian
//! fixed width (ids, rounds and counts u64, ports u16), booleans one byte,
//! reals f64 LE, strings u16 length + UTF-8, lists u32 count + elements,
//! parameter vectors in the `params` layout.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use thiserror::Error;

use crate::params::{decode_params_prefix, encode_params_into, ParamError, ParameterVector};

pub const MAGIC: [u8; 4] = *b"FKBP";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;
pub const DEFAULT_READ_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte cap")]
    Oversize(usize),
    #[error("{0} trailing bytes inside declared payload")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("message violates protocol invariants: {0}")]
    Invalid(String),
    #[error("connection closed before a frame started")]
    Closed,
    #[error("connection closed mid-frame after {received} bytes")]
    ClosedMidFrame { received: usize },
    #[error("read timed out")]
    Timeout,
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for WireError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => WireError::Timeout,
            _ => WireError::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Sender,
    Receiver,
    Idle,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Sender => 0,
            Role::Receiver => 1,
            Role::Idle => 2,
        }
    }

    fn from_code(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(Role::Sender),
            1 => Ok(Role::Receiver),
            2 => Ok(Role::Idle),
            _ => Err(WireError::Malformed(format!("unknown role code {b}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Sender => "sender",
            Role::Receiver => "receiver",
            Role::Idle => "idle",
        }
    }
}

/// One site's assignment for a round.
///
/// Encoded as `site_id, host, port, role` followed by `peer_id: u64` only
/// for senders and receivers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub site_id: u64,
    pub host: String,
    pub port: u16,
    pub role: Role,
    pub peer_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Register { site_id: u64, listen_host: String, listen_port: u16, case_count: u64 },
    StatusUpdate { site_id: u64, round: u64, active: bool, validation_loss: f64 },
    RoundPlan { round: u64, entries: Vec<PlanEntry> },
    SubmitUpdate { site_id: u64, round: u64, case_count: u64, params: ParameterVector },
    GlobalModel { round: u64, params: ParameterVector },
    ModelTransfer { round: u64, sender_id: u64, validation_loss: f64, params: ParameterVector },
    Shutdown { reason: String },
}

impl WireMessage {
    pub fn type_code(&self) -> u8 {
        match self {
            WireMessage::Register { .. } => 1,
            WireMessage::StatusUpdate { .. } => 2,
            WireMessage::RoundPlan { .. } => 3,
            WireMessage::SubmitUpdate { .. } => 4,
            WireMessage::GlobalModel { .. } => 5,
            WireMessage::ModelTransfer { .. } => 6,
            WireMessage::Shutdown { .. } => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Register { .. } => "REGISTER",
            WireMessage::StatusUpdate { .. } => "STATUS_UPDATE",
            WireMessage::RoundPlan { .. } => "ROUND_PLAN",
            WireMessage::SubmitUpdate { .. } => "SUBMIT_UPDATE",
            WireMessage::GlobalModel { .. } => "GLOBAL_MODEL",
            WireMessage::ModelTransfer { .. } => "MODEL_TRANSFER",
            WireMessage::Shutdown { .. } => "SHUTDOWN",
        }
    }

    /// Whether this frame carries model parameters.
    pub fn carries_params(&self) -> bool {
        matches!(
            self,
            WireMessage::SubmitUpdate { .. } | WireMessage::GlobalModel { .. } | WireMessage::ModelTransfer { .. }
        )
    }

    fn validate(&self) -> Result<(), WireError> {
        match self {
            WireMessage::RoundPlan { entries, .. } => {
                for e in entries {
                    match (e.role, e.peer_id) {
                        (Role::Idle, None) | (Role::Sender | Role::Receiver, Some(_)) => {}
                        _ => {
                            return Err(WireError::Invalid(format!(
                                "site {} has role {:?} with peer {:?}",
                                e.site_id, e.role, e.peer_id
                            )))
                        }
                    }
                }
                Ok(())
            }
            WireMessage::SubmitUpdate { params, .. }
            | WireMessage::GlobalModel { params, .. } => Ok(params.check_finite()?),
            WireMessage::ModelTransfer { params, validation_loss, .. } => {
                check_real(*validation_loss)?;
                Ok(params.check_finite()?)
            }
            WireMessage::StatusUpdate { validation_loss, .. } => check_real(*validation_loss),
            WireMessage::Register { .. } | WireMessage::Shutdown { .. } => Ok(()),
        }
    }
}

fn check_real(x: f64) -> Result<(), WireError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(WireError::Invalid(format!("non-finite real {x}")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::Invalid(format!("string of {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_payload(m: &WireMessage, out: &mut Vec<u8>) -> Result<(), WireError> {
    match m {
        WireMessage::Register { site_id, listen_host, listen_port, case_count } => {
            out.extend_from_slice(&site_id.to_le_bytes());
            put_str(out, listen_host)?;
            out.extend_from_slice(&listen_port.to_le_bytes());
            out.extend_from_slice(&case_count.to_le_bytes());
        }
        WireMessage::StatusUpdate { site_id, round, active, validation_loss } => {
            out.extend_from_slice(&site_id.to_le_bytes());
            out.extend_from_slice(&round.to_le_bytes());
            out.push(u8::from(*active));
            out.extend_from_slice(&validation_loss.to_le_bytes());
        }
        WireMessage::RoundPlan { round, entries } => {
            out.extend_from_slice(&round.to_le_bytes());
            let count = u32::try_from(entries.len()).map_err(|_| WireError::Invalid("too many plan entries".into()))?;
            out.extend_from_slice(&count.to_le_bytes());
            for e in entries {
                out.extend_from_slice(&e.site_id.to_le_bytes());
                put_str(out, &e.host)?;
                out.extend_from_slice(&e.port.to_le_bytes());
                out.push(e.role.code());
                if let Some(peer) = e.peer_id {
                    out.extend_from_slice(&peer.to_le_bytes());
                }
            }
        }
        WireMessage::SubmitUpdate { site_id, round, case_count, params } => {
            out.extend_from_slice(&site_id.to_le_bytes());
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&case_count.to_le_bytes());
            encode_params_into(params, out);
        }
        WireMessage::GlobalModel { round, params } => {
            out.extend_from_slice(&round.to_le_bytes());
            encode_params_into(params, out);
        }
        WireMessage::ModelTransfer { round, sender_id, validation_loss, params } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&sender_id.to_le_bytes());
            out.extend_from_slice(&validation_loss.to_le_bytes());
            encode_params_into(params, out);
        }
        WireMessage::Shutdown { reason } => put_str(out, reason)?,
    }
    Ok(())
}

/// Encodes one complete frame.
pub fn encode_message(m: &WireMessage) -> Result<Vec<u8>, WireError> {
    m.validate()?;
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.type_code());
    out.extend_from_slice(&[0; 4]);
    encode_payload(m, &mut out)?;
    let len = out.len() - HEADER_LEN;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len));
    }
    out[6..10].copy_from_slice(&(len as u32).to_le_bytes());
    Ok(out)
}

/// A validated frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: u8,
    pub payload_len: usize,
}

pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<FrameHeader, WireError> {
    let magic: [u8; 4] = h[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(WireError::UnsupportedVersion(h[4]));
    }
    if !(1..=7).contains(&h[5]) {
        return Err(WireError::UnknownType(h[5]));
    }
    let payload_len = u32::from_le_bytes(h[6..10].try_into().unwrap()) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::Oversize(payload_len));
    }
    Ok(FrameHeader { msg_type: h[5], payload_len })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        let x = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        check_real(x)?;
        Ok(x)
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::Malformed(format!("boolean byte {b}"))),
        }
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("invalid UTF-8".into()))
    }

    fn params(&mut self) -> Result<ParameterVector, WireError> {
        let rest = &self.buf[self.pos..];
        let (v, used) = decode_params_prefix(rest).map_err(|e| match e {
            ParamError::Truncated { needed, available } => WireError::Truncated { needed, available },
            other => WireError::Params(other),
        })?;
        self.pos += used;
        v.check_finite()?;
        Ok(v)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Smallest encoded plan entry: id, empty host, port, role.
const MIN_PLAN_ENTRY: usize = 8 + 2 + 2 + 1;

pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<WireMessage, WireError> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let m = match msg_type {
        1 => WireMessage::Register {
            site_id: c.u64()?,
            listen_host: c.string()?,
            listen_port: c.u16()?,
            case_count: c.u64()?,
        },
        2 => WireMessage::StatusUpdate {
            site_id: c.u64()?,
            round: c.u64()?,
            active: c.bool()?,
            validation_loss: c.f64()?,
        },
        3 => {
            let round = c.u64()?;
            let count = c.u32()? as usize;
            let mut entries = Vec::with_capacity(count.min(c.remaining() / MIN_PLAN_ENTRY));
            for _ in 0..count {
                let site_id = c.u64()?;
                let host = c.string()?;
                let port = c.u16()?;
                let role = Role::from_code(c.u8()?)?;
                let peer_id = match role {
                    Role::Idle => None,
                    _ => Some(c.u64()?),
                };
                entries.push(PlanEntry { site_id, host, port, role, peer_id });
            }
            WireMessage::RoundPlan { round, entries }
        }
        4 => WireMessage::SubmitUpdate {
            site_id: c.u64()?,
            round: c.u64()?,
            case_count: c.u64()?,
            params: c.params()?,
        },
        5 => WireMessage::GlobalModel { round: c.u64()?, params: c.params()? },
        6 => WireMessage::ModelTransfer {
            round: c.u64()?,
            sender_id: c.u64()?,
            validation_loss: c.f64()?,
            params: c.params()?,
        },
        7 => WireMessage::Shutdown { reason: c.string()? },
        t => return Err(WireError::UnknownType(t)),
    };
    if c.remaining() > 0 {
        return Err(WireError::TrailingBytes(c.remaining()));
    }
    Ok(m)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<WireMessage, WireError> {
    if bytes.len() < HEADER_LEN {
        // still report a bad magic if enough of it is present
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(WireError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(WireError::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    let header = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < header.payload_len {
        return Err(WireError::Truncated { needed: header.payload_len, available: body.len() });
    }
    if body.len() > header.payload_len {
        return Err(WireError::TrailingBytes(body.len() - header.payload_len));
    }
    decode_payload(header.msg_type, body)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], already: usize) -> Result<(), WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && already == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(WireError::ClosedMidFrame { received: already + filled }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads one frame, blocking until it is complete. Returns the message and
/// the number of bytes consumed.
pub fn read_frame<R: Read>(stream: &mut R) -> Result<(WireMessage, usize), WireError> {
    let mut header = [0u8; HEADER_LEN];
    read_full(stream, &mut header, 0)?;
    let h = parse_header(&header)?;
    let mut payload = vec![0u8; h.payload_len];
    read_full(stream, &mut payload, HEADER_LEN)?;
    Ok((decode_payload(h.msg_type, &payload)?, HEADER_LEN + h.payload_len))
}

/// Writes one frame with a single `write_all`. Returns bytes written.
pub fn write_frame<W: Write>(stream: &mut W, m: &WireMessage) -> Result<usize, WireError> {
    let bytes = encode_message(m)?;
    stream.write_all(&bytes)?;
    stream.flush()?;
    Ok(bytes.len())
}

pub fn read_frame_timeout(stream: &mut TcpStream, timeout: Duration) -> Result<(WireMessage, usize), WireError> {
    stream.set_read_timeout(Some(timeout))?;
    read_frame(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_shutdown_is_twelve_bytes() {
        let bytes = encode_message(&WireMessage::Shutdown { reason: String::new() }).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..6], b"FKBP\x01\x07");
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_rejected_from_the_header_alone() {
        let mut bytes = encode_message(&WireMessage::Shutdown { reason: "x".into() }).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_message(&bytes), Err(WireError::BadMagic(m)) if &m == b"XKBP"));
        // a reader stops after the header
        let mut r = io::Cursor::new(bytes);
        assert!(matches!(read_frame(&mut r), Err(WireError::BadMagic(_))));
        assert_eq!(r.position(), HEADER_LEN as u64);
    }

    #[test]
    fn role_peer_consistency_is_enforced() {
        let m = WireMessage::RoundPlan {
            round: 1,
            entries: vec![PlanEntry { site_id: 0, host: "h".into(), port: 1, role: Role::Idle, peer_id: Some(3) }],
        };
        assert!(matches!(encode_message(&m), Err(WireError::Invalid(_))));
        let m = WireMessage::RoundPlan {
            round: 1,
            entries: vec![PlanEntry { site_id: 0, host: "h".into(), port: 1, role: Role::Sender, peer_id: None }],
        };
        assert!(matches!(encode_message(&m), Err(WireError::Invalid(_))));
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let m = WireMessage::GlobalModel { round: 0, params: ParameterVector::new(vec![f64::NAN]) };
        assert!(encode_message(&m).is_err());
        // hand-built frame with an infinite coordinate
        let ok = encode_message(&WireMessage::GlobalModel { round: 0, params: ParameterVector::new(vec![1.0]) }).unwrap();
        let mut bad = ok.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(decode_message(&bad), Err(WireError::Params(ParamError::NonFinite { .. }))));
    }

    #[test]
    fn bad_bool_and_trailing_bytes() {
        let mut bytes = encode_message(&WireMessage::StatusUpdate {
            site_id: 1,
            round: 2,
            active: true,
            validation_loss: 0.5,
        })
        .unwrap();
        bytes[HEADER_LEN + 16] = 2;
        assert!(matches!(decode_message(&bytes), Err(WireError::Malformed(_))));

        let mut frame = encode_message(&WireMessage::Shutdown { reason: "ab".into() }).unwrap();
        frame.push(0);
        frame[6..10].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_message(&frame), Err(WireError::TrailingBytes(1))));
    }
}
