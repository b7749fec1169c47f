//! Wire format.
//!
//! Every frame is `"FDP1" | tag: u8 | payload_len: u32 LE | payload`.
//! Integers in payloads are little-endian `u32` (the model seed is a
//! little-endian `u64`), reals are little-endian IEEE-754 `f64`.
//!
//! | tag | message | payload |
//! |-----|---------|---------|
//! | 1 | HELLO | worker_id, protocol_version |
//! | 2 | INIT  | input_dim, hidden_dim, output_dim, total_steps, lr: f64, init_kind, then seed: u64 (kind 0) or count + count f64 parameters (kind 1) |
//! | 3 | GRAD  | step_id, noisy (0/1), epsilon: f64, delta: f64, clip_bound: f64, batch_size, len, len f64 |
//! | 4 | AVG   | step_id, len, len f64 |
//! | 5 | DONE  | step_id |
//! | 6 | ABORT | reason code, text_len, UTF-8 text |

use std::io::Read;

use crate::dp::PrivacyParams;
use crate::dpsgd::GradientRelease;
use crate::error::{Error, Result};
use crate::nn::{FlatGradient, NetworkDims};

use super::{AbortCode, InitPayload, ModelInit};

pub const FRAME_MAGIC: &[u8; 4] = b"FDP1";
pub const HEADER_LEN: usize = 9;
pub const PROTOCOL_VERSION: u32 = 1;
/// Frames claiming a larger payload are rejected before allocation.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    Init = 2,
    Grad = 3,
    Avg = 4,
    Done = 5,
    Abort = 6,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Hello => "HELLO",
            MessageKind::Init => "INIT",
            MessageKind::Grad => "GRAD",
            MessageKind::Avg => "AVG",
            MessageKind::Done => "DONE",
            MessageKind::Abort => "ABORT",
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => MessageKind::Hello,
            2 => MessageKind::Init,
            3 => MessageKind::Grad,
            4 => MessageKind::Avg,
            5 => MessageKind::Done,
            6 => MessageKind::Abort,
            other => return Err(Error::Decode(format!("unknown message tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { worker_id: u32, protocol_version: u32 },
    Init(InitPayload),
    Grad(GradientRelease),
    Avg { step_id: u32, gradient: FlatGradient },
    Done { step_id: u32 },
    Abort { code: AbortCode, text: String },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello { .. } => MessageKind::Hello,
            Message::Init(_) => MessageKind::Init,
            Message::Grad(_) => MessageKind::Grad,
            Message::Avg { .. } => MessageKind::Avg,
            Message::Done { .. } => MessageKind::Done,
            Message::Abort { .. } => MessageKind::Abort,
        }
    }

    pub fn step_id(&self) -> Option<u32> {
        match self {
            Message::Grad(r) => Some(r.step_id),
            Message::Avg { step_id, .. } | Message::Done { step_id } => Some(*step_id),
            _ => None,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) -> Result<()> {
        self.u32(u32::try_from(v).map_err(|_| Error::Protocol(format!("length {v} exceeds u32")))?);
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        self.len(vs.len())?;
        vs.iter().for_each(|&v| self.f64(v));
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Decode("payload truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len()) {
            return Err(Error::Decode("vector length exceeds payload".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Decode(format!("{} unexpected trailing payload bytes", self.buf.len())))
        }
    }
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Protocol("dimension exceeds u32".into()))
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut p = Writer(Vec::new());
    match msg {
        Message::Hello { worker_id, protocol_version } => {
            p.u32(*worker_id);
            p.u32(*protocol_version);
        }
        Message::Init(init) => {
            p.u32(dim_u32(init.dims.input_dim)?);
            p.u32(dim_u32(init.dims.hidden_dim)?);
            p.u32(dim_u32(init.dims.output_dim)?);
            p.u32(init.total_steps);
            p.f64(init.lr);
            match &init.model {
                ModelInit::Seed(seed) => {
                    p.u32(0);
                    p.0.extend_from_slice(&seed.to_le_bytes());
                }
                ModelInit::Parameters(params) => {
                    p.u32(1);
                    p.f64s(params)?;
                }
            }
        }
        Message::Grad(r) => {
            p.u32(r.step_id);
            p.u32(u32::from(r.noisy));
            p.f64(r.spent.epsilon);
            p.f64(r.spent.delta);
            p.f64(r.clip_bound);
            p.u32(r.batch_size);
            p.f64s(r.vector.as_slice())?;
        }
        Message::Avg { step_id, gradient } => {
            p.u32(*step_id);
            p.f64s(gradient.as_slice())?;
        }
        Message::Done { step_id } => p.u32(*step_id),
        Message::Abort { code, text } => {
            p.u32(*code as u32);
            p.len(text.len())?;
            p.0.extend_from_slice(text.as_bytes());
        }
    }
    let payload = p.0;
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload of {} bytes exceeds limit", payload.len())));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(FRAME_MAGIC);
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Validates a frame header, returning the message kind and payload length.
pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(MessageKind, usize)> {
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Decode("bad frame magic".into()));
    }
    let kind = MessageKind::from_tag(header[4])?;
    let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Decode(format!("payload length {len} exceeds limit")));
    }
    Ok((kind, len))
}

pub fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: payload };
    let msg = match kind {
        MessageKind::Hello => Message::Hello { worker_id: r.u32()?, protocol_version: r.u32()? },
        MessageKind::Init => {
            let (d, h, o) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let dims = NetworkDims::new(d, h, o).map_err(|e| Error::Decode(e.to_string()))?;
            let total_steps = r.u32()?;
            let lr = r.f64()?;
            let model = match r.u32()? {
                0 => ModelInit::Seed(r.u64()?),
                1 => ModelInit::Parameters(r.f64s()?),
                other => return Err(Error::Decode(format!("unknown init kind {other}"))),
            };
            Message::Init(InitPayload { dims, model, total_steps, lr })
        }
        MessageKind::Grad => {
            let step_id = r.u32()?;
            let noisy = match r.u32()? {
                0 => false,
                1 => true,
                other => return Err(Error::Decode(format!("bad noisy flag {other}"))),
            };
            let spent = PrivacyParams { epsilon: r.f64()?, delta: r.f64()? };
            let clip_bound = r.f64()?;
            let batch_size = r.u32()?;
            let vector = FlatGradient::new(r.f64s()?);
            Message::Grad(GradientRelease { step_id, vector, spent, noisy, clip_bound, batch_size })
        }
        MessageKind::Avg => Message::Avg { step_id: r.u32()?, gradient: FlatGradient::new(r.f64s()?) },
        MessageKind::Done => Message::Done { step_id: r.u32()? },
        MessageKind::Abort => {
            let code = AbortCode::from_u32(r.u32()?)?;
            let n = r.u32()? as usize;
            let text = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Decode("abort text is not UTF-8".into()))?;
            Message::Abort { code, text }
        }
    };
    r.finish()?;
    Ok(msg)
}

pub fn decode(bytes: &[u8]) -> Result<Message> {
    let header: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::Decode("frame shorter than header".into()))?;
    let (kind, len) = decode_header(header)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::Decode(format!("payload length field {len} but {} bytes follow", payload.len())));
    }
    decode_payload(kind, payload)
}

/// Reads one frame from a stream. `Ok(None)` on a clean end-of-stream
/// before any header byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<(Message, usize)>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Decode("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Io(e)),
        }
    }
    let (kind, len) = decode_header(&header)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Decode("stream ended inside a payload".into()),
        _ => Error::Io(e),
    })?;
    Ok(Some((decode_payload(kind, &payload)?, len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn done_frame_layout() {
        let bytes = encode(&Message::Done { step_id: 0 }).unwrap();
        assert_eq!(bytes, [b'F', b'D', b'P', b'1', 5, 4, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes.len(), 13);
    }

    #[test]
    fn grad_round_trip_is_bit_identical() {
        let vector = FlatGradient::new((0..1000).map(|i| (i as f64).sin() * 1e-3).collect());
        let msg = Message::Grad(GradientRelease {
            step_id: 7,
            vector,
            spent: PrivacyParams { epsilon: 100.0, delta: 1e-6 },
            noisy: true,
            clip_bound: 1.0,
            batch_size: 8,
        });
        let bytes = encode(&msg).unwrap();
        assert_eq!(decode(&bytes).unwrap(), msg);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        let bytes = encode(&Message::Hello { worker_id: 1, protocol_version: 1 }).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Decode(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Decode(_))));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(decode(&bad), Err(Error::Decode(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Decode(_))));
        assert!(matches!(decode(&bytes[..5]), Err(Error::Decode(_))));
        // A payload that is internally inconsistent with its declared vector length.
        let mut avg = encode(&Message::Avg { step_id: 0, gradient: FlatGradient::zeros(2) }).unwrap();
        avg[13] = 3;
        assert!(matches!(decode(&avg), Err(Error::Decode(_))));
    }

    #[test]
    fn stream_reader_handles_eof() {
        let a = encode(&Message::Done { step_id: 3 }).unwrap();
        let mut stream = &a[..];
        let (m, len) = read_message(&mut stream).unwrap().unwrap();
        assert_eq!(m, Message::Done { step_id: 3 });
        assert_eq!(len, 4);
        assert!(read_message(&mut stream).unwrap().is_none());
        let mut cut = &a[..6];
        assert!(matches!(read_message(&mut cut), Err(Error::Decode(_))));
    }
}
