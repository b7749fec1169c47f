//! Synchronous gradient federation.
//!
//! Workers compute gradient releases locally and send them to a coordinator,
//! which waits for one release per worker, averages them and broadcasts the
//! average. Every replica starts from the same weights and applies the same
//! averages, so replicas stay bit-identical. The coordinator holds no data
//! and no model; it only ever sees releases.
//!
//! The protocol logic lives in two transport-agnostic state machines
//! ([`CoordinatorMachine`], [`WorkerMachine`]); [`inproc`] drives them over an
//! in-memory queue and [`tcp`] over sockets.

pub mod codec;
pub mod inproc;
mod machine;
pub mod tcp;

use std::fmt;
use std::time::Duration;

pub use codec::{decode, encode, Message, MessageKind, PROTOCOL_VERSION};
pub use machine::{CoordinatorMachine, CoordinatorSummary, SessionStatus, WorkerMachine, WorkerOutcome, WorkerSetup};

use crate::dpsgd::GradientRelease;
use crate::error::{Error, Result};
use crate::nn::{FlatGradient, Network, NetworkDims};
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum AbortCode {
    BudgetExceeded = 1,
    TimedOut = 2,
    ProtocolError = 3,
    DecodeError = 4,
    TransportError = 5,
    WorkerError = 6,
}

impl AbortCode {
    pub fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            1 => AbortCode::BudgetExceeded,
            2 => AbortCode::TimedOut,
            3 => AbortCode::ProtocolError,
            4 => AbortCode::DecodeError,
            5 => AbortCode::TransportError,
            6 => AbortCode::WorkerError,
            other => return Err(Error::Decode(format!("unknown abort code {other}"))),
        })
    }

    pub fn for_error(e: &Error) -> Self {
        match e {
            Error::BudgetExceeded { .. } => AbortCode::BudgetExceeded,
            Error::TimedOut(_) => AbortCode::TimedOut,
            Error::Decode(_) => AbortCode::DecodeError,
            Error::Protocol(_) => AbortCode::ProtocolError,
            Error::Io(_) => AbortCode::TransportError,
            Error::Aborted { code, .. } => *code,
            _ => AbortCode::WorkerError,
        }
    }
}

impl fmt::Display for AbortCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// How workers obtain the shared starting weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInit {
    /// Every worker runs [`Network::init`] with `RandomSource::new(seed)`.
    Seed(u64),
    /// Explicit flat parameters, e.g. a warm-started model.
    Parameters(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitPayload {
    pub dims: NetworkDims,
    pub model: ModelInit,
    pub total_steps: u32,
    pub lr: f64,
}

impl InitPayload {
    pub fn from_network(net: &Network, total_steps: u32, lr: f64) -> Self {
        Self { dims: net.dims(), model: ModelInit::Parameters(net.params().to_vec()), total_steps, lr }
    }

    pub fn build_network(&self) -> Result<Network> {
        match &self.model {
            ModelInit::Seed(seed) => Ok(Network::init(self.dims, &mut RandomSource::new(*seed))),
            ModelInit::Parameters(p) => Network::from_flat(self.dims, p.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub n_workers: usize,
    /// `host:port` to listen on (coordinator) or connect to (worker).
    pub address: String,
    pub init: InitPayload,
    /// How long to wait for any single expected message.
    pub timeout: Duration,
}

impl SessionConfig {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    pub fn new(n_workers: usize, address: impl Into<String>, init: InitPayload) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Config("a session needs at least one worker".into()));
        }
        Ok(Self { n_workers, address: address.into(), init, timeout: Self::DEFAULT_TIMEOUT })
    }
}

/// Unweighted coordinate-wise mean of `(worker_id, release)` pairs, summed
/// in ascending worker id so that the result is independent of arrival order.
/// Each coordinate is kept inside the range of its inputs, which makes the
/// mean of equal inputs exactly that input.
pub fn average_releases(releases: &[(u32, &GradientRelease)]) -> Result<FlatGradient> {
    let mut sorted: Vec<&(u32, &GradientRelease)> = releases.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let (_, first) = sorted.first().ok_or_else(|| Error::Protocol("no releases to average".into()))?;
    let len = first.vector.len();
    let step = first.step_id;
    let mut sum = vec![0.0; len];
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    for (id, r) in &sorted {
        if r.vector.len() != len {
            return Err(Error::Protocol(format!("worker {id} sent {} coordinates, expected {len}", r.vector.len())));
        }
        if r.step_id != step {
            return Err(Error::Protocol(format!("worker {id} sent step {} during step {step}", r.step_id)));
        }
        for (k, &v) in r.vector.as_slice().iter().enumerate() {
            sum[k] += v;
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let n = sorted.len() as f64;
    for k in 0..len {
        sum[k] = (sum[k] / n).clamp(lo[k], hi[k]);
    }
    Ok(FlatGradient::new(sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToCoordinator,
    ToWorker,
}

impl Direction {
    fn as_str(self) -> &'static str {
        match self {
            Direction::ToCoordinator => "w2c",
            Direction::ToWorker => "c2w",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub worker_id: u32,
    pub kind: MessageKind,
    pub step_id: Option<u32>,
    pub payload_len: usize,
}

/// Message log: one tab-separated line per message with direction
/// (`w2c`/`c2w`), worker id, type, step id (`-` when absent) and payload
/// byte length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn record(&mut self, direction: Direction, worker_id: u32, msg: &Message, frame_len: usize) {
        self.entries.push(TranscriptEntry {
            direction,
            worker_id,
            kind: msg.kind(),
            step_id: msg.step_id(),
            payload_len: frame_len - codec::HEADER_LEN,
        });
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let step = e.step_id.map_or_else(|| "-".to_string(), |s| s.to_string());
                format!("{}\t{}\t{}\t{}\t{}\n", e.direction.as_str(), e.worker_id, e.kind.name(), step, e.payload_len)
            })
            .collect()
    }

    /// Message type names in order, space separated.
    pub fn kind_sequence(&self) -> String {
        self.entries.iter().map(|e| e.kind.name()).collect::<Vec<_>>().join(" ")
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::PrivacyParams;

    fn release(step: u32, v: &[f64]) -> GradientRelease {
        GradientRelease {
            step_id: step,
            vector: FlatGradient::new(v.to_vec()),
            spent: PrivacyParams::zero(),
            noisy: false,
            clip_bound: 1.0,
            batch_size: 1,
        }
    }

    #[test]
    fn average_examples() {
        let a = release(0, &[1.0, 2.0]);
        let b = release(0, &[3.0, 4.0]);
        assert_eq!(average_releases(&[(0, &a)]).unwrap(), a.vector);
        assert_eq!(average_releases(&[(1, &b), (0, &a)]).unwrap(), FlatGradient::new(vec![2.0, 3.0]));
        // 0.1 + 0.1 + 0.1 rounds above 0.3; the result must still be 0.1 exactly.
        let c = release(0, &[0.1, 0.7, -1e-300]);
        assert_eq!(average_releases(&[(0, &c), (1, &c), (2, &c)]).unwrap(), c.vector);
    }

    #[test]
    fn average_rejects_mismatch() {
        let a = release(0, &[1.0, 2.0]);
        let short = release(0, &[1.0]);
        let late = release(1, &[1.0, 2.0]);
        assert!(matches!(average_releases(&[(0, &a), (1, &short)]), Err(Error::Protocol(_))));
        assert!(matches!(average_releases(&[(0, &a), (1, &late)]), Err(Error::Protocol(_))));
        assert!(matches!(average_releases(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let a = release(0, &[0.1, 1e-17]);
        let b = release(0, &[0.2, 1.0]);
        let c = release(0, &[0.3, -1.0]);
        let x = average_releases(&[(0, &a), (1, &b), (2, &c)]).unwrap();
        let y = average_releases(&[(2, &c), (0, &a), (1, &b)]).unwrap();
        assert_eq!(x, y);
    }
}
