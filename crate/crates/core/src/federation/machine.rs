use std::collections::{BTreeMap, BTreeSet};

use crate::data::{Dataset, FeatureSequence};
use crate::dp::{AccountLedger, ExactSum, PrivacyParams};
use crate::dpsgd::{train_step, BatchSampler, DpSgdConfig, GradientRelease};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::RandomSource;

use super::codec::{Message, PROTOCOL_VERSION};
use super::{average_releases, AbortCode, InitPayload};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionStatus {
    Running,
    Completed,
    Aborted { code: AbortCode, text: String },
}

impl SessionStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, SessionStatus::Completed)
    }

    pub fn abort_code(&self) -> Option<AbortCode> {
        match self {
            SessionStatus::Aborted { code, .. } => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorSummary {
    pub steps_completed: u32,
    pub grads_received: usize,
    /// Cumulative spend per worker, as self-reported in its releases.
    pub per_worker_spent: BTreeMap<u32, PrivacyParams>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Handshake,
    Training,
    Finished,
}

/// Coordinator protocol logic. Feed it `(worker_id, message)` pairs; it
/// returns the messages to send, addressed by worker id in ascending order.
#[derive(Debug)]
pub struct CoordinatorMachine {
    n_workers: usize,
    init: InitPayload,
    param_count: usize,
    phase: Phase,
    workers: BTreeSet<u32>,
    step: u32,
    round: BTreeMap<u32, GradientRelease>,
    grads_received: usize,
    spent: BTreeMap<u32, (ExactSum, ExactSum)>,
    status: SessionStatus,
}

type Outbox = Vec<(u32, Message)>;

impl CoordinatorMachine {
    pub fn new(n_workers: usize, init: InitPayload) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Config("a session needs at least one worker".into()));
        }
        if let super::ModelInit::Parameters(p) = &init.model {
            if p.len() != init.dims.parameter_count() {
                return Err(Error::Shape("INIT parameters do not match dims".into()));
            }
        }
        Ok(Self {
            n_workers,
            param_count: init.dims.parameter_count(),
            init,
            phase: Phase::Handshake,
            workers: BTreeSet::new(),
            step: 0,
            round: BTreeMap::new(),
            grads_received: 0,
            spent: BTreeMap::new(),
            status: SessionStatus::Running,
        })
    }

    pub fn is_done(&self) -> bool {
        self.status != SessionStatus::Running
    }

    pub fn status(&self) -> &SessionStatus {
        &self.status
    }

    /// Worker ids that have said HELLO.
    pub fn workers(&self) -> impl Iterator<Item = u32> + '_ {
        self.workers.iter().copied()
    }

    /// Current round index; equals the number of completed rounds.
    pub fn step(&self) -> u32 {
        self.step
    }

    fn broadcast(&self, msg: Message) -> Outbox {
        self.workers.iter().map(|&w| (w, msg.clone())).collect()
    }

    /// Aborts the session: every known worker except `origin` gets ABORT.
    pub fn abort(&mut self, code: AbortCode, text: impl Into<String>, origin: Option<u32>) -> Outbox {
        if self.is_done() {
            return Vec::new();
        }
        let text = text.into();
        self.status = SessionStatus::Aborted { code, text: text.clone() };
        self.phase = Phase::Finished;
        self.broadcast(Message::Abort { code, text })
            .into_iter()
            .filter(|(w, _)| Some(*w) != origin)
            .collect()
    }

    pub fn handle(&mut self, from: u32, msg: Message) -> Outbox {
        if self.is_done() {
            return Vec::new();
        }
        match self.try_handle(from, msg) {
            Ok(out) => out,
            Err(Error::Aborted { code, text }) => self.abort(code, text, Some(from)),
            Err(e) => self.abort(AbortCode::for_error(&e), e.to_string(), None),
        }
    }

    fn try_handle(&mut self, from: u32, msg: Message) -> Result<Outbox> {
        match (self.phase, msg) {
            (_, Message::Abort { code, text }) => Err(Error::Aborted { code, text: format!("worker {from}: {text}") }),
            (Phase::Handshake, Message::Hello { worker_id, protocol_version }) => {
                if worker_id != from {
                    return Err(Error::Protocol(format!("HELLO from {from} claims id {worker_id}")));
                }
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!("worker {from} speaks protocol {protocol_version}")));
                }
                if !self.workers.insert(worker_id) {
                    return Err(Error::Protocol(format!("duplicate worker id {worker_id}")));
                }
                self.spent.insert(worker_id, Default::default());
                if self.workers.len() < self.n_workers {
                    return Ok(Vec::new());
                }
                self.phase = Phase::Training;
                let mut out = self.broadcast(Message::Init(self.init.clone()));
                if self.init.total_steps == 0 {
                    out.extend(self.finish());
                }
                Ok(out)
            }
            (Phase::Training, Message::Grad(release)) => {
                if !self.workers.contains(&from) {
                    return Err(Error::Protocol(format!("GRAD from unknown worker {from}")));
                }
                if release.step_id != self.step {
                    return Err(Error::Protocol(format!(
                        "worker {from} sent step {} during step {}",
                        release.step_id, self.step
                    )));
                }
                if release.vector.len() != self.param_count {
                    return Err(Error::Protocol(format!(
                        "worker {from} sent {} coordinates, expected {}",
                        release.vector.len(),
                        self.param_count
                    )));
                }
                if !release.vector.is_finite() {
                    return Err(Error::Protocol(format!("worker {from} sent a non-finite release")));
                }
                if self.round.contains_key(&from) {
                    return Err(Error::Protocol(format!("worker {from} sent step {} twice", self.step)));
                }
                let acc = self.spent.get_mut(&from).expect("registered at HELLO");
                acc.0.add(release.spent.epsilon);
                acc.1.add(release.spent.delta);
                self.grads_received += 1;
                self.round.insert(from, release);
                if self.round.len() < self.n_workers {
                    return Ok(Vec::new());
                }
                let pairs: Vec<(u32, &GradientRelease)> = self.round.iter().map(|(&w, r)| (w, r)).collect();
                let gradient = average_releases(&pairs)?;
                self.round.clear();
                let mut out = self.broadcast(Message::Avg { step_id: self.step, gradient });
                self.step += 1;
                if self.step == self.init.total_steps {
                    out.extend(self.finish());
                }
                Ok(out)
            }
            (phase, other) => Err(Error::Protocol(format!(
                "unexpected {} from worker {from} during {phase:?}",
                other.kind().name()
            ))),
        }
    }

    fn finish(&mut self) -> Outbox {
        self.phase = Phase::Finished;
        self.status = SessionStatus::Completed;
        self.broadcast(Message::Done { step_id: self.step })
    }

    pub fn summary(&self) -> CoordinatorSummary {
        CoordinatorSummary {
            steps_completed: self.step,
            grads_received: self.grads_received,
            per_worker_spent: self
                .spent
                .iter()
                .map(|(&w, (e, d))| (w, PrivacyParams { epsilon: e.value(), delta: d.value() }))
                .collect(),
            status: self.status.clone(),
        }
    }
}

/// Everything one worker brings to a session.
#[derive(Debug, Clone)]
pub struct WorkerSetup {
    pub worker_id: u32,
    pub dp: DpSgdConfig,
    pub data: Dataset,
    pub budget: PrivacyParams,
    /// Seeds batch sampling and noise.
    pub seed: u64,
}

impl WorkerSetup {
    /// `(batch sampling, noise)` streams derived from a worker seed.
    pub fn streams(seed: u64) -> (RandomSource, RandomSource) {
        let mut root = RandomSource::new(seed);
        let batches = root.fork(0);
        let noise = root.fork(1);
        (batches, noise)
    }
}

#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub worker_id: u32,
    /// The replica as of the last applied update; `None` if INIT never arrived.
    pub network: Option<Network>,
    pub ledger: AccountLedger,
    pub steps_completed: u32,
    /// Parameter hash after each applied update.
    pub round_hashes: Vec<String>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkerPhase {
    AwaitInit,
    AwaitAvg,
    AwaitDone,
    Stopped,
}

/// Worker protocol logic: compute, send, wait for the average, apply.
#[derive(Debug)]
pub struct WorkerMachine {
    id: u32,
    dp: DpSgdConfig,
    data: Dataset,
    ledger: AccountLedger,
    sampler: BatchSampler,
    noise: RandomSource,
    net: Option<Network>,
    lr: f64,
    total_steps: u32,
    step: u32,
    phase: WorkerPhase,
    hashes: Vec<String>,
    status: SessionStatus,
}

impl WorkerMachine {
    pub fn new(setup: WorkerSetup) -> Result<Self> {
        setup.dp.validate()?;
        setup.data.require_nonempty()?;
        let (batches, noise) = WorkerSetup::streams(setup.seed);
        let sampler = BatchSampler::new(setup.data.len(), setup.dp.batch_size, batches)?;
        Ok(Self {
            id: setup.worker_id,
            ledger: AccountLedger::new(setup.budget),
            dp: setup.dp,
            data: setup.data,
            sampler,
            noise,
            net: None,
            lr: 0.0,
            total_steps: 0,
            step: 0,
            phase: WorkerPhase::AwaitInit,
            hashes: Vec::new(),
            status: SessionStatus::Running,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn hello(&self) -> Message {
        Message::Hello { worker_id: self.id, protocol_version: PROTOCOL_VERSION }
    }

    pub fn is_done(&self) -> bool {
        self.phase == WorkerPhase::Stopped
    }

    pub fn network(&self) -> Option<&Network> {
        self.net.as_ref()
    }

    pub fn ledger(&self) -> &AccountLedger {
        &self.ledger
    }

    /// Stops locally (transport failure, timeout). Nothing is sent.
    pub fn fail(&mut self, code: AbortCode, text: impl Into<String>) {
        if !self.is_done() {
            self.phase = WorkerPhase::Stopped;
            self.status = SessionStatus::Aborted { code, text: text.into() };
        }
    }

    /// Handles one incoming message and returns the replies (zero or one).
    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        if self.is_done() {
            return Vec::new();
        }
        match self.try_handle(msg) {
            Ok(out) => out,
            Err(Error::Aborted { code, text }) => {
                // Abort received from the coordinator: stop without replying.
                self.fail(code, text);
                Vec::new()
            }
            Err(e) => {
                let code = AbortCode::for_error(&e);
                let text = e.to_string();
                self.fail(code, text.clone());
                vec![Message::Abort { code, text }]
            }
        }
    }

    fn try_handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        match (self.phase, msg) {
            (_, Message::Abort { code, text }) => Err(Error::Aborted { code, text }),
            (WorkerPhase::AwaitInit, Message::Init(init)) => {
                if init.dims.input_dim != self.data.feature_dim {
                    return Err(Error::Shape(format!(
                        "model input_dim {} but local data has {} features",
                        init.dims.input_dim, self.data.feature_dim
                    )));
                }
                if self.data.num_classes > init.dims.output_dim {
                    return Err(Error::Shape(format!(
                        "local data has {} classes, model only {}",
                        self.data.num_classes, init.dims.output_dim
                    )));
                }
                self.net = Some(init.build_network()?);
                self.lr = init.lr;
                self.total_steps = init.total_steps;
                if self.total_steps == 0 {
                    self.phase = WorkerPhase::AwaitDone;
                    return Ok(Vec::new());
                }
                self.compute_release()
            }
            (WorkerPhase::AwaitAvg, Message::Avg { step_id, gradient }) => {
                if step_id != self.step {
                    return Err(Error::Protocol(format!("AVG for step {step_id} during step {}", self.step)));
                }
                let net = self.net.as_mut().expect("network set at INIT");
                net.apply_update(&gradient, self.lr)?;
                self.hashes.push(net.param_hash());
                self.step += 1;
                if self.step < self.total_steps {
                    self.compute_release()
                } else {
                    self.phase = WorkerPhase::AwaitDone;
                    Ok(Vec::new())
                }
            }
            (WorkerPhase::AwaitDone, Message::Done { step_id }) => {
                if step_id != self.step {
                    return Err(Error::Protocol(format!("DONE at step {step_id}, worker at {}", self.step)));
                }
                self.phase = WorkerPhase::Stopped;
                self.status = SessionStatus::Completed;
                Ok(Vec::new())
            }
            (phase, other) => Err(Error::Protocol(format!("unexpected {} while {phase:?}", other.kind().name()))),
        }
    }

    fn compute_release(&mut self) -> Result<Vec<Message>> {
        let net = self.net.as_ref().expect("network set at INIT");
        let idx = self.sampler.next_batch();
        let batch: Vec<&FeatureSequence> = idx.iter().map(|&i| &self.data.sequences[i]).collect();
        let release = train_step(net, &batch, &self.dp, &mut self.ledger, &mut self.noise, self.step)?;
        self.phase = WorkerPhase::AwaitAvg;
        Ok(vec![Message::Grad(release)])
    }

    pub fn outcome(self) -> WorkerOutcome {
        WorkerOutcome {
            worker_id: self.id,
            network: self.net,
            ledger: self.ledger,
            steps_completed: self.step,
            round_hashes: self.hashes,
            status: self.status,
        }
    }
}
