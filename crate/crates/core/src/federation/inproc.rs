//! Deterministic single-threaded session: the coordinator and worker state
//! machines exchange encoded frames over one FIFO queue.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};

use super::codec::{decode, encode};
use super::{CoordinatorMachine, CoordinatorSummary, Direction, InitPayload, Transcript, WorkerMachine, WorkerOutcome, WorkerSetup};

#[derive(Debug)]
pub struct InprocOutcome {
    pub coordinator: CoordinatorSummary,
    /// In ascending worker id.
    pub workers: Vec<WorkerOutcome>,
    pub transcript: Transcript,
}

struct Envelope {
    direction: Direction,
    worker_id: u32,
    frame: Vec<u8>,
}

/// Runs a full session in-process. Every message is encoded, logged and
/// decoded again on delivery, exactly as the TCP transport would.
pub fn inproc_session(init: InitPayload, setups: Vec<WorkerSetup>) -> Result<InprocOutcome> {
    let mut coordinator = CoordinatorMachine::new(setups.len(), init)?;
    let mut workers: BTreeMap<u32, WorkerMachine> = BTreeMap::new();
    let mut order = Vec::with_capacity(setups.len());
    for setup in setups {
        let id = setup.worker_id;
        order.push(id);
        if workers.insert(id, WorkerMachine::new(setup)?).is_some() {
            return Err(Error::Config(format!("duplicate worker id {id}")));
        }
    }
    let mut transcript = Transcript::default();
    let mut queue: VecDeque<Envelope> = VecDeque::new();
    let post = |queue: &mut VecDeque<Envelope>, transcript: &mut Transcript, direction, worker_id, msg| -> Result<()> {
        let frame = encode(&msg)?;
        transcript.record(direction, worker_id, &msg, frame.len());
        queue.push_back(Envelope { direction, worker_id, frame });
        Ok(())
    };

    for id in &order {
        let hello = workers[id].hello();
        post(&mut queue, &mut transcript, Direction::ToCoordinator, *id, hello)?;
    }
    while let Some(env) = queue.pop_front() {
        let msg = decode(&env.frame)?;
        match env.direction {
            Direction::ToCoordinator => {
                for (to, reply) in coordinator.handle(env.worker_id, msg) {
                    post(&mut queue, &mut transcript, Direction::ToWorker, to, reply)?;
                }
            }
            Direction::ToWorker => {
                let worker = workers.get_mut(&env.worker_id).expect("addressed worker exists");
                for reply in worker.handle(msg) {
                    post(&mut queue, &mut transcript, Direction::ToCoordinator, env.worker_id, reply)?;
                }
            }
        }
    }
    Ok(InprocOutcome {
        coordinator: coordinator.summary(),
        workers: workers.into_values().map(WorkerMachine::outcome).collect(),
        transcript,
    })
}
