//! Socket transport: one ordered TCP stream per worker, carrying the frames
//! of [`super::codec`]. No TLS.

use std::collections::HashMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

use super::codec::{encode, read_message, Message};
use super::{AbortCode, CoordinatorMachine, CoordinatorSummary, Direction, SessionConfig, Transcript, WorkerMachine, WorkerOutcome, WorkerSetup};

enum Event {
    Connected(usize, TcpStream),
    Frame(usize, Message, usize),
    Failed(usize, Error),
    Closed(usize),
    AcceptFailed(Error),
}

/// A coordinator whose listening socket is already bound.
pub struct BoundCoordinator {
    listener: TcpListener,
    cfg: SessionConfig,
}

impl BoundCoordinator {
    pub fn bind(cfg: SessionConfig) -> Result<Self> {
        let listener = TcpListener::bind(&cfg.address)?;
        Ok(Self { listener, cfg })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves one session to completion or abort.
    pub fn run(self) -> Result<(CoordinatorSummary, Transcript)> {
        let BoundCoordinator { listener, cfg } = self;
        let mut machine = CoordinatorMachine::new(cfg.n_workers, cfg.init.clone())?;
        let mut transcript = Transcript::default();
        let (tx, rx) = mpsc::channel::<Event>();

        let n = cfg.n_workers;
        let accept_tx = tx.clone();
        thread::spawn(move || {
            for conn in 0..n {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nodelay(true);
                        let reader = match stream.try_clone() {
                            Ok(r) => r,
                            Err(e) => {
                                let _ = accept_tx.send(Event::AcceptFailed(e.into()));
                                return;
                            }
                        };
                        if accept_tx.send(Event::Connected(conn, stream)).is_err() {
                            return;
                        }
                        let tx = accept_tx.clone();
                        thread::spawn(move || read_loop(conn, reader, tx));
                    }
                    Err(e) => {
                        let _ = accept_tx.send(Event::AcceptFailed(e.into()));
                        return;
                    }
                }
            }
        });
        drop(tx);

        let mut streams: HashMap<usize, TcpStream> = HashMap::new();
        let mut conn_of: HashMap<u32, usize> = HashMap::new();
        let mut worker_of: HashMap<usize, u32> = HashMap::new();

        let send = |out: Vec<(u32, Message)>, streams: &mut HashMap<usize, TcpStream>, conn_of: &HashMap<u32, usize>, transcript: &mut Transcript| {
            for (w, msg) in out {
                let Some(stream) = conn_of.get(&w).and_then(|c| streams.get_mut(c)) else { continue };
                let frame = encode(&msg).expect("coordinator messages are encodable");
                transcript.record(Direction::ToWorker, w, &msg, frame.len());
                // A dead peer surfaces as a read failure on its own connection.
                let _ = stream.write_all(&frame);
            }
        };

        while !machine.is_done() {
            let event = match rx.recv_timeout(cfg.timeout) {
                Ok(ev) => ev,
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    let out = machine.abort(AbortCode::TimedOut, format!("no message within {:?}", cfg.timeout), None);
                    send(out, &mut streams, &conn_of, &mut transcript);
                    break;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    let out = machine.abort(AbortCode::TransportError, "all connections closed", None);
                    send(out, &mut streams, &conn_of, &mut transcript);
                    break;
                }
            };
            match event {
                Event::Connected(conn, stream) => {
                    streams.insert(conn, stream);
                }
                Event::Frame(conn, msg, payload_len) => {
                    let worker = match (&msg, worker_of.get(&conn)) {
                        (_, Some(&w)) => w,
                        (Message::Hello { worker_id, .. }, None) => {
                            if conn_of.contains_key(worker_id) {
                                let out = machine.abort(AbortCode::ProtocolError, format!("duplicate worker id {worker_id}"), None);
                                send(out, &mut streams, &conn_of, &mut transcript);
                                break;
                            }
                            conn_of.insert(*worker_id, conn);
                            worker_of.insert(conn, *worker_id);
                            *worker_id
                        }
                        (other, None) => {
                            let text = format!("{} before HELLO", other.kind().name());
                            let out = machine.abort(AbortCode::ProtocolError, text, None);
                            send(out, &mut streams, &conn_of, &mut transcript);
                            break;
                        }
                    };
                    transcript.record(Direction::ToCoordinator, worker, &msg, payload_len + super::codec::HEADER_LEN);
                    let out = machine.handle(worker, msg);
                    send(out, &mut streams, &conn_of, &mut transcript);
                }
                Event::Failed(conn, e) => {
                    let who = worker_of.get(&conn).map_or_else(|| format!("connection {conn}"), |w| format!("worker {w}"));
                    let out = machine.abort(AbortCode::for_error(&e), format!("{who}: {e}"), worker_of.get(&conn).copied());
                    send(out, &mut streams, &conn_of, &mut transcript);
                }
                Event::Closed(conn) => {
                    let who = worker_of.get(&conn).map_or_else(|| format!("connection {conn}"), |w| format!("worker {w}"));
                    let out = machine.abort(AbortCode::TransportError, format!("{who} disconnected"), worker_of.get(&conn).copied());
                    send(out, &mut streams, &conn_of, &mut transcript);
                }
                Event::AcceptFailed(e) => {
                    let out = machine.abort(AbortCode::TransportError, format!("accept failed: {e}"), None);
                    send(out, &mut streams, &conn_of, &mut transcript);
                }
            }
        }
        for s in streams.values() {
            let _ = s.shutdown(std::net::Shutdown::Write);
        }
        Ok((machine.summary(), transcript))
    }
}

fn read_loop(conn: usize, mut stream: TcpStream, tx: mpsc::Sender<Event>) {
    loop {
        let ev = match read_message(&mut stream) {
            Ok(Some((msg, len))) => Event::Frame(conn, msg, len),
            Ok(None) => Event::Closed(conn),
            Err(e) => Event::Failed(conn, e),
        };
        let stop = !matches!(ev, Event::Frame(..));
        if tx.send(ev).is_err() || stop {
            return;
        }
    }
}

/// Binds and serves one session.
pub fn coordinator_run(cfg: SessionConfig) -> Result<(CoordinatorSummary, Transcript)> {
    BoundCoordinator::bind(cfg)?.run()
}

fn connect_with_retry(address: &str, patience: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + patience;
    loop {
        let attempt = address
            .to_socket_addrs()
            .map_err(Error::Io)
            .and_then(|mut addrs| addrs.next().ok_or_else(|| Error::Config(format!("cannot resolve {address}"))))
            .and_then(|addr| TcpStream::connect_timeout(&addr, Duration::from_secs(1)).map_err(Error::Io));
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

/// Connects to a coordinator and participates until DONE or ABORT.
///
/// Transport failures end the session locally; the returned outcome keeps
/// the ledger and replica as they were when the failure happened.
pub fn worker_run(address: &str, timeout: Duration, setup: WorkerSetup) -> Result<WorkerOutcome> {
    let mut machine = WorkerMachine::new(setup)?;
    let mut stream = match connect_with_retry(address, timeout) {
        Ok(s) => s,
        Err(e) => {
            machine.fail(AbortCode::TransportError, format!("connect to {address}: {e}"));
            return Ok(machine.outcome());
        }
    };
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    let send = |stream: &mut TcpStream, msg: &Message| -> Result<()> {
        stream.write_all(&encode(msg)?)?;
        Ok(())
    };
    if let Err(e) = send(&mut stream, &machine.hello()) {
        machine.fail(AbortCode::TransportError, e.to_string());
        return Ok(machine.outcome());
    }
    while !machine.is_done() {
        let msg = match read_message(&mut stream) {
            Ok(Some((msg, _))) => msg,
            Ok(None) => {
                machine.fail(AbortCode::TransportError, "coordinator closed the connection");
                break;
            }
            Err(Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                machine.fail(AbortCode::TimedOut, format!("no message within {timeout:?}"));
                break;
            }
            Err(e) => {
                machine.fail(AbortCode::for_error(&e), e.to_string());
                break;
            }
        };
        for reply in machine.handle(msg) {
            if let Err(e) = send(&mut stream, &reply) {
                if !machine.is_done() {
                    machine.fail(AbortCode::TransportError, e.to_string());
                }
            }
        }
    }
    let _ = stream.shutdown(std::net::Shutdown::Write);
    Ok(machine.outcome())
}

