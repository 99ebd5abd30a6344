//! Pull-based worker pool. Workers ask for a genome, evaluate it and send
//! the record back; the master side is a single loop consuming one channel.
//!
//! The socket transport speaks length-prefixed frames over TCP: a `u32`
//! big-endian byte count followed by that many bytes of UTF-8 text.
//!
//! ```text
//! HELLO 3
//! REQUEST
//! WORK id=00000000000000ff parents=- lr=0.01 momentum=0.9 batch_size=32 features=1 f0=conv:8:3:1:relu head=0
//! RESULT 0.01234 {"genome_id":"00000000000000ff","status":"ok",...}
//! SHUTDOWN
//! ```
//!
//! `RESULT` carries the worker's own monotonic evaluation time in seconds
//! before the JSON record.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::evaluator::{EvalRecord, Evaluator};
use crate::evolution::MasterState;
use crate::genome::{Genome, GenomeId};

/// Largest frame accepted from the wire.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("pool configuration: {0}")]
    Config(String),
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("coordinator: {0}")]
    Coordinator(String),
    #[error("all workers are gone with {0} genomes outstanding")]
    NoWorkers(usize),
}

/// Source of work and sink of results for the pool.
pub trait Coordinator {
    /// A genome for `worker_id`, or `None` once nothing more will be issued.
    fn next_work(&mut self, worker_id: usize) -> Option<Genome>;
    /// Accepts the single outcome of an issued genome.
    fn accept(&mut self, record: EvalRecord) -> Result<(), String>;
    /// An issued genome was handed to another worker.
    fn reassign(&mut self, _id: GenomeId, _worker_id: usize) {}
}

impl Coordinator for MasterState {
    fn next_work(&mut self, worker_id: usize) -> Option<Genome> {
        if self.can_issue() {
            self.next_candidate(worker_id).ok()
        } else {
            None
        }
    }

    fn accept(&mut self, record: EvalRecord) -> Result<(), String> {
        use crate::evolution::EvolutionError;
        match self.receive_result(record) {
            Ok(_) | Err(EvolutionError::Protocol(_)) => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn reassign(&mut self, id: GenomeId, worker_id: usize) {
        let _ = MasterState::reassign(self, id, worker_id);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello(usize),
    RequestWork,
    Work(Genome),
    Result { busy_s: f64, record: EvalRecord },
    Shutdown,
}

impl WireMessage {
    pub fn encode(&self) -> String {
        match self {
            WireMessage::Hello(w) => format!("HELLO {w}"),
            WireMessage::RequestWork => "REQUEST".into(),
            WireMessage::Work(g) => format!("WORK {g}"),
            WireMessage::Result { busy_s, record } => format!(
                "RESULT {busy_s:?} {}",
                serde_json::to_string(record).expect("records always serialize")
            ),
            WireMessage::Shutdown => "SHUTDOWN".into(),
        }
    }

    pub fn decode(text: &str) -> Result<Self, PoolError> {
        let bad = |m: String| PoolError::Protocol(m);
        let (verb, rest) = text.split_once(' ').unwrap_or((text, ""));
        match verb {
            "HELLO" => rest
                .parse()
                .map(WireMessage::Hello)
                .map_err(|_| bad(format!("bad worker id in HELLO: '{rest}'"))),
            "REQUEST" if rest.is_empty() => Ok(WireMessage::RequestWork),
            "SHUTDOWN" if rest.is_empty() => Ok(WireMessage::Shutdown),
            "WORK" => rest.parse().map(WireMessage::Work).map_err(|e| bad(format!("{e}"))),
            "RESULT" => {
                let (busy, json) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad("RESULT needs a duration and a record".into()))?;
                let busy_s = busy
                    .parse::<f64>()
                    .ok()
                    .filter(|b| b.is_finite() && *b >= 0.0)
                    .ok_or_else(|| bad(format!("bad duration '{busy}'")))?;
                let record = serde_json::from_str(json).map_err(|e| bad(format!("bad record: {e}")))?;
                Ok(WireMessage::Result { busy_s, record })
            }
            _ => Err(bad(format!(
                "unknown message '{}'",
                text.chars().take(40).collect::<String>()
            ))),
        }
    }
}

pub fn write_frame<W: Write>(out: &mut W, payload: &str) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| (l as usize) <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    out.write_all(&len.to_be_bytes())?;
    out.write_all(payload.as_bytes())?;
    out.flush()
}

/// Next frame, or `None` on a clean end of stream between frames.
pub fn read_frame<R: Read>(input: &mut R) -> io::Result<Option<String>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds the {MAX_FRAME} byte limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Listens on `127.0.0.1:port` (0 picks a free port). With
    /// `spawn_local` the pool starts its workers as threads that connect
    /// over the socket; otherwise it waits for external workers.
    Socket {
        port: u16,
        spawn_local: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Worker calls inlined on the calling thread.
    Sync,
    /// Results are processed in issue order, each finishing worker getting
    /// the next genome; reproduces `Sync` exactly.
    Ordered,
    /// Results are processed as they arrive.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolOptions {
    pub workers: usize,
    pub transport: Transport,
    pub schedule: Schedule,
    /// Time after which an unanswered genome is reissued once; a second
    /// expiry records it as timed out. `None` waits forever.
    pub eval_timeout: Option<Duration>,
    /// How long to wait for socket workers to connect.
    pub connect_timeout: Duration,
}

impl PoolOptions {
    pub fn new(workers: usize) -> Self {
        Self {
            workers,
            transport: Transport::InProcess,
            schedule: Schedule::Free,
            eval_timeout: None,
            connect_timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if self.workers == 0 {
            return Err(PoolError::Config("workers must be at least 1".into()));
        }
        if self.schedule != Schedule::Free && self.eval_timeout.is_some() {
            return Err(PoolError::Config("eval timeouts need the free schedule".into()));
        }
        if self.schedule == Schedule::Sync && self.transport != Transport::InProcess {
            return Err(PoolError::Config("the sync schedule runs in process only".into()));
        }
        if self.eval_timeout.is_some_and(|t| t.is_zero()) {
            return Err(PoolError::Config("eval timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerStats {
    pub worker_id: usize,
    pub evaluations_done: usize,
    pub busy_time_s: f64,
    /// Pool wall time not spent evaluating.
    pub idle_time_s: f64,
    pub durations_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdleFraction {
    pub per_worker: Vec<f64>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolReport {
    pub wall_time_s: f64,
    pub workers: Vec<WorkerStats>,
    /// Outcomes handed to the coordinator.
    pub outcomes: usize,
    pub reissues: usize,
    pub timeouts: usize,
    pub duplicates_dropped: usize,
}

impl PoolReport {
    pub fn idle_fraction(&self) -> IdleFraction {
        let frac = |w: &WorkerStats| {
            let total = w.busy_time_s + w.idle_time_s;
            if total > 0.0 {
                w.idle_time_s / total
            } else {
                0.0
            }
        };
        let busy: f64 = self.workers.iter().map(|w| w.busy_time_s).sum();
        let idle: f64 = self.workers.iter().map(|w| w.idle_time_s).sum();
        IdleFraction {
            per_worker: self.workers.iter().map(frac).collect(),
            aggregate: if busy + idle > 0.0 { idle / (busy + idle) } else { 0.0 },
        }
    }

    pub fn evaluations(&self) -> usize {
        self.workers.iter().map(|w| w.evaluations_done).sum()
    }
}

enum ToMaster {
    Hello {
        worker: usize,
        reply: Sender<ToWorker>,
    },
    Request {
        worker: usize,
    },
    Result {
        worker: usize,
        busy: Duration,
        record: EvalRecord,
    },
    Gone {
        worker: usize,
    },
}

enum ToWorker {
    Work(Genome),
    Shutdown,
}

/// Runs the coordinator's work to completion on `options.workers` workers.
pub fn run_pool<C: Coordinator>(
    coordinator: &mut C,
    evaluator: Arc<dyn Evaluator>,
    options: &PoolOptions,
) -> Result<PoolReport, PoolError> {
    options.validate()?;
    match (&options.schedule, &options.transport) {
        (Schedule::Sync, _) => run_inline(coordinator, evaluator.as_ref(), options.workers),
        (_, Transport::InProcess) => {
            let (to_master, inbox) = unbounded();
            let mut handles = Vec::new();
            for w in 0..options.workers {
                let (reply, rx) = unbounded();
                to_master
                    .send(ToMaster::Hello { worker: w, reply })
                    .expect("inbox alive");
                let tx = to_master.clone();
                let ev = Arc::clone(&evaluator);
                handles.push(
                    thread::Builder::new()
                        .name(format!("worker-{w}"))
                        .spawn(move || channel_worker(w, ev.as_ref(), &tx, &rx))?,
                );
            }
            drop(to_master);
            let report = master_loop(coordinator, &inbox, options);
            for h in handles {
                let _ = h.join();
            }
            report
        }
        (_, Transport::Socket { port, spawn_local }) => {
            let addr = format!("127.0.0.1:{port}");
            let listener = TcpListener::bind(&addr).map_err(|source| PoolError::Bind { addr, source })?;
            let local = listener.local_addr()?;
            let (to_master, inbox) = unbounded();
            let acceptor = {
                let tx = to_master.clone();
                let n = options.workers;
                thread::spawn(move || accept_workers(&listener, n, &tx))
            };
            drop(to_master);
            let mut handles = Vec::new();
            if *spawn_local {
                for w in 0..options.workers {
                    let ev = Arc::clone(&evaluator);
                    handles.push(thread::spawn(move || run_socket_worker(local, w, ev.as_ref())));
                }
            }
            let report = master_loop(coordinator, &inbox, options);
            let _ = acceptor.join();
            for h in handles {
                let _ = h.join();
            }
            report
        }
    }
}

/// Listening address for external workers when the pool uses a fixed port.
pub fn socket_addr(port: u16) -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], port))
}

fn channel_worker(id: usize, evaluator: &dyn Evaluator, tx: &Sender<ToMaster>, rx: &Receiver<ToWorker>) {
    loop {
        if tx.send(ToMaster::Request { worker: id }).is_err() {
            return;
        }
        match rx.recv() {
            Ok(ToWorker::Work(genome)) => {
                let t = Instant::now();
                let record = evaluator.evaluate(&genome, id);
                let busy = t.elapsed();
                if tx
                    .send(ToMaster::Result {
                        worker: id,
                        busy,
                        record,
                    })
                    .is_err()
                {
                    return;
                }
            }
            Ok(ToWorker::Shutdown) | Err(_) => return,
        }
    }
}

fn accept_workers(listener: &TcpListener, n: usize, tx: &Sender<ToMaster>) {
    for _ in 0..n {
        let Ok((stream, _)) = listener.accept() else {
            return;
        };
        let tx = tx.clone();
        thread::spawn(move || serve_connection(stream, &tx));
    }
}

fn serve_connection(stream: TcpStream, tx: &Sender<ToMaster>) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let worker = match read_frame(&mut reader).ok().flatten().map(|f| WireMessage::decode(&f)) {
        Some(Ok(WireMessage::Hello(w))) => w,
        _ => return,
    };
    let (reply, rx) = unbounded::<ToWorker>();
    thread::spawn(move || {
        let mut out = BufWriter::new(write_half);
        for msg in rx {
            let (text, last) = match msg {
                ToWorker::Work(g) => (WireMessage::Work(g).encode(), false),
                ToWorker::Shutdown => (WireMessage::Shutdown.encode(), true),
            };
            if write_frame(&mut out, &text).is_err() || last {
                return;
            }
        }
    });
    if tx.send(ToMaster::Hello { worker, reply }).is_err() {
        return;
    }
    while let Ok(Some(frame)) = read_frame(&mut reader) {
        let forwarded = match WireMessage::decode(&frame) {
            Ok(WireMessage::RequestWork) => ToMaster::Request { worker },
            Ok(WireMessage::Result { busy_s, record }) => ToMaster::Result {
                worker,
                busy: Duration::from_secs_f64(busy_s),
                record,
            },
            _ => break,
        };
        if tx.send(forwarded).is_err() {
            return;
        }
    }
    let _ = tx.send(ToMaster::Gone { worker });
}

/// Worker side of the socket transport: connects, announces itself and
/// serves genomes until told to shut down. Returns the number evaluated.
pub fn run_socket_worker(addr: SocketAddr, worker_id: usize, evaluator: &dyn Evaluator) -> Result<usize, PoolError> {
    let stream = connect_with_retry(addr, Duration::from_secs(10))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    write_frame(&mut writer, &WireMessage::Hello(worker_id).encode())?;
    let mut done = 0;
    loop {
        write_frame(&mut writer, &WireMessage::RequestWork.encode())?;
        let frame =
            read_frame(&mut reader)?.ok_or_else(|| PoolError::Protocol("master closed the connection".into()))?;
        match WireMessage::decode(&frame)? {
            WireMessage::Work(genome) => {
                let t = Instant::now();
                let record = evaluator.evaluate(&genome, worker_id);
                let busy_s = t.elapsed().as_secs_f64();
                write_frame(&mut writer, &WireMessage::Result { busy_s, record }.encode())?;
                done += 1;
            }
            WireMessage::Shutdown => return Ok(done),
            other => {
                return Err(PoolError::Protocol(format!(
                    "worker got unexpected {}",
                    other.encode().split(' ').next().unwrap_or("")
                )))
            }
        }
    }
}

fn connect_with_retry(addr: SocketAddr, patience: Duration) -> Result<TcpStream, PoolError> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() >= patience => return Err(e.into()),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

struct Flight {
    genome: Genome,
    worker: usize,
    attempt: u8,
    deadline: Option<Instant>,
    /// Waiting in the reissue queue.
    queued: bool,
    seq: usize,
}

struct Tally {
    start: Instant,
    busy: BTreeMap<usize, Vec<f64>>,
}

impl Tally {
    fn new(workers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            start: Instant::now(),
            busy: workers.into_iter().map(|w| (w, Vec::new())).collect(),
        }
    }

    fn record(&mut self, worker: usize, busy: Duration) {
        self.busy.entry(worker).or_default().push(busy.as_secs_f64());
    }

    fn finish(self, outcomes: usize, reissues: usize, timeouts: usize, duplicates_dropped: usize) -> PoolReport {
        let wall = self.start.elapsed().as_secs_f64();
        let workers = self
            .busy
            .into_iter()
            .map(|(worker_id, durations_s)| {
                let busy: f64 = durations_s.iter().sum();
                WorkerStats {
                    worker_id,
                    evaluations_done: durations_s.len(),
                    busy_time_s: busy,
                    idle_time_s: (wall - busy).max(0.0),
                    durations_s,
                }
            })
            .collect();
        PoolReport {
            wall_time_s: wall,
            workers,
            outcomes,
            reissues,
            timeouts,
            duplicates_dropped,
        }
    }
}

/// Sequential pool: workers `0..workers` each get one genome in id order;
/// results are then taken back in issue order and each finishing worker is
/// immediately given its next genome.
pub fn run_inline<C: Coordinator + ?Sized>(
    coordinator: &mut C,
    evaluator: &dyn Evaluator,
    workers: usize,
) -> Result<PoolReport, PoolError> {
    let mut tally = Tally::new(0..workers.max(1));
    let mut queue = VecDeque::new();
    for w in 0..workers.max(1) {
        match coordinator.next_work(w) {
            Some(g) => queue.push_back((w, g)),
            None => break,
        }
    }
    let mut outcomes = 0;
    while let Some((w, genome)) = queue.pop_front() {
        let t = Instant::now();
        let record = evaluator.evaluate(&genome, w);
        tally.record(w, t.elapsed());
        coordinator.accept(record).map_err(PoolError::Coordinator)?;
        outcomes += 1;
        if let Some(g) = coordinator.next_work(w) {
            queue.push_back((w, g));
        }
    }
    Ok(tally.finish(outcomes, 0, 0, 0))
}

fn master_loop<C: Coordinator + ?Sized>(
    coordinator: &mut C,
    inbox: &Receiver<ToMaster>,
    options: &PoolOptions,
) -> Result<PoolReport, PoolError> {
    // every worker announces itself first
    let mut replies: BTreeMap<usize, Sender<ToWorker>> = BTreeMap::new();
    let mut early = Vec::new();
    let connect_deadline = Instant::now() + options.connect_timeout;
    while replies.len() < options.workers {
        match inbox.recv_deadline(connect_deadline) {
            Ok(ToMaster::Hello { worker, reply }) => {
                if replies.insert(worker, reply).is_some() {
                    return Err(PoolError::Protocol(format!("two workers announced id {worker}")));
                }
            }
            Ok(other) => early.push(other),
            Err(_) => {
                return Err(PoolError::Protocol(format!(
                    "only {} of {} workers connected",
                    replies.len(),
                    options.workers
                )))
            }
        }
    }
    let mut m = Master {
        coordinator,
        replies,
        tally: None,
        in_flight: HashMap::new(),
        resolved: HashSet::new(),
        idle: VecDeque::new(),
        reissue: VecDeque::new(),
        exhausted: false,
        next_seq: 0,
        outcomes: 0,
        reissues: 0,
        timeouts: 0,
        duplicates: 0,
        timeout: options.eval_timeout,
    };
    m.tally = Some(Tally::new(m.replies.keys().copied()));
    let result = match options.schedule {
        Schedule::Free => m.free(inbox, early),
        _ => m.ordered(inbox),
    };
    for tx in m.replies.values() {
        let _ = tx.send(ToWorker::Shutdown);
    }
    result?;
    let tally = m.tally.take().expect("tally set");
    Ok(tally.finish(m.outcomes, m.reissues, m.timeouts, m.duplicates))
}

struct Master<'a, C: ?Sized> {
    coordinator: &'a mut C,
    replies: BTreeMap<usize, Sender<ToWorker>>,
    tally: Option<Tally>,
    in_flight: HashMap<GenomeId, Flight>,
    resolved: HashSet<GenomeId>,
    idle: VecDeque<usize>,
    reissue: VecDeque<GenomeId>,
    exhausted: bool,
    next_seq: usize,
    outcomes: usize,
    reissues: usize,
    timeouts: usize,
    duplicates: usize,
    timeout: Option<Duration>,
}

impl<C: Coordinator + ?Sized> Master<'_, C> {
    fn send(&mut self, worker: usize, genome: Genome) -> bool {
        match self.replies.get(&worker) {
            Some(tx) => tx.send(ToWorker::Work(genome)).is_ok(),
            None => false,
        }
    }

    fn issue_new(&mut self, worker: usize) -> Option<GenomeId> {
        if self.exhausted {
            return None;
        }
        let Some(genome) = self.coordinator.next_work(worker) else {
            self.exhausted = true;
            return None;
        };
        let id = genome.id;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.in_flight.insert(
            genome.id,
            Flight {
                genome: genome.clone(),
                worker,
                attempt: 1,
                deadline: self.timeout.map(|t| Instant::now() + t),
                queued: false,
                seq,
            },
        );
        self.send(worker, genome);
        Some(id)
    }

    fn deliver(&mut self, record: EvalRecord) -> Result<(), PoolError> {
        self.in_flight.remove(&record.genome_id);
        self.resolved.insert(record.genome_id);
        self.outcomes += 1;
        self.coordinator.accept(record).map_err(PoolError::Coordinator)
    }

    fn dispatch(&mut self) {
        while let Some(&worker) = self.idle.front() {
            if let Some(id) = self.reissue.pop_front() {
                let timeout = self.timeout;
                let Some(flight) = self.in_flight.get_mut(&id) else {
                    continue;
                };
                flight.worker = worker;
                flight.attempt = 2;
                flight.queued = false;
                flight.deadline = timeout.map(|t| Instant::now() + t);
                let genome = flight.genome.clone();
                self.coordinator.reassign(id, worker);
                self.idle.pop_front();
                self.reissues += 1;
                self.send(worker, genome);
                continue;
            }
            if self.issue_new(worker).is_none() {
                break;
            }
            self.idle.pop_front();
        }
    }

    /// Unanswered genomes past their deadline: first expiry queues a
    /// reissue, second records a timeout.
    fn expire(&mut self, now: Instant) -> Result<(), PoolError> {
        let mut expired: Vec<(usize, GenomeId)> = self
            .in_flight
            .iter()
            .filter(|(_, f)| !f.queued && f.deadline.is_some_and(|d| d <= now))
            .map(|(id, f)| (f.seq, *id))
            .collect();
        expired.sort_unstable();
        for (_, id) in expired {
            let flight = self.in_flight.get_mut(&id).expect("listed above");
            if flight.attempt == 1 {
                flight.queued = true;
                self.reissue.push_back(id);
            } else {
                let (worker, timeout) = (flight.worker, self.timeout.unwrap_or_default());
                self.timeouts += 1;
                self.deliver(EvalRecord::timed_out(id, worker, timeout * 2))?;
            }
        }
        Ok(())
    }

    fn worker_gone(&mut self, worker: usize) -> Result<(), PoolError> {
        self.replies.remove(&worker);
        self.idle.retain(|&w| w != worker);
        let mut held: Vec<(usize, GenomeId)> = self
            .in_flight
            .iter()
            .filter(|(_, f)| f.worker == worker && !f.queued)
            .map(|(id, f)| (f.seq, *id))
            .collect();
        held.sort_unstable();
        for (_, id) in held {
            let flight = self.in_flight.get_mut(&id).expect("listed above");
            if flight.attempt == 1 {
                flight.queued = true;
                self.reissue.push_back(id);
            } else {
                self.timeouts += 1;
                self.deliver(EvalRecord::failed(id, worker, "worker disconnected".into()))?;
            }
        }
        Ok(())
    }

    fn free(&mut self, inbox: &Receiver<ToMaster>, early: Vec<ToMaster>) -> Result<(), PoolError> {
        for msg in early {
            self.handle(msg)?;
        }
        loop {
            self.dispatch();
            if self.exhausted && self.in_flight.is_empty() {
                return Ok(());
            }
            if self.replies.is_empty() {
                return Err(PoolError::NoWorkers(self.in_flight.len()));
            }
            let deadline = self.in_flight.values().filter_map(|f| f.deadline).min();
            let msg = match deadline {
                Some(d) => match inbox.recv_deadline(d) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return Err(PoolError::NoWorkers(self.in_flight.len())),
                },
                None => Some(inbox.recv().map_err(|_| PoolError::NoWorkers(self.in_flight.len()))?),
            };
            if let Some(msg) = msg {
                self.handle(msg)?;
            }
            if self.timeout.is_some() {
                self.expire(Instant::now())?;
            }
        }
    }

    fn handle(&mut self, msg: ToMaster) -> Result<(), PoolError> {
        match msg {
            ToMaster::Hello { worker, .. } => {
                return Err(PoolError::Protocol(format!("late HELLO from worker {worker}")));
            }
            ToMaster::Request { worker } => {
                if self.replies.contains_key(&worker) && !self.idle.contains(&worker) {
                    self.idle.push_back(worker);
                }
            }
            ToMaster::Result { worker, busy, record } => {
                if let Some(t) = self.tally.as_mut() {
                    t.record(worker, busy);
                }
                if self.resolved.contains(&record.genome_id) || !self.in_flight.contains_key(&record.genome_id) {
                    self.duplicates += 1;
                } else {
                    self.deliver(record)?;
                }
            }
            ToMaster::Gone { worker } => self.worker_gone(worker)?,
        }
        Ok(())
    }

    fn ordered(&mut self, inbox: &Receiver<ToMaster>) -> Result<(), PoolError> {
        let workers: Vec<usize> = self.replies.keys().copied().collect();
        let mut order: VecDeque<GenomeId> = VecDeque::new();
        for w in workers {
            order.extend(self.issue_new(w));
        }
        let mut parked: HashMap<GenomeId, (usize, Duration, EvalRecord)> = HashMap::new();
        while let Some(&head) = order.front() {
            if let Some((worker, busy, record)) = parked.remove(&head) {
                order.pop_front();
                if let Some(t) = self.tally.as_mut() {
                    t.record(worker, busy);
                }
                self.deliver(record)?;
                order.extend(self.issue_new(worker));
                continue;
            }
            match inbox.recv() {
                Ok(ToMaster::Result { worker, busy, record }) => {
                    if self.in_flight.contains_key(&record.genome_id) {
                        parked.insert(record.genome_id, (worker, busy, record));
                    } else {
                        self.duplicates += 1;
                    }
                }
                Ok(ToMaster::Request { .. }) => {}
                Ok(ToMaster::Gone { worker }) => {
                    if self.in_flight.values().any(|f| f.worker == worker) {
                        return Err(PoolError::Protocol(format!(
                            "worker {worker} left with work outstanding under the ordered schedule"
                        )));
                    }
                    self.replies.remove(&worker);
                }
                Ok(ToMaster::Hello { worker, .. }) => {
                    return Err(PoolError::Protocol(format!("late HELLO from worker {worker}")))
                }
                Err(_) => return Err(PoolError::NoWorkers(order.len())),
            }
        }
        Ok(())
    }
}
