//! Deterministic discrete-event simulator.
//!
//! Every tick runs three phases: due control messages are delivered in send
//! order, managers check their timeouts, then each runnable process performs
//! at most one action in ascending rank order. Ticks where nothing can happen
//! are skipped.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::detector::{
    ControlBody, ControlMessage, Endpoint, Manager, ManagerConfig, ManagerInput, ProcessCall,
};
use crate::event_graph::{
    Edge, ErrorReason, Event, EventGraph, EventId, EventKind, Partner, ProcessRank, RelationKind,
    SendMode, SourceLoc, Status, Tag,
};
use crate::scenario::{Scenario, Statement, StatementKind};

pub const DEFAULT_TIMEOUT_TICKS: u64 = 1000;
pub const DEFAULT_EAGER_THRESHOLD: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub timeout_ticks: u64,
    /// Kept for reproducibility records; the schedule is fully ordered by
    /// rank and sequence number.
    pub seed: u64,
    /// Per-manager event capacity; `None` is unlimited.
    pub buffer_capacity_events: Option<usize>,
    /// Standard-mode sends up to this length are buffered.
    pub eager_threshold: u64,
    /// Crashes leave no trace in the event graph.
    pub silent_crash: bool,
    /// Turn off timeouts and error checks; used to compare against an
    /// unsupervised run.
    pub detection: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            timeout_ticks: DEFAULT_TIMEOUT_TICKS,
            seed: 0,
            buffer_capacity_events: None,
            eager_threshold: DEFAULT_EAGER_THRESHOLD,
            silent_crash: false,
            detection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub graph: EventGraph,
    pub terminated_abnormally: bool,
    /// Ranks with a recorded failure event.
    pub aborted_ranks: BTreeSet<ProcessRank>,
    /// Ranks that crashed without leaving a failure event.
    pub crash_outside_routines: BTreeSet<ProcessRank>,
    /// Ranks halted by an abort or by the global stop, with the line of the
    /// statement they were halted at.
    pub abort_sites: BTreeMap<ProcessRank, u32>,
    pub final_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollectiveError {
    #[error("not a collective statement")]
    NotCollective,
    #[error("collective has no participants")]
    NoParticipants,
    #[error("root {0} is not a participant")]
    RootOutside(ProcessRank),
}

fn subtree_size(vr: usize, n: usize) -> usize {
    if vr == 0 {
        n
    } else {
        (vr & vr.wrapping_neg()).min(n - vr)
    }
}

/// Binomial-tree expansion of a broadcast or gather into point-to-point
/// statements per participant, using ranks relative to the root. Gather
/// messages carry the data of the sender's whole subtree.
pub fn decompose_collective(
    kind: &StatementKind,
    participants: &BTreeSet<ProcessRank>,
    tag: i64,
) -> Result<BTreeMap<ProcessRank, Vec<Statement>>, CollectiveError> {
    let (root, len, gather) = match kind {
        StatementKind::Bcast { root, len } => (*root, *len, false),
        StatementKind::Gather { root, len } => (*root, *len, true),
        _ => return Err(CollectiveError::NotCollective),
    };
    if participants.is_empty() {
        return Err(CollectiveError::NoParticipants);
    }
    let order: Vec<ProcessRank> = participants.iter().copied().collect();
    let n = order.len();
    let root_idx = order
        .iter()
        .position(|&r| r == root)
        .ok_or(CollectiveError::RootOutside(root))?;
    let actual = |vr: usize| order[(vr + root_idx) % n];
    let routine = if gather { "gather" } else { "bcast" };
    let send = |to: ProcessRank, len: u64| Statement {
        kind: StatementKind::Send {
            dst: to,
            tag,
            len,
            mode: SendMode::Standard,
        },
        routine: routine.to_string(),
        line: 0,
    };
    let recv = |from: ProcessRank, len: u64| Statement {
        kind: StatementKind::Recv {
            src: Partner::Rank(from),
            tag: Tag::Value(tag),
            len,
        },
        routine: routine.to_string(),
        line: 0,
    };

    let mut out = BTreeMap::new();
    for vr in 0..n {
        let mut parent = None;
        let mut mask = 1;
        while mask < n {
            if vr & mask != 0 {
                parent = Some(vr - mask);
                break;
            }
            mask <<= 1;
        }
        let mut children = Vec::new();
        mask >>= 1;
        while mask > 0 {
            if vr + mask < n {
                children.push(vr + mask);
            }
            mask >>= 1;
        }
        let mut stmts = Vec::new();
        if gather {
            for &c in children.iter().rev() {
                stmts.push(recv(actual(c), len * subtree_size(c, n) as u64));
            }
            if let Some(p) = parent {
                stmts.push(send(actual(p), len * subtree_size(vr, n) as u64));
            }
        } else {
            if let Some(p) = parent {
                stmts.push(recv(actual(p), len));
            }
            for &c in &children {
                stmts.push(send(actual(c), len));
            }
        }
        out.insert(actual(vr), stmts);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    Send {
        dst: ProcessRank,
        tag: i64,
        len: u64,
        mode: SendMode,
    },
    Recv {
        src: Partner,
        tag: Tag,
        len: u64,
    },
    ISend {
        dst: ProcessRank,
        tag: i64,
        len: u64,
        handle: String,
    },
    IRecv {
        src: Partner,
        tag: Tag,
        len: u64,
        handle: String,
    },
    Wait {
        handle: String,
    },
    Compute {
        ticks: u64,
    },
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Step {
    op: Op,
    routine: String,
    line: u32,
    collective: Option<(String, ProcessRank)>,
}

fn expand(scenario: &Scenario, rank: ProcessRank) -> Vec<Step> {
    let n = scenario.process_count;
    let world: BTreeSet<ProcessRank> = (0..n).map(ProcessRank).collect();
    let mut steps = Vec::new();
    let mut collectives = 0i64;
    for st in &scenario.scripts[rank.index()] {
        let plain = |op| Step {
            op,
            routine: st.routine.clone(),
            line: st.line,
            collective: None,
        };
        match &st.kind {
            StatementKind::Send {
                dst,
                tag,
                len,
                mode,
            } => steps.push(plain(Op::Send {
                dst: *dst,
                tag: *tag,
                len: *len,
                mode: *mode,
            })),
            StatementKind::Recv { src, tag, len } => steps.push(plain(Op::Recv {
                src: *src,
                tag: *tag,
                len: *len,
            })),
            StatementKind::ISend {
                dst,
                tag,
                len,
                handle,
            } => steps.push(plain(Op::ISend {
                dst: *dst,
                tag: *tag,
                len: *len,
                handle: handle.clone(),
            })),
            StatementKind::IRecv {
                src,
                tag,
                len,
                handle,
            } => steps.push(plain(Op::IRecv {
                src: *src,
                tag: *tag,
                len: *len,
                handle: handle.clone(),
            })),
            StatementKind::Wait { handle } => steps.push(plain(Op::Wait {
                handle: handle.clone(),
            })),
            StatementKind::WaitAll { handles } => {
                for h in handles {
                    steps.push(plain(Op::Wait { handle: h.clone() }));
                }
            }
            StatementKind::Compute { ticks } => steps.push(plain(Op::Compute { ticks: *ticks })),
            StatementKind::Crash => steps.push(plain(Op::Crash)),
            StatementKind::Bcast { root, len } | StatementKind::Gather { root, len } => {
                let tag = -1 - collectives;
                collectives += 1;
                let bcast = matches!(st.kind, StatementKind::Bcast { .. });
                let pieces = match decompose_collective(&st.kind, &world, tag) {
                    Ok(mut per_rank) => per_rank.remove(&rank).unwrap_or_default(),
                    // An unknown root is treated as a plain partner that
                    // never answers.
                    Err(_) if bcast => vec![Statement {
                        kind: StatementKind::Recv {
                            src: Partner::Rank(*root),
                            tag: Tag::Value(tag),
                            len: *len,
                        },
                        routine: st.routine.clone(),
                        line: st.line,
                    }],
                    Err(_) => vec![Statement {
                        kind: StatementKind::Send {
                            dst: *root,
                            tag,
                            len: *len,
                            mode: SendMode::Standard,
                        },
                        routine: st.routine.clone(),
                        line: st.line,
                    }],
                };
                for piece in pieces {
                    let op = match piece.kind {
                        StatementKind::Send {
                            dst,
                            tag,
                            len,
                            mode,
                        } => Op::Send {
                            dst,
                            tag,
                            len,
                            mode,
                        },
                        StatementKind::Recv { src, tag, len } => Op::Recv { src, tag, len },
                        _ => unreachable!("collectives expand to sends and receives"),
                    };
                    steps.push(Step {
                        op,
                        routine: st.routine.clone(),
                        line: st.line,
                        collective: Some((st.routine.clone(), *root)),
                    });
                }
            }
        }
    }
    steps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProcState {
    /// Can act at the given tick or later.
    Ready(u64),
    Blocked(EventId),
    Done,
    Crashed,
    Halted,
}

#[derive(Debug, Clone)]
struct Proc {
    rank: ProcessRank,
    steps: Vec<Step>,
    pc: usize,
    seq: u32,
    state: ProcState,
    handles: BTreeMap<String, Event>,
    abort_pending: bool,
    halt_line: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Deliver,
    Timeouts,
    Processes(usize),
    Advance,
    Finished,
}

/// Simulator state, advanced with [`Simulator::step`].
#[derive(Debug, Clone)]
pub struct Simulator {
    file: String,
    process_count: u32,
    cfg: SimConfig,
    procs: Vec<Proc>,
    managers: Vec<Manager>,
    inbox: BTreeMap<(u64, u64), ControlMessage>,
    sent: u64,
    now: u64,
    phase: Phase,
    stop: bool,
    crash_outside: BTreeSet<ProcessRank>,
}

impl Simulator {
    pub fn new(scenario: &Scenario, cfg: SimConfig) -> Self {
        let n = scenario.process_count;
        let mcfg = ManagerConfig {
            process_count: n,
            timeout_ticks: cfg.timeout_ticks.max(1),
            capacity: cfg.buffer_capacity_events,
            detection: cfg.detection,
        };
        let procs = (0..n)
            .map(|r| Proc {
                rank: ProcessRank(r),
                steps: expand(scenario, ProcessRank(r)),
                pc: 0,
                seq: 0,
                state: ProcState::Ready(0),
                handles: BTreeMap::new(),
                abort_pending: false,
                halt_line: None,
            })
            .collect();
        Self {
            file: scenario.file.clone(),
            process_count: n,
            cfg,
            procs,
            managers: (0..n).map(|r| Manager::new(ProcessRank(r), mcfg)).collect(),
            inbox: BTreeMap::new(),
            sent: 0,
            now: 0,
            phase: Phase::Deliver,
            stop: false,
            crash_outside: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// True once an error has been detected and the run is winding down.
    pub fn is_stopping(&self) -> bool {
        self.stop
    }

    fn post(&mut self, msg: ControlMessage) {
        self.inbox.insert((self.now + 1, self.sent), msg);
        self.sent += 1;
    }

    /// Performs one unit of work: one message delivery, one timeout scan,
    /// one process action, or one clock advance. Returns false when done.
    pub fn step(&mut self) -> bool {
        match self.phase {
            Phase::Finished => return false,
            Phase::Deliver => {
                let due = self
                    .inbox
                    .first_key_value()
                    .is_some_and(|(&(t, _), _)| t <= self.now);
                if due {
                    let (_, msg) = self.inbox.pop_first().expect("due message");
                    self.deliver(msg);
                } else {
                    self.phase = Phase::Timeouts;
                }
            }
            Phase::Timeouts => {
                if !self.stop {
                    for r in 0..self.managers.len() {
                        let handled = self.managers[r]
                            .handle(ManagerInput::Tick, self.now)
                            .expect("tick input is always accepted");
                        self.stop |= handled.detected;
                        for m in handled.outgoing {
                            self.post(m);
                        }
                    }
                }
                self.phase = Phase::Processes(0);
            }
            Phase::Processes(from) => {
                let now = self.now;
                let next = (from..self.procs.len())
                    .find(|&r| matches!(self.procs[r].state, ProcState::Ready(at) if at <= now));
                match next {
                    Some(r) => {
                        self.act(r);
                        self.phase = Phase::Processes(r + 1);
                    }
                    None => self.phase = Phase::Advance,
                }
            }
            Phase::Advance => match self.next_tick() {
                Some(t) => {
                    self.now = t;
                    self.phase = Phase::Deliver;
                }
                None => {
                    self.phase = Phase::Finished;
                    return false;
                }
            },
        }
        true
    }

    fn next_tick(&self) -> Option<u64> {
        let floor = self.now + 1;
        let mut best = self.inbox.first_key_value().map(|(&(t, _), _)| t);
        let mut consider = |t: u64| {
            let t = t.max(floor);
            best = Some(best.map_or(t, |b| b.min(t)));
        };
        for p in &self.procs {
            if let ProcState::Ready(at) = p.state {
                consider(at);
            }
        }
        if !self.stop {
            for m in &self.managers {
                if let Some(d) = m.next_deadline() {
                    consider(d);
                }
            }
        }
        best.map(|b| b.max(floor))
    }

    fn deliver(&mut self, msg: ControlMessage) {
        match msg.to {
            Endpoint::Manager(q) => {
                let handled = self.managers[q.index()]
                    .handle(ManagerInput::Control(msg), self.now)
                    .expect("managers only receive well-formed traffic");
                self.stop |= handled.detected;
                for m in handled.outgoing {
                    self.post(m);
                }
            }
            Endpoint::Process(p) => {
                let now = self.now;
                let proc = &mut self.procs[p.index()];
                match msg.body {
                    ControlBody::AckP | ControlBody::AckR => {
                        if let ProcState::Blocked(id) = proc.state {
                            if Some(id) == msg.about {
                                proc.state = ProcState::Ready(now);
                            }
                        }
                    }
                    ControlBody::AbortP { .. } => match proc.state {
                        ProcState::Blocked(_) => {
                            proc.halt_line = Some(proc.steps[proc.pc - 1].line);
                            proc.state = ProcState::Halted;
                        }
                        ProcState::Ready(_) => proc.abort_pending = true,
                        _ => {}
                    },
                    _ => {}
                }
            }
        }
    }

    fn new_event(&mut self, r: usize, kind: EventKind, step: &Step) -> Event {
        let p = &mut self.procs[r];
        let id = EventId {
            rank: p.rank,
            seq: p.seq,
        };
        p.seq += 1;
        let kind = match &step.collective {
            Some((name, root)) => EventKind::CollectiveConstituent {
                collective: name.clone(),
                root: *root,
                inner: Box::new(kind),
            },
            None => kind,
        };
        let mut e = Event::calculation(
            id,
            &step.routine,
            SourceLoc {
                file: self.file.clone(),
                line: step.line,
            },
            self.now,
        );
        e.kind = kind;
        e
    }

    fn act(&mut self, r: usize) {
        let rank = self.procs[r].rank;
        let now = self.now;
        let Some(step) = self.procs[r].steps.get(self.procs[r].pc).cloned() else {
            let p = &mut self.procs[r];
            if self.stop || p.abort_pending {
                p.state = ProcState::Halted;
            } else {
                p.state = ProcState::Done;
                self.post(ControlMessage::request(rank, ProcessCall::Finish));
            }
            return;
        };
        let halting = self.stop || self.procs[r].abort_pending;
        if halting && !matches!(step.op, Op::Compute { .. } | Op::Crash) {
            let p = &mut self.procs[r];
            p.halt_line = Some(step.line);
            p.state = ProcState::Halted;
            return;
        }
        self.procs[r].pc += 1;
        let set = |s: &mut Self, st: ProcState| s.procs[r].state = st;
        match &step.op {
            Op::Compute { ticks } => {
                let e = self.new_event(r, EventKind::Calculation, &step);
                set(self, ProcState::Ready(now + ticks));
                self.post(ControlMessage::request(
                    rank,
                    ProcessCall::Compute { event: e },
                ));
            }
            Op::Crash => {
                set(self, ProcState::Crashed);
                if self.cfg.silent_crash {
                    self.crash_outside.insert(rank);
                } else {
                    let mut e = self.new_event(r, EventKind::Calculation, &step);
                    e.status = Status::Failure(ErrorReason::Aborted);
                    self.post(ControlMessage::request(
                        rank,
                        ProcessCall::Crash { event: e },
                    ));
                }
            }
            Op::Send {
                dst,
                tag,
                len,
                mode,
            } => {
                let mut e = self.new_event(r, EventKind::BlockingSend, &step);
                fill(
                    &mut e,
                    Some(*mode),
                    Tag::Value(*tag),
                    Partner::Rank(*dst),
                    *len,
                );
                let blocking = match mode {
                    SendMode::Buffered => false,
                    SendMode::Standard => *len > self.cfg.eager_threshold,
                    SendMode::Synchronous | SendMode::Ready => true,
                };
                set(
                    self,
                    if blocking {
                        ProcState::Blocked(e.id)
                    } else {
                        ProcState::Ready(now + 1)
                    },
                );
                self.post(ControlMessage::request(
                    rank,
                    ProcessCall::Post { event: e, blocking },
                ));
            }
            Op::Recv { src, tag, len } => {
                let mut e = self.new_event(r, EventKind::BlockingRecv, &step);
                fill(&mut e, None, *tag, *src, *len);
                set(self, ProcState::Blocked(e.id));
                self.post(ControlMessage::request(
                    rank,
                    ProcessCall::Post {
                        event: e,
                        blocking: true,
                    },
                ));
            }
            Op::ISend {
                dst,
                tag,
                len,
                handle,
            } => {
                let mut e = self.new_event(r, EventKind::SendInit, &step);
                fill(
                    &mut e,
                    Some(SendMode::Standard),
                    Tag::Value(*tag),
                    Partner::Rank(*dst),
                    *len,
                );
                self.nonblocking(r, handle, e);
            }
            Op::IRecv {
                src,
                tag,
                len,
                handle,
            } => {
                let mut e = self.new_event(r, EventKind::RecvInit, &step);
                fill(&mut e, None, *tag, *src, *len);
                self.nonblocking(r, handle, e);
            }
            Op::Wait { handle } => {
                let init = self.procs[r]
                    .handles
                    .remove(handle)
                    .expect("validated scenarios wait on known handles");
                let kind = match init.kind.base() {
                    EventKind::SendInit => EventKind::SendComplete,
                    _ => EventKind::RecvComplete,
                };
                let mut e = self.new_event(r, kind, &step);
                e.mode = init.mode;
                e.tag = init.tag;
                e.partner = init.partner;
                e.buf_len = init.buf_len;
                set(self, ProcState::Blocked(e.id));
                self.post(ControlMessage::request(
                    rank,
                    ProcessCall::Complete {
                        event: e,
                        init: init.id,
                    },
                ));
            }
        }
    }

    fn nonblocking(&mut self, r: usize, handle: &str, e: Event) {
        let rank = self.procs[r].rank;
        self.procs[r].handles.insert(handle.to_string(), e.clone());
        self.procs[r].state = ProcState::Ready(self.now + 1);
        self.post(ControlMessage::request(
            rank,
            ProcessCall::Post {
                event: e,
                blocking: false,
            },
        ));
    }

    /// Runs to completion from the current state.
    pub fn run_to_end(mut self) -> RunOutcome {
        while self.step() {}
        self.into_outcome()
    }

    /// Dumps and merges the local graphs. Call once [`Simulator::step`]
    /// returned false.
    pub fn into_outcome(mut self) -> RunOutcome {
        while self.step() {}
        for m in &mut self.managers {
            m.finalize();
        }
        let graph = merge(
            self.process_count,
            self.managers.into_iter().map(Manager::into_local_graph),
        );
        let aborted_ranks: BTreeSet<ProcessRank> = graph
            .events()
            .filter(|e| e.is_failure())
            .map(|e| e.id.rank)
            .collect();
        let mut abort_sites = BTreeMap::new();
        let mut all_done = true;
        for p in &self.procs {
            match p.state {
                ProcState::Halted => {
                    if let Some(line) = p.halt_line {
                        abort_sites.insert(p.rank, line);
                    }
                    all_done = false;
                }
                ProcState::Blocked(_) => {
                    abort_sites.insert(p.rank, p.steps[p.pc - 1].line);
                    all_done = false;
                }
                ProcState::Ready(_) | ProcState::Crashed => all_done = false,
                ProcState::Done => {}
            }
        }
        RunOutcome {
            terminated_abnormally: !aborted_ranks.is_empty()
                || !self.crash_outside.is_empty()
                || !all_done,
            graph,
            aborted_ranks,
            crash_outside_routines: self.crash_outside,
            abort_sites,
            final_tick: self.now,
        }
    }
}

fn fill(e: &mut Event, mode: Option<SendMode>, tag: Tag, partner: Partner, len: u64) {
    e.mode = mode;
    e.tag = Some(tag);
    e.partner = Some(partner);
    e.buf_len = Some(len);
}

/// Union of the local graphs. A rank's own copy of an event wins over copies
/// held by partners; partner copies cannot add a second failure to a rank.
fn merge(
    process_count: u32,
    locals: impl IntoIterator<Item = crate::detector::LocalGraph>,
) -> EventGraph {
    let locals: Vec<_> = locals.into_iter().collect();
    let mut events: BTreeMap<EventId, Event> = BTreeMap::new();
    for (r, local) in locals.iter().enumerate() {
        for e in local.events().filter(|e| e.id.rank.index() == r) {
            events.insert(e.id, e.clone());
        }
    }
    let mut failed: BTreeSet<ProcessRank> = events
        .values()
        .filter(|e| e.is_failure())
        .map(|e| e.id.rank)
        .collect();
    for (r, local) in locals.iter().enumerate() {
        for e in local.events().filter(|e| e.id.rank.index() != r) {
            if events.contains_key(&e.id) {
                continue;
            }
            let mut copy = e.clone();
            if copy.is_failure() && !failed.insert(copy.id.rank) {
                copy.status = Status::Successful;
            }
            events.insert(copy.id, copy);
        }
    }
    let mut edges: BTreeSet<Edge> = locals
        .iter()
        .flat_map(|l| l.edges().copied())
        .filter(|e| e.kind != RelationKind::Sequential)
        .filter(|e| events.contains_key(&e.from) && events.contains_key(&e.to))
        .collect();
    for id in events.keys() {
        let next = EventId {
            rank: id.rank,
            seq: id.seq + 1,
        };
        if events.contains_key(&next) {
            edges.insert(Edge {
                from: *id,
                to: next,
                kind: RelationKind::Sequential,
            });
        }
    }
    EventGraph::from_parts(process_count, events.into_values(), edges)
        .expect("merged local graphs form a valid event graph")
}

/// Runs a scenario to completion under detector supervision.
pub fn run(scenario: &Scenario, cfg: &SimConfig) -> RunOutcome {
    Simulator::new(scenario, cfg.clone()).run_to_end()
}
