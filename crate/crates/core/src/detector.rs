//! Run-time error detection: one manager per simulated process.
//!
//! A manager gates every instrumented call of its process, keeps the queue of
//! unmatched requests with their timeout deadlines and the local event graph
//! that is dumped when the run ends. Managers only talk to each other and to
//! their own process through [`ControlMessage`]s.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::event_graph::{
    Edge, ErrorReason, Event, EventId, EventKind, ProcessRank, RelationKind, SendMode, Status,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManagerStateName {
    /// Timeout checking and control-message waiting.
    C,
    /// Send initiating.
    S1,
    /// Message sending.
    S2,
    /// Receive initiating.
    R1,
    /// Send-request receiving.
    R2,
    /// Message receiving.
    R3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Process(ProcessRank),
    Manager(ProcessRank),
}

/// What a process asks of its manager.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessCall {
    /// A send or receive request. `blocking` means the process waits for the
    /// manager's verdict before the event executes; otherwise the event is
    /// admitted at once and checked in the background.
    Post { event: Event, blocking: bool },
    /// Completion of a nonblocking request.
    Complete { event: Event, init: EventId },
    /// A calculation step, recorded as-is.
    Compute { event: Event },
    /// Abnormal termination inside the process.
    Crash { event: Event },
    /// The script ran to its end.
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlKind {
    ReqP,
    ReqM,
    AckM,
    NackM,
    AckP,
    AckR,
    AbortP,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlBody {
    ReqP(ProcessCall),
    /// Send request forwarded to the destination's manager.
    ReqM {
        send: Event,
    },
    /// The destination matched the send with `recv`.
    AckM {
        send: EventId,
        recv: Event,
        truncated: bool,
    },
    /// A ready-mode send found no posted receive.
    NackM {
        send: EventId,
    },
    AckP,
    AckR,
    AbortP {
        reason: ErrorReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub about: Option<EventId>,
    pub from: Endpoint,
    pub to: Endpoint,
    pub body: ControlBody,
}

impl ControlMessage {
    pub fn kind(&self) -> ControlKind {
        match self.body {
            ControlBody::ReqP(_) => ControlKind::ReqP,
            ControlBody::ReqM { .. } => ControlKind::ReqM,
            ControlBody::AckM { .. } => ControlKind::AckM,
            ControlBody::NackM { .. } => ControlKind::NackM,
            ControlBody::AckP => ControlKind::AckP,
            ControlBody::AckR => ControlKind::AckR,
            ControlBody::AbortP { .. } => ControlKind::AbortP,
        }
    }

    pub fn request(rank: ProcessRank, call: ProcessCall) -> Self {
        let about = match &call {
            ProcessCall::Post { event, .. }
            | ProcessCall::Complete { event, .. }
            | ProcessCall::Compute { event }
            | ProcessCall::Crash { event } => Some(event.id),
            ProcessCall::Finish => None,
        };
        Self {
            about,
            from: Endpoint::Process(rank),
            to: Endpoint::Manager(rank),
            body: ControlBody::ReqP(call),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    LocalSend,
    LocalRecv,
    /// A send request from another manager waiting for a local receive.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueEntry {
    pub event: Event,
    /// Remote requests carry no deadline; the sender's manager owns their
    /// timeout.
    pub deadline: Option<u64>,
    pub side: Side,
}

/// `Q_p`: unmatched requests in arrival order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PendingQueue {
    entries: VecDeque<QueueEntry>,
}

fn compatible(send: &Event, recv: &Event) -> bool {
    let partner_ok = recv.partner.is_some_and(|p| p.accepts(send.id.rank));
    let tag_ok = match (recv.tag, send.tag) {
        (Some(want), Some(sent)) => want.accepts(sent),
        _ => false,
    };
    partner_ok && tag_ok && send.destination() == Some(recv.id.rank)
}

impl PendingQueue {
    pub fn push(&mut self, entry: QueueEntry) {
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn remove(&mut self, id: EventId, side: Side) -> Option<QueueEntry> {
        let pos = self
            .entries
            .iter()
            .position(|e| e.event.id == id && e.side == side)?;
        self.entries.remove(pos)
    }

    pub fn position(&self, id: EventId, side: Side) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.event.id == id && e.side == side)
    }

    /// Finds the queued counterpart for an incoming request without removing
    /// it. For an incoming receive (`req_q`), the matching remote send with
    /// the smallest `(logical_time, rank, seq)`; for an incoming send
    /// (`req_m`), the earliest posted compatible local receive. Both keep
    /// messages on one channel in send order.
    pub fn match_request(&self, incoming: &ControlMessage) -> Option<&QueueEntry> {
        match &incoming.body {
            ControlBody::ReqM { send } => self
                .entries
                .iter()
                .find(|e| e.side == Side::LocalRecv && compatible(send, &e.event)),
            ControlBody::ReqP(ProcessCall::Post { event, .. }) if event.kind.is_recv_request() => {
                self.entries
                    .iter()
                    .filter(|e| e.side == Side::Remote && compatible(&e.event, event))
                    .min_by_key(|e| (e.event.logical_time, e.event.id))
            }
            _ => None,
        }
    }

    fn expired(&self, now: u64) -> Vec<EventId> {
        self.entries
            .iter()
            .filter(|e| e.deadline.is_some_and(|d| d <= now))
            .map(|e| e.event.id)
            .collect()
    }

    fn next_deadline(&self) -> Option<u64> {
        self.entries.iter().filter_map(|e| e.deadline).min()
    }
}

/// `E_p`: admitted events as known to one manager, with optional capacity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalGraph {
    capacity: Option<usize>,
    events: BTreeMap<EventId, Event>,
    edges: BTreeSet<Edge>,
}

impl LocalGraph {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.events.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn get(&self, id: EventId) -> Option<&Event> {
        self.events.get(&id)
    }

    /// Inserts or replaces an event, then evicts if over capacity.
    pub fn admit(&mut self, event: Event) {
        self.events.insert(event.id, event);
        self.evict_if_full();
    }

    pub fn relate(&mut self, edge: Edge) {
        if self.events.contains_key(&edge.from) && self.events.contains_key(&edge.to) {
            self.edges.insert(edge);
        }
    }

    fn update(&mut self, id: EventId, f: impl FnOnce(&mut Event)) {
        if let Some(e) = self.events.get_mut(&id) {
            f(e);
        }
    }

    /// Removes the oldest successful events until within capacity. Failure
    /// events are never removed.
    pub fn evict_if_full(&mut self) {
        let Some(cap) = self.capacity else {
            return;
        };
        while self.events.len() > cap {
            let victim = self
                .events
                .values()
                .filter(|e| !e.is_failure())
                .min_by_key(|e| (e.logical_time, e.id))
                .map(|e| e.id);
            let Some(id) = victim else {
                break;
            };
            self.events.remove(&id);
            self.edges.retain(|e| e.from != id && e.to != id);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphUpdate {
    Admit { id: EventId, status: Status },
    Relate(Edge),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Handled {
    pub transitions: Vec<ManagerStateName>,
    pub outgoing: Vec<ControlMessage>,
    pub updates: Vec<GraphUpdate>,
    /// An error was detected here; the run must stop.
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectorError {
    #[error("manager {manager}: message addressed to {to:?}")]
    Misaddressed { manager: ProcessRank, to: Endpoint },
    #[error("manager {manager}: control message about unknown event {event}")]
    UnknownEvent {
        manager: ProcessRank,
        event: EventId,
    },
    #[error("manager {manager}: unexpected {kind:?} message")]
    Unexpected {
        manager: ProcessRank,
        kind: ControlKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManagerConfig {
    pub process_count: u32,
    pub timeout_ticks: u64,
    pub capacity: Option<usize>,
    /// With detection off, nothing times out and nothing is flagged.
    pub detection: bool,
}

#[allow(clippy::large_enum_variant)]
pub enum ManagerInput {
    Control(ControlMessage),
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InitState {
    event: Event,
    matched: Option<Event>,
    completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manager {
    rank: ProcessRank,
    cfg: ManagerConfig,
    state: ManagerStateName,
    queue: PendingQueue,
    local: LocalGraph,
    failure: Option<EventId>,
    /// Blocking request awaiting a verdict; not yet admitted.
    blocked: Option<Event>,
    inits: BTreeMap<EventId, InitState>,
    waiting: Option<(Event, EventId)>,
    timed_out: BTreeSet<EventId>,
}

impl Manager {
    pub fn new(rank: ProcessRank, cfg: ManagerConfig) -> Self {
        Self {
            rank,
            cfg,
            state: ManagerStateName::C,
            queue: PendingQueue::default(),
            local: LocalGraph::new(cfg.capacity),
            failure: None,
            blocked: None,
            inits: BTreeMap::new(),
            waiting: None,
            timed_out: BTreeSet::new(),
        }
    }

    pub fn rank(&self) -> ProcessRank {
        self.rank
    }

    pub fn state(&self) -> ManagerStateName {
        self.state
    }

    pub fn queue(&self) -> &PendingQueue {
        &self.queue
    }

    pub fn local_graph(&self) -> &LocalGraph {
        &self.local
    }

    pub fn failure(&self) -> Option<EventId> {
        self.failure
    }

    /// Earliest deadline that can still produce a verdict.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.failure.is_some() || !self.cfg.detection {
            return None;
        }
        self.queue.next_deadline()
    }

    pub fn handle(&mut self, input: ManagerInput, now: u64) -> Result<Handled, DetectorError> {
        let mut out = Handled::default();
        match input {
            ManagerInput::Tick => self.check_timeouts(now, &mut out),
            ManagerInput::Control(msg) => {
                if msg.to != Endpoint::Manager(self.rank) {
                    return Err(DetectorError::Misaddressed {
                        manager: self.rank,
                        to: msg.to,
                    });
                }
                self.on_control(msg, now, &mut out)?;
            }
        }
        self.state = ManagerStateName::C;
        if out.transitions.last() != Some(&ManagerStateName::C) {
            out.transitions.push(ManagerStateName::C);
        }
        Ok(out)
    }

    fn enter(&mut self, s: ManagerStateName, out: &mut Handled) {
        self.state = s;
        out.transitions.push(s);
    }

    fn to_process(&self, about: EventId, body: ControlBody) -> ControlMessage {
        ControlMessage {
            about: Some(about),
            from: Endpoint::Manager(self.rank),
            to: Endpoint::Process(self.rank),
            body,
        }
    }

    fn to_manager(&self, rank: ProcessRank, about: EventId, body: ControlBody) -> ControlMessage {
        ControlMessage {
            about: Some(about),
            from: Endpoint::Manager(self.rank),
            to: Endpoint::Manager(rank),
            body,
        }
    }

    fn admit(&mut self, mut event: Event, status: Status, out: &mut Handled) {
        event.status = status;
        out.updates.push(GraphUpdate::Admit {
            id: event.id,
            status,
        });
        self.local.admit(event);
    }

    fn relate(&mut self, from: EventId, to: EventId, kind: RelationKind, out: &mut Handled) {
        let edge = Edge { from, to, kind };
        out.updates.push(GraphUpdate::Relate(edge));
        self.local.relate(edge);
    }

    /// Records `event` as this rank's failure and aborts the process. A rank
    /// keeps its first failure only; later verdicts are not recorded.
    fn fail(&mut self, event: Event, reason: ErrorReason, out: &mut Handled) -> bool {
        if self.failure.is_some() {
            return false;
        }
        let id = event.id;
        self.failure = Some(id);
        if self.blocked.as_ref().is_some_and(|b| b.id == id) {
            self.blocked = None;
        }
        self.admit(event, Status::Failure(reason), out);
        out.outgoing
            .push(self.to_process(id, ControlBody::AbortP { reason }));
        out.detected = true;
        true
    }

    fn check_timeouts(&mut self, now: u64, out: &mut Handled) {
        if !self.cfg.detection {
            return;
        }
        for id in self.queue.expired(now) {
            let Some(pos) = self
                .queue
                .entries
                .iter()
                .position(|e| e.event.id == id && e.deadline.is_some())
            else {
                continue;
            };
            let entry = self.queue.entries.remove(pos).expect("entry");
            self.timed_out.insert(id);
            let event = self.local.get(id).cloned().unwrap_or(entry.event);
            self.fail(event, ErrorReason::Isolated, out);
        }
    }

    fn on_control(
        &mut self,
        msg: ControlMessage,
        now: u64,
        out: &mut Handled,
    ) -> Result<(), DetectorError> {
        let kind = msg.kind();
        match msg.body {
            ControlBody::ReqP(call) => self.on_call(call, now, out),
            ControlBody::ReqM { send } => {
                self.enter(ManagerStateName::R2, out);
                let probe = ControlMessage {
                    about: Some(send.id),
                    from: msg.from,
                    to: msg.to,
                    body: ControlBody::ReqM { send: send.clone() },
                };
                if let Some(recv) = self.queue.match_request(&probe).map(|e| e.event.clone()) {
                    self.receive(send, recv, out);
                } else if send.mode == Some(SendMode::Ready) && self.cfg.detection {
                    out.outgoing.push(self.to_manager(
                        send.id.rank,
                        send.id,
                        ControlBody::NackM { send: send.id },
                    ));
                } else {
                    self.queue.push(QueueEntry {
                        event: send,
                        deadline: None,
                        side: Side::Remote,
                    });
                }
                Ok(())
            }
            ControlBody::AckM {
                send,
                recv,
                truncated,
            } => {
                self.enter(ManagerStateName::S2, out);
                self.on_ack(send, recv, truncated, out)
            }
            ControlBody::NackM { send } => {
                self.enter(ManagerStateName::S2, out);
                let Some(entry) = self.queue.remove(send, Side::LocalSend) else {
                    return self.stale(send);
                };
                let event = self.local.get(send).cloned().unwrap_or(entry.event);
                self.fail(event, ErrorReason::Isolated, out);
                Ok(())
            }
            ControlBody::AckP | ControlBody::AckR | ControlBody::AbortP { .. } => {
                Err(DetectorError::Unexpected {
                    manager: self.rank,
                    kind,
                })
            }
        }
    }

    fn stale(&self, id: EventId) -> Result<(), DetectorError> {
        // A verdict may arrive after the entry already timed out; the timeout
        // decision stands.
        if self.timed_out.contains(&id) || self.failure.is_some() {
            Ok(())
        } else {
            Err(DetectorError::UnknownEvent {
                manager: self.rank,
                event: id,
            })
        }
    }

    fn on_call(
        &mut self,
        call: ProcessCall,
        now: u64,
        out: &mut Handled,
    ) -> Result<(), DetectorError> {
        match call {
            ProcessCall::Post { event, blocking } => {
                let deadline = self.cfg.detection.then(|| now + self.cfg.timeout_ticks);
                if blocking {
                    self.blocked = Some(event.clone());
                } else {
                    self.admit(event.clone(), Status::Successful, out);
                    if event.kind.is_init() {
                        self.inits.insert(
                            event.id,
                            InitState {
                                event: event.clone(),
                                matched: None,
                                completed: false,
                            },
                        );
                    }
                }
                if event.kind.is_send_side() {
                    self.enter(ManagerStateName::S1, out);
                    self.queue.push(QueueEntry {
                        event: event.clone(),
                        deadline,
                        side: Side::LocalSend,
                    });
                    if let Some(dst) = event.destination().filter(|d| d.0 < self.cfg.process_count)
                    {
                        out.outgoing.push(self.to_manager(
                            dst,
                            event.id,
                            ControlBody::ReqM { send: event },
                        ));
                    }
                } else {
                    self.enter(ManagerStateName::R1, out);
                    let probe = ControlMessage::request(
                        self.rank,
                        ProcessCall::Post {
                            event: event.clone(),
                            blocking,
                        },
                    );
                    if let Some(send) = self.queue.match_request(&probe).map(|e| e.event.clone()) {
                        self.receive(send, event, out);
                    } else {
                        self.queue.push(QueueEntry {
                            event,
                            deadline,
                            side: Side::LocalRecv,
                        });
                    }
                }
                Ok(())
            }
            ProcessCall::Complete { event, init } => {
                let Some(state) = self.inits.get(&init) else {
                    return Err(DetectorError::UnknownEvent {
                        manager: self.rank,
                        event: init,
                    });
                };
                if state.matched.is_some() {
                    self.complete(event, init, out);
                } else {
                    self.waiting = Some((event, init));
                }
                Ok(())
            }
            ProcessCall::Compute { event } => {
                self.admit(event, Status::Successful, out);
                Ok(())
            }
            ProcessCall::Crash { event } => {
                if self.failure.is_none() {
                    self.failure = Some(event.id);
                    self.admit(event, Status::Failure(ErrorReason::Aborted), out);
                }
                Ok(())
            }
            ProcessCall::Finish => {
                if self.cfg.detection {
                    let unwaited = self
                        .inits
                        .values()
                        .find(|s| !s.completed)
                        .map(|s| s.event.id);
                    if let Some(id) = unwaited {
                        let event = self
                            .local
                            .get(id)
                            .or_else(|| self.inits.get(&id).map(|s| &s.event))
                            .cloned()
                            .expect("admitted init");
                        self.fail(event, ErrorReason::Isolated, out);
                    }
                }
                Ok(())
            }
        }
    }

    /// R3: `recv` on this rank is matched with `send`.
    fn receive(&mut self, send: Event, recv: Event, out: &mut Handled) {
        self.enter(ManagerStateName::R3, out);
        self.queue.remove(send.id, Side::Remote);
        self.queue.remove(recv.id, Side::LocalRecv);
        let truncated = self.cfg.detection && send.buf_len.unwrap_or(0) > recv.buf_len.unwrap_or(0);
        out.outgoing.push(self.to_manager(
            send.id.rank,
            send.id,
            ControlBody::AckM {
                send: send.id,
                recv: recv.clone(),
                truncated,
            },
        ));
        let copy_status = if truncated {
            Status::Failure(ErrorReason::Truncated)
        } else {
            Status::Successful
        };
        if self.local.get(send.id).is_none() || truncated {
            self.admit(send.clone(), copy_status, out);
        }
        if recv.kind.is_receive_side() {
            if truncated {
                if !self.fail(recv.clone(), ErrorReason::Truncated, out) {
                    self.blocked = None;
                }
            } else {
                self.blocked = None;
                self.admit(recv.clone(), Status::Successful, out);
                out.outgoing
                    .push(self.to_process(recv.id, ControlBody::AckR));
            }
            self.relate(send.id, recv.id, RelationKind::Concurrent, out);
        } else {
            self.local
                .update(recv.id, |e| e.matched_send = Some(send.id));
            if let Some(state) = self.inits.get_mut(&recv.id) {
                state.matched = Some(send);
                state.event.matched_send = state.matched.as_ref().map(|s| s.id);
            }
            if truncated {
                let event = self.local.get(recv.id).cloned().unwrap_or(recv);
                self.fail(event, ErrorReason::Truncated, out);
            } else if self
                .waiting
                .as_ref()
                .is_some_and(|(_, init)| *init == recv.id)
            {
                let (done, init) = self.waiting.take().expect("waiting");
                self.complete(done, init, out);
            }
        }
    }

    /// S2: the destination matched one of our sends.
    fn on_ack(
        &mut self,
        send: EventId,
        recv: Event,
        truncated: bool,
        out: &mut Handled,
    ) -> Result<(), DetectorError> {
        let Some(entry) = self.queue.remove(send, Side::LocalSend) else {
            return self.stale(send);
        };
        let copy_status = if truncated {
            Status::Failure(ErrorReason::Truncated)
        } else {
            Status::Successful
        };
        self.admit(recv.clone(), copy_status, out);
        let was_blocked = self.blocked.as_ref().is_some_and(|b| b.id == send);
        let event = self.local.get(send).cloned().unwrap_or(entry.event);
        if truncated {
            if !self.fail(event, ErrorReason::Truncated, out) && was_blocked {
                self.blocked = None;
            }
        } else if was_blocked {
            self.blocked = None;
            self.admit(event, Status::Successful, out);
            out.outgoing.push(self.to_process(send, ControlBody::AckP));
        }
        if recv.kind.is_receive_side() {
            self.relate(send, recv.id, RelationKind::Concurrent, out);
        }
        if let Some(state) = self.inits.get_mut(&send) {
            state.matched = Some(recv);
            if !truncated && self.waiting.as_ref().is_some_and(|(_, init)| *init == send) {
                let (done, init) = self.waiting.take().expect("waiting");
                self.complete(done, init, out);
            }
        }
        Ok(())
    }

    fn complete(&mut self, done: Event, init: EventId, out: &mut Handled) {
        let done_id = done.id;
        self.admit(done, Status::Successful, out);
        self.relate(init, done_id, RelationKind::Nonblocking, out);
        let state = self.inits.get_mut(&init).expect("known init");
        state.completed = true;
        let partner = state.matched.clone();
        if let Some(send) =
            partner.filter(|_| matches!(state.event.kind.base(), EventKind::RecvInit))
        {
            if self.local.get(send.id).is_none() {
                self.admit(send.clone(), Status::Successful, out);
            }
            self.relate(send.id, done_id, RelationKind::Concurrent, out);
        }
        out.outgoing
            .push(self.to_process(done_id, ControlBody::AckP));
    }

    /// Called once the run has stopped and all control traffic drained. A
    /// rank without a failure whose process is stuck in a request, or that
    /// still owns an unmatched request, fails on it.
    pub fn finalize(&mut self) -> Handled {
        let mut out = Handled::default();
        if self.cfg.detection && self.failure.is_none() {
            let candidate = if let Some(ev) = self.blocked.clone() {
                Some(ev)
            } else if let Some((_, init)) = self.waiting.clone() {
                self.local
                    .get(init)
                    .or_else(|| self.inits.get(&init).map(|s| &s.event))
                    .cloned()
            } else {
                self.queue
                    .entries()
                    .find(|e| e.side != Side::Remote)
                    .map(|e| {
                        self.local
                            .get(e.event.id)
                            .cloned()
                            .unwrap_or_else(|| e.event.clone())
                    })
            };
            if let Some(ev) = candidate {
                self.fail(ev, ErrorReason::Isolated, &mut out);
            }
        }
        self.blocked = None;
        self.waiting = None;
        self.queue.entries.clear();
        out
    }

    pub fn into_local_graph(self) -> LocalGraph {
        self.local
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_graph::{Partner, SourceLoc, Tag};

    fn cfg() -> ManagerConfig {
        ManagerConfig {
            process_count: 4,
            timeout_ticks: 10,
            capacity: None,
            detection: true,
        }
    }

    fn ev(rank: u32, seq: u32, kind: EventKind, partner: Partner, tag: Tag, len: u64) -> Event {
        Event {
            id: EventId::new(rank, seq),
            kind,
            routine: "t".into(),
            mode: Some(SendMode::Synchronous),
            tag: Some(tag),
            partner: Some(partner),
            buf_len: Some(len),
            source: SourceLoc {
                file: "t".into(),
                line: 1,
            },
            status: Status::Successful,
            logical_time: seq as u64,
            matched_send: None,
        }
    }

    fn send(rank: u32, seq: u32, to: u32, tag: i64, len: u64) -> Event {
        ev(
            rank,
            seq,
            EventKind::BlockingSend,
            Partner::Rank(ProcessRank(to)),
            Tag::Value(tag),
            len,
        )
    }

    fn recv(rank: u32, seq: u32, from: Partner, tag: Tag, len: u64) -> Event {
        ev(rank, seq, EventKind::BlockingRecv, from, tag, len)
    }

    fn post(rank: u32, event: Event) -> ManagerInput {
        ManagerInput::Control(ControlMessage::request(
            ProcessRank(rank),
            ProcessCall::Post {
                event,
                blocking: true,
            },
        ))
    }

    #[test]
    fn send_request_goes_through_s1() {
        let mut m = Manager::new(ProcessRank(0), cfg());
        let out = m.handle(post(0, send(0, 0, 1, 0, 4)), 0).unwrap();
        assert_eq!(
            out.transitions,
            vec![ManagerStateName::S1, ManagerStateName::C]
        );
        assert_eq!(out.outgoing.len(), 1);
        assert_eq!(out.outgoing[0].kind(), ControlKind::ReqM);
        assert_eq!(out.outgoing[0].to, Endpoint::Manager(ProcessRank(1)));
        assert_eq!(m.queue().len(), 1);
        assert_eq!(m.queue().entries().next().unwrap().deadline, Some(10));
    }

    #[test]
    fn timeout_aborts_and_records_failure() {
        let mut m = Manager::new(ProcessRank(1), cfg());
        m.handle(
            post(
                1,
                recv(1, 0, Partner::Rank(ProcessRank(0)), Tag::Value(0), 4),
            ),
            0,
        )
        .unwrap();
        let quiet = m.handle(ManagerInput::Tick, 9).unwrap();
        assert!(!quiet.detected);
        let out = m.handle(ManagerInput::Tick, 10).unwrap();
        assert!(out.detected);
        assert_eq!(out.outgoing[0].kind(), ControlKind::AbortP);
        assert_eq!(m.failure(), Some(EventId::new(1, 0)));
        assert_eq!(
            m.local_graph().get(EventId::new(1, 0)).unwrap().status,
            Status::Failure(ErrorReason::Isolated)
        );
        assert!(m.queue().is_empty());
    }

    #[test]
    fn truncation_in_r3_fails_both() {
        let mut m = Manager::new(ProcessRank(1), cfg());
        m.handle(
            post(
                1,
                recv(1, 0, Partner::Rank(ProcessRank(0)), Tag::Value(0), 4),
            ),
            0,
        )
        .unwrap();
        let req = ControlMessage {
            about: Some(EventId::new(0, 0)),
            from: Endpoint::Manager(ProcessRank(0)),
            to: Endpoint::Manager(ProcessRank(1)),
            body: ControlBody::ReqM {
                send: send(0, 0, 1, 0, 8),
            },
        };
        let out = m.handle(ManagerInput::Control(req), 2).unwrap();
        assert_eq!(
            out.transitions,
            vec![
                ManagerStateName::R2,
                ManagerStateName::R3,
                ManagerStateName::C
            ]
        );
        assert!(out.detected);
        let kinds: Vec<_> = out.outgoing.iter().map(ControlMessage::kind).collect();
        assert_eq!(kinds, vec![ControlKind::AckM, ControlKind::AbortP]);
        for id in [EventId::new(0, 0), EventId::new(1, 0)] {
            assert_eq!(
                m.local_graph().get(id).unwrap().status,
                Status::Failure(ErrorReason::Truncated)
            );
        }
    }

    #[test]
    fn matching_rules() {
        let mut q = PendingQueue::default();
        q.push(QueueEntry {
            event: recv(1, 0, Partner::Any, Tag::Any, 4),
            deadline: Some(5),
            side: Side::LocalRecv,
        });
        let incoming = |s: Event| ControlMessage {
            about: Some(s.id),
            from: Endpoint::Manager(s.id.rank),
            to: Endpoint::Manager(ProcessRank(1)),
            body: ControlBody::ReqM { send: s },
        };
        assert!(q.match_request(&incoming(send(2, 0, 1, 7, 1))).is_some());

        let mut q = PendingQueue::default();
        q.push(QueueEntry {
            event: recv(1, 0, Partner::Rank(ProcessRank(3)), Tag::Value(1), 4),
            deadline: Some(5),
            side: Side::LocalRecv,
        });
        assert!(q.match_request(&incoming(send(2, 0, 1, 1, 1))).is_none());

        let mut q = PendingQueue::default();
        for seq in [3, 4] {
            q.push(QueueEntry {
                event: send(0, seq, 1, 0, 1),
                deadline: None,
                side: Side::Remote,
            });
        }
        let r = ControlMessage::request(
            ProcessRank(1),
            ProcessCall::Post {
                event: recv(1, 0, Partner::Rank(ProcessRank(0)), Tag::Value(0), 1),
                blocking: true,
            },
        );
        assert_eq!(q.match_request(&r).unwrap().event.id, EventId::new(0, 3));
    }

    #[test]
    fn eviction_keeps_failures() {
        let mut g = LocalGraph::new(Some(2));
        for s in 0..3 {
            g.admit(send(0, s, 1, 0, 1));
        }
        assert_eq!(g.len(), 2);
        assert!(g.get(EventId::new(0, 0)).is_none());

        let mut g = LocalGraph::new(Some(1));
        let mut f = send(0, 0, 1, 0, 1);
        f.status = Status::Failure(ErrorReason::Isolated);
        g.admit(f);
        g.admit(send(0, 1, 1, 0, 1));
        assert_eq!(g.len(), 1);
        assert!(g.get(EventId::new(0, 0)).is_some());

        let mut g = LocalGraph::new(None);
        for s in 0..50 {
            g.admit(send(0, s, 1, 0, 1));
        }
        assert_eq!(g.len(), 50);
    }

    #[test]
    fn misaddressed_message_rejected() {
        let mut m = Manager::new(ProcessRank(0), cfg());
        let err = m.handle(post(1, send(1, 0, 0, 0, 1)), 0).unwrap_err();
        assert!(matches!(err, DetectorError::Misaddressed { .. }));
    }
}
