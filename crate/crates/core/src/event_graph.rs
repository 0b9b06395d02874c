//! Extended event graph of a message-passing run.
//!
//! Events are identified by `(rank, seq)`. Three order relations connect them:
//! sequential (consecutive events on one rank), concurrent (a send-side event
//! to the receive-side event that received its message) and nonblocking (a
//! nonblocking initiation to its completion). Happened-before is the
//! irreflexive transitive closure of their union.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a simulated process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessRank(pub u32);

impl ProcessRank {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId {
    pub rank: ProcessRank,
    pub seq: u32,
}

impl EventId {
    pub fn new(rank: u32, seq: u32) -> Self {
        Self {
            rank: ProcessRank(rank),
            seq,
        }
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e({},{})", self.rank, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    SendInit,
    SendComplete,
    RecvInit,
    RecvComplete,
    BlockingSend,
    BlockingRecv,
    Calculation,
    /// Point-to-point piece of a decomposed collective.
    CollectiveConstituent {
        collective: String,
        root: ProcessRank,
        inner: Box<EventKind>,
    },
}

impl EventKind {
    /// The point-to-point kind, looking through collective wrappers.
    pub fn base(&self) -> &EventKind {
        match self {
            EventKind::CollectiveConstituent { inner, .. } => inner.base(),
            other => other,
        }
    }

    pub fn is_calculation(&self) -> bool {
        matches!(self.base(), EventKind::Calculation)
    }

    /// Events whose message must leave through a concurrent edge.
    pub fn is_send_side(&self) -> bool {
        matches!(self.base(), EventKind::BlockingSend | EventKind::SendInit)
    }

    /// Events that receive a message through a concurrent edge.
    pub fn is_receive_side(&self) -> bool {
        matches!(
            self.base(),
            EventKind::BlockingRecv | EventKind::RecvComplete
        )
    }

    pub fn is_init(&self) -> bool {
        matches!(self.base(), EventKind::SendInit | EventKind::RecvInit)
    }

    pub fn is_completion(&self) -> bool {
        matches!(
            self.base(),
            EventKind::SendComplete | EventKind::RecvComplete
        )
    }

    /// Receive postings that take part in message matching.
    pub fn is_recv_request(&self) -> bool {
        matches!(self.base(), EventKind::BlockingRecv | EventKind::RecvInit)
    }

    pub fn collective(&self) -> Option<(&str, ProcessRank)> {
        match self {
            EventKind::CollectiveConstituent {
                collective, root, ..
            } => Some((collective.as_str(), *root)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SendMode {
    Standard,
    Buffered,
    Synchronous,
    Ready,
}

impl SendMode {
    pub fn name(self) -> &'static str {
        match self {
            SendMode::Standard => "standard",
            SendMode::Buffered => "buffered",
            SendMode::Synchronous => "synchronous",
            SendMode::Ready => "ready",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    Value(i64),
    Any,
}

impl Tag {
    pub fn accepts(self, sent: Tag) -> bool {
        match (self, sent) {
            (Tag::Any, _) => true,
            (Tag::Value(a), Tag::Value(b)) => a == b,
            (Tag::Value(_), Tag::Any) => false,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Value(v) => write!(f, "{v}"),
            Tag::Any => f.write_str("any"),
        }
    }
}

/// Intended source or destination of a communication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partner {
    Rank(ProcessRank),
    Any,
}

impl Partner {
    pub fn rank(self) -> Option<ProcessRank> {
        match self {
            Partner::Rank(r) => Some(r),
            Partner::Any => None,
        }
    }

    pub fn accepts(self, rank: ProcessRank) -> bool {
        match self {
            Partner::Any => true,
            Partner::Rank(r) => r == rank,
        }
    }
}

impl fmt::Display for Partner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partner::Rank(r) => write!(f, "{r}"),
            Partner::Any => f.write_str("any"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceLoc {
    pub file: String,
    pub line: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorReason {
    Isolated,
    Truncated,
    Aborted,
}

impl ErrorReason {
    pub fn name(self) -> &'static str {
        match self {
            ErrorReason::Isolated => "isolated",
            ErrorReason::Truncated => "truncated",
            ErrorReason::Aborted => "aborted",
        }
    }
}

/// A failure always carries its reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Successful,
    Failure(ErrorReason),
}

impl Status {
    pub fn is_failure(self) -> bool {
        matches!(self, Status::Failure(_))
    }

    pub fn error_reason(self) -> Option<ErrorReason> {
        match self {
            Status::Successful => None,
            Status::Failure(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub id: EventId,
    pub kind: EventKind,
    pub routine: String,
    pub mode: Option<SendMode>,
    pub tag: Option<Tag>,
    pub partner: Option<Partner>,
    pub buf_len: Option<u64>,
    pub source: SourceLoc,
    pub status: Status,
    pub logical_time: u64,
    /// For a nonblocking receive initiation: the send it was matched with.
    /// The concurrent edge itself only appears once the receive completes.
    pub matched_send: Option<EventId>,
}

impl Event {
    pub fn calculation(id: EventId, routine: &str, source: SourceLoc, time: u64) -> Self {
        Self {
            id,
            kind: EventKind::Calculation,
            routine: routine.to_string(),
            mode: None,
            tag: None,
            partner: None,
            buf_len: None,
            source,
            status: Status::Successful,
            logical_time: time,
            matched_send: None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.status.is_failure()
    }

    pub fn error_reason(&self) -> Option<ErrorReason> {
        self.status.error_reason()
    }

    /// Destination rank for send-side events.
    pub fn destination(&self) -> Option<ProcessRank> {
        if self.kind.is_send_side() {
            self.partner.and_then(Partner::rank)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    Sequential,
    Concurrent,
    Nonblocking,
}

impl RelationKind {
    pub fn code(self) -> &'static str {
        match self {
            RelationKind::Sequential => "S",
            RelationKind::Concurrent => "C",
            RelationKind::Nonblocking => "N",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: EventId,
    pub to: EventId,
    pub kind: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("event {0} already present")]
    DuplicateEvent(EventId),
    #[error("event {id} is not consecutive: rank {} expects seq {expected}", id.rank)]
    NonConsecutive { id: EventId, expected: u32 },
    #[error("rank {rank} outside graph of {process_count} processes")]
    RankOutOfRange {
        rank: ProcessRank,
        process_count: u32,
    },
    #[error("unknown event {0}")]
    UnknownEvent(EventId),
    #[error("{kind:?} edge {from} -> {to} violates its endpoint constraint")]
    EndpointConstraint {
        from: EventId,
        to: EventId,
        kind: RelationKind,
    },
    #[error("edge {from} -> {to} would introduce a cycle")]
    Cycle { from: EventId, to: EventId },
    #[error("{event} already has a {kind:?} partner")]
    AlreadyRelated { event: EventId, kind: RelationKind },
    #[error("no concurrent pairing between {send} and {recv}")]
    NotPaired { send: EventId, recv: EventId },
    #[error("{0} is a calculation event")]
    CalculationEvent(EventId),
    #[error("rank {rank} has more than one failure event ({first}, {second})")]
    MultipleFailures {
        rank: ProcessRank,
        first: EventId,
        second: EventId,
    },
}

/// Directed acyclic graph of events and their order relations.
#[derive(Debug, Clone)]
pub struct EventGraph {
    process_count: u32,
    events: BTreeMap<EventId, Event>,
    edges: BTreeSet<Edge>,
    succ: BTreeMap<EventId, Vec<EventId>>,
    pred: BTreeMap<EventId, Vec<EventId>>,
}

/// Adjacency lists are caches, so equality ignores their order.
impl PartialEq for EventGraph {
    fn eq(&self, other: &Self) -> bool {
        self.process_count == other.process_count
            && self.events == other.events
            && self.edges == other.edges
    }
}

impl Eq for EventGraph {}

impl EventGraph {
    pub fn new(process_count: u32) -> Self {
        Self {
            process_count,
            events: BTreeMap::new(),
            edges: BTreeSet::new(),
            succ: BTreeMap::new(),
            pred: BTreeMap::new(),
        }
    }

    /// Builds a graph from stored parts, for traces and merged local graphs.
    /// Sequence numbers on a rank may have gaps (evicted events), but every
    /// edge is validated like [`EventGraph::add_relation`].
    pub fn from_parts(
        process_count: u32,
        events: impl IntoIterator<Item = Event>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self, GraphError> {
        let mut g = Self::new(process_count);
        for e in events {
            g.check_rank(e.id.rank)?;
            if g.events.contains_key(&e.id) {
                return Err(GraphError::DuplicateEvent(e.id));
            }
            g.events.insert(e.id, e);
        }
        for edge in edges {
            g.add_relation(edge.from, edge.to, edge.kind)?;
        }
        Ok(g)
    }

    fn check_rank(&self, rank: ProcessRank) -> Result<(), GraphError> {
        if rank.0 >= self.process_count {
            return Err(GraphError::RankOutOfRange {
                rank,
                process_count: self.process_count,
            });
        }
        Ok(())
    }

    pub fn process_count(&self) -> u32 {
        self.process_count
    }

    pub fn ranks(&self) -> impl Iterator<Item = ProcessRank> {
        (0..self.process_count).map(ProcessRank)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event(&self, id: EventId) -> Option<&Event> {
        self.events.get(&id)
    }

    fn get(&self, id: EventId) -> Result<&Event, GraphError> {
        self.events.get(&id).ok_or(GraphError::UnknownEvent(id))
    }

    pub fn contains(&self, id: EventId) -> bool {
        self.events.contains_key(&id)
    }

    /// Events in `(rank, seq)` order.
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.events.values()
    }

    pub fn events_on(&self, rank: ProcessRank) -> impl Iterator<Item = &Event> {
        self.events
            .range(
                EventId { rank, seq: 0 }..=EventId {
                    rank,
                    seq: u32::MAX,
                },
            )
            .map(|(_, e)| e)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn edges_of_kind(&self, kind: RelationKind) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.kind == kind)
    }

    /// Number of events stored for `rank`; the next `add_event` seq.
    pub fn next_seq(&self, rank: ProcessRank) -> u32 {
        self.events_on(rank).last().map_or(0, |e| e.seq_after())
    }

    /// Appends an event; a sequential edge from its predecessor is added
    /// automatically.
    pub fn add_event(&mut self, event: Event) -> Result<EventId, GraphError> {
        let id = event.id;
        self.check_rank(id.rank)?;
        if self.events.contains_key(&id) {
            return Err(GraphError::DuplicateEvent(id));
        }
        let expected = self.next_seq(id.rank);
        if id.seq != expected {
            return Err(GraphError::NonConsecutive { id, expected });
        }
        self.events.insert(id, event);
        if id.seq > 0 {
            let prev = EventId {
                rank: id.rank,
                seq: id.seq - 1,
            };
            self.insert_edge(Edge {
                from: prev,
                to: id,
                kind: RelationKind::Sequential,
            });
        }
        Ok(id)
    }

    /// Replaces the stored status of an event.
    pub fn set_status(&mut self, id: EventId, status: Status) -> Result<(), GraphError> {
        let e = self
            .events
            .get_mut(&id)
            .ok_or(GraphError::UnknownEvent(id))?;
        e.status = status;
        Ok(())
    }

    fn insert_edge(&mut self, edge: Edge) {
        if self.edges.insert(edge) {
            self.succ.entry(edge.from).or_default().push(edge.to);
            self.pred.entry(edge.to).or_default().push(edge.from);
        }
    }

    pub fn add_relation(
        &mut self,
        from: EventId,
        to: EventId,
        kind: RelationKind,
    ) -> Result<(), GraphError> {
        let a = self.get(from)?;
        let b = self.get(to)?;
        let ok = match kind {
            RelationKind::Sequential => from.rank == to.rank && to.seq == from.seq + 1,
            RelationKind::Concurrent => a.kind.is_send_side() && b.kind.is_receive_side(),
            RelationKind::Nonblocking => {
                from.rank == to.rank
                    && from.seq < to.seq
                    && matches!(
                        (a.kind.base(), b.kind.base()),
                        (EventKind::SendInit, EventKind::SendComplete)
                            | (EventKind::RecvInit, EventKind::RecvComplete)
                    )
            }
        };
        if !ok {
            return Err(GraphError::EndpointConstraint { from, to, kind });
        }
        let edge = Edge { from, to, kind };
        if self.edges.contains(&edge) {
            return Ok(());
        }
        match kind {
            RelationKind::Concurrent if self.incoming(to, kind).next().is_some() => {
                return Err(GraphError::AlreadyRelated { event: to, kind });
            }
            RelationKind::Nonblocking if self.outgoing(from, kind).next().is_some() => {
                return Err(GraphError::AlreadyRelated { event: from, kind });
            }
            _ => {}
        }
        if from == to || self.reachable(to, from) {
            return Err(GraphError::Cycle { from, to });
        }
        self.insert_edge(edge);
        Ok(())
    }

    pub fn outgoing(&self, id: EventId, kind: RelationKind) -> impl Iterator<Item = EventId> + '_ {
        self.succ
            .get(&id)
            .into_iter()
            .flatten()
            .copied()
            .filter(move |to| {
                self.edges.contains(&Edge {
                    from: id,
                    to: *to,
                    kind,
                })
            })
    }

    pub fn incoming(&self, id: EventId, kind: RelationKind) -> impl Iterator<Item = EventId> + '_ {
        self.pred
            .get(&id)
            .into_iter()
            .flatten()
            .copied()
            .filter(move |from| {
                self.edges.contains(&Edge {
                    from: *from,
                    to: id,
                    kind,
                })
            })
    }

    /// Direct predecessors under any relation.
    pub fn predecessors(&self, id: EventId) -> impl Iterator<Item = EventId> + '_ {
        self.pred.get(&id).into_iter().flatten().copied()
    }

    fn reachable(&self, from: EventId, target: EventId) -> bool {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([from]);
        while let Some(cur) = queue.pop_front() {
            if cur == target {
                return true;
            }
            for &next in self.succ.get(&cur).into_iter().flatten() {
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        false
    }

    /// True iff `b` is reachable from `a` through at least one edge.
    pub fn happened_before(&self, a: EventId, b: EventId) -> Result<bool, GraphError> {
        self.get(a)?;
        self.get(b)?;
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<EventId> =
            self.succ.get(&a).into_iter().flatten().copied().collect();
        while let Some(cur) = queue.pop_front() {
            if cur == b {
                return Ok(true);
            }
            if seen.insert(cur) {
                queue.extend(self.succ.get(&cur).into_iter().flatten().copied());
            }
        }
        Ok(false)
    }

    /// The send matched with a receive-side event or nonblocking receive
    /// initiation, if any.
    pub fn matched_send(&self, recv: EventId) -> Option<EventId> {
        let e = self.events.get(&recv)?;
        if e.kind.is_receive_side() {
            self.incoming(recv, RelationKind::Concurrent).next()
        } else if matches!(e.kind.base(), EventKind::RecvInit) {
            e.matched_send.or_else(|| {
                let done = self.outgoing(recv, RelationKind::Nonblocking).next()?;
                self.incoming(done, RelationKind::Concurrent).next()
            })
        } else {
            None
        }
    }

    pub fn is_isolated(&self, id: EventId) -> Result<bool, GraphError> {
        let e = self.get(id)?;
        if e.kind.is_calculation() {
            return Err(GraphError::CalculationEvent(id));
        }
        let k = &e.kind;
        Ok(
            (k.is_send_side() && self.outgoing(id, RelationKind::Concurrent).next().is_none())
                || (k.is_receive_side()
                    && self.incoming(id, RelationKind::Concurrent).next().is_none())
                || (k.is_init()
                    && self
                        .outgoing(id, RelationKind::Nonblocking)
                        .next()
                        .is_none())
                || (k.is_completion()
                    && self
                        .incoming(id, RelationKind::Nonblocking)
                        .next()
                        .is_none()),
        )
    }

    /// `recv` may be the receive-side event of a concurrent edge or a
    /// nonblocking receive initiation whose match was recorded before it
    /// completed.
    pub fn is_truncated(&self, send: EventId, recv: EventId) -> Result<bool, GraphError> {
        let s = self.get(send)?;
        let r = self.get(recv)?;
        let paired = self.edges.contains(&Edge {
            from: send,
            to: recv,
            kind: RelationKind::Concurrent,
        }) || (matches!(r.kind.base(), EventKind::RecvInit)
            && r.matched_send == Some(send));
        if !paired {
            return Err(GraphError::NotPaired { send, recv });
        }
        Ok(s.buf_len.unwrap_or(0) > r.buf_len.unwrap_or(0))
    }

    /// All matched (send, receive) pairs: concurrent edges plus recorded
    /// matches of nonblocking receives that never completed.
    pub fn message_pairs(&self) -> Vec<(EventId, EventId)> {
        let mut pairs: Vec<_> = self
            .edges_of_kind(RelationKind::Concurrent)
            .map(|e| (e.from, e.to))
            .collect();
        for e in self.events.values() {
            if let (EventKind::RecvInit, Some(send)) = (e.kind.base(), e.matched_send) {
                let completed = self
                    .outgoing(e.id, RelationKind::Nonblocking)
                    .any(|done| self.incoming(done, RelationKind::Concurrent).next() == Some(send));
                if !completed && self.contains(send) {
                    pairs.push((send, e.id));
                }
            }
        }
        pairs.sort();
        pairs
    }

    /// The failure event of every rank (`fe_p`).
    pub fn failure_events(&self) -> Result<BTreeMap<ProcessRank, Option<EventId>>, GraphError> {
        let mut out: BTreeMap<ProcessRank, Option<EventId>> =
            self.ranks().map(|r| (r, None)).collect();
        for e in self.events.values().filter(|e| e.is_failure()) {
            let slot = out.entry(e.id.rank).or_default();
            if let Some(first) = *slot {
                return Err(GraphError::MultipleFailures {
                    rank: e.id.rank,
                    first,
                    second: e.id,
                });
            }
            *slot = Some(e.id);
        }
        Ok(out)
    }

    fn subgraph(&self, keep: &BTreeSet<EventId>) -> EventGraph {
        let mut g = EventGraph::new(self.process_count);
        for id in keep {
            g.events.insert(*id, self.events[id].clone());
        }
        for edge in &self.edges {
            if keep.contains(&edge.from) && keep.contains(&edge.to) {
                g.insert_edge(*edge);
            }
        }
        g
    }

    /// Failure events plus their direct predecessors under any relation.
    pub fn default_view(&self) -> EventGraph {
        let mut keep = BTreeSet::new();
        for e in self.events.values().filter(|e| e.is_failure()) {
            keep.insert(e.id);
            keep.extend(self.predecessors(e.id));
        }
        self.subgraph(&keep)
    }

    /// Restricts the graph to `ranks`, optionally widened by every rank that
    /// shares a concurrent edge with one of them.
    pub fn isolate_processes(
        &self,
        ranks: &BTreeSet<ProcessRank>,
        include_related: bool,
    ) -> Result<EventGraph, GraphError> {
        for &r in ranks {
            self.check_rank(r)?;
        }
        let mut selected = ranks.clone();
        if include_related {
            for edge in self.edges_of_kind(RelationKind::Concurrent) {
                if ranks.contains(&edge.from.rank) {
                    selected.insert(edge.to.rank);
                }
                if ranks.contains(&edge.to.rank) {
                    selected.insert(edge.from.rank);
                }
            }
        }
        let keep: BTreeSet<EventId> = self
            .events
            .keys()
            .filter(|id| selected.contains(&id.rank))
            .copied()
            .collect();
        Ok(self.subgraph(&keep))
    }

    /// Ranks that own at least one event.
    pub fn populated_ranks(&self) -> BTreeSet<ProcessRank> {
        self.events.keys().map(|id| id.rank).collect()
    }
}

impl Event {
    fn seq_after(&self) -> u32 {
        self.id.seq + 1
    }
}
