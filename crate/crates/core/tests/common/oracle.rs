//! Brute-force message matcher used as an independent check of the
//! detector's verdicts. It reads only event attributes (rank, seq, kind,
//! partner, tag, length, mode) and never the graph's relations.

use std::collections::BTreeSet;

use mppd_core::event_graph::{Event, EventGraph, EventId, EventKind, RelationKind, SendMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommSets {
    pub isolated: BTreeSet<EventId>,
    pub truncated: BTreeSet<EventId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Agree,
    Disagree(String),
    Inconclusive,
}

fn is_send(e: &Event) -> bool {
    matches!(e.kind.base(), EventKind::BlockingSend | EventKind::SendInit)
}

fn is_recv(e: &Event) -> bool {
    matches!(e.kind.base(), EventKind::BlockingRecv | EventKind::RecvInit)
}

fn compatible(s: &Event, r: &Event) -> bool {
    let dst = s.partner.and_then(|p| p.rank());
    dst == Some(r.id.rank)
        && r.partner.is_some_and(|p| p.accepts(s.id.rank))
        && match (r.tag, s.tag) {
            (Some(want), Some(sent)) => want.accepts(sent),
            _ => false,
        }
}

fn truncates(s: &Event, r: &Event) -> bool {
    s.buf_len.unwrap_or(0) > r.buf_len.unwrap_or(0)
}

fn ready(s: &Event) -> bool {
    s.mode == Some(SendMode::Ready)
}

/// Sets reported by the detector, read from the matched pairs it recorded.
/// A pair ending in a receive completion is attributed to its initiation.
pub fn detector_sets(g: &EventGraph) -> CommSets {
    let pairs: Vec<(EventId, EventId)> = g
        .message_pairs()
        .into_iter()
        .map(|(s, r)| match g.event(r).map(|e| e.kind.base()) {
            Some(EventKind::RecvComplete) => {
                let init = g
                    .incoming(r, RelationKind::Nonblocking)
                    .next()
                    .expect("completion has an initiation");
                (s, init)
            }
            _ => (s, r),
        })
        .collect();
    let matched: BTreeSet<EventId> = pairs.iter().flat_map(|(s, r)| [*s, *r]).collect();
    let isolated = g
        .events()
        .filter(|e| is_send(e) || is_recv(e))
        .map(|e| e.id)
        .filter(|id| !matched.contains(id))
        .collect();
    let truncated = pairs
        .iter()
        .filter(|(s, r)| truncates(g.event(*s).unwrap(), g.event(*r).unwrap()))
        .flat_map(|(s, r)| [*s, *r])
        .collect();
    CommSets {
        isolated,
        truncated,
    }
}

struct Search<'a> {
    sends: Vec<&'a Event>,
    recvs: Vec<&'a Event>,
    target: &'a CommSets,
    /// recv index -> send index
    assign: Vec<Option<usize>>,
    used: Vec<Option<usize>>,
    nodes: u64,
    limit: u64,
}

impl Search<'_> {
    /// Receive ordering and non-overtaking for the pair (s, r), given that
    /// every receive before `r` on its rank is already decided.
    fn locally_valid(&self, si: usize, ri: usize) -> bool {
        let s = self.sends[si];
        let r = self.recvs[ri];
        // An earlier receive that would also take `s` must be matched.
        for (rj, r1) in self.recvs.iter().enumerate().take(ri) {
            if r1.id.rank == r.id.rank && compatible(s, r1) && self.assign[rj].is_none() {
                return false;
            }
        }
        // An earlier send on the same channel that `r` would also take must
        // already be matched to an earlier receive.
        for (sj, s1) in self.sends.iter().enumerate() {
            if s1.id.rank == s.id.rank && s1.id.seq < s.id.seq && compatible(s1, r) {
                match self.used[sj] {
                    Some(rk) if self.recvs[rk].id.rank == r.id.rank && rk < ri => {}
                    Some(_) => return false,
                    None if ready(s1) && self.target.isolated.contains(&s1.id) => {}
                    None => return false,
                }
            }
        }
        true
    }

    fn complete_valid(&self) -> bool {
        for (si, s) in self.sends.iter().enumerate() {
            let want_isolated = self.target.isolated.contains(&s.id);
            if want_isolated != self.used[si].is_none() {
                return false;
            }
            if self.used[si].is_none() && !ready(s) {
                for (ri, r) in self.recvs.iter().enumerate() {
                    if self.assign[ri].is_none() && compatible(s, r) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn go(&mut self, ri: usize) -> Option<bool> {
        self.nodes += 1;
        if self.nodes > self.limit {
            return None;
        }
        if ri == self.recvs.len() {
            return Some(self.complete_valid());
        }
        let r = self.recvs[ri];
        if self.target.isolated.contains(&r.id) {
            self.assign[ri] = None;
            return self.go(ri + 1);
        }
        let r_trunc = self.target.truncated.contains(&r.id);
        for si in 0..self.sends.len() {
            let s = self.sends[si];
            if self.used[si].is_some()
                || self.target.isolated.contains(&s.id)
                || !compatible(s, r)
                || truncates(s, r) != r_trunc
                || truncates(s, r) != self.target.truncated.contains(&s.id)
            {
                continue;
            }
            if !self.locally_valid(si, ri) {
                continue;
            }
            self.assign[ri] = Some(si);
            self.used[si] = Some(ri);
            match self.go(ri + 1) {
                Some(true) => return Some(true),
                None => return None,
                Some(false) => {}
            }
            self.assign[ri] = None;
            self.used[si] = None;
        }
        Some(false)
    }
}

/// Searches for a valid matching of the graph's communication events whose
/// unmatched and truncated event sets equal `target`. A matching is valid
/// when pairs are compatible, each event is used once, earlier receives on a
/// rank are served first, messages on one channel do not overtake, and no
/// compatible pair is left unmatched (ready-mode sends excepted).
pub fn matching_exists(g: &EventGraph, target: &CommSets, limit: u64) -> Verdict {
    let mut sends: Vec<&Event> = g.events().filter(|e| is_send(e)).collect();
    let mut recvs: Vec<&Event> = g.events().filter(|e| is_recv(e)).collect();
    sends.sort_by_key(|e| e.id);
    recvs.sort_by_key(|e| e.id);
    let mut search = Search {
        assign: vec![None; recvs.len()],
        used: vec![None; sends.len()],
        sends,
        recvs,
        target,
        nodes: 0,
        limit,
    };
    match search.go(0) {
        Some(true) => Verdict::Agree,
        Some(false) => Verdict::Disagree(describe(target)),
        None => Verdict::Inconclusive,
    }
}

fn describe(t: &CommSets) -> String {
    let show = |s: &BTreeSet<EventId>| {
        s.iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "no valid matching with isolated = [{}], truncated = [{}]",
        show(&t.isolated),
        show(&t.truncated)
    )
}

/// Failure events plus their direct predecessors, from the edge list.
pub fn default_view_oracle(g: &EventGraph) -> BTreeSet<EventId> {
    let failures: BTreeSet<EventId> = g
        .events()
        .filter(|e| e.is_failure())
        .map(|e| e.id)
        .collect();
    let mut keep = failures.clone();
    for edge in g.edges() {
        if failures.contains(&edge.to) {
            keep.insert(edge.from);
        }
    }
    keep
}
