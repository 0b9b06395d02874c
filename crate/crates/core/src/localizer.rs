//! Faulty-process localization by backtracing communication dependencies
//! from each process's failure event.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::event_graph::{ErrorReason, EventGraph, EventId, ProcessRank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureSituation {
    CalculationFault,
    NonOccurredEvent,
    Deadlock,
    BufferOverflow,
}

impl FailureSituation {
    pub fn name(self) -> &'static str {
        match self {
            FailureSituation::CalculationFault => "calculation fault",
            FailureSituation::NonOccurredEvent => "non-occurred event",
            FailureSituation::Deadlock => "deadlock",
            FailureSituation::BufferOverflow => "buffer overflow",
        }
    }
}

impl fmt::Display for FailureSituation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of one backtrace call. The integer encoding (0, negative counts,
/// a rank) is ambiguous for rank 0, so each case gets its own variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backtrace {
    /// Already traced or valid.
    Clear,
    /// Calculation fault (-1) or non-occurred event (-2), counted up toward
    /// zero on the way back.
    Negative(i32),
    /// The chain closed on this rank.
    Closes(ProcessRank),
}

/// How a backtrace chain ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainEnd {
    Calculation {
        failure: EventId,
    },
    NonOccurred {
        waiting: EventId,
    },
    /// `from` named the rank owning `to`, which was already on the chain.
    Closed {
        from: EventId,
        to: EventId,
    },
    /// The failure's partner could not be resolved.
    Unresolved {
        failure: EventId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultyGroup {
    pub ranks: BTreeSet<ProcessRank>,
    pub situation: FailureSituation,
    /// Failure events along the chain, in visiting order.
    pub evidence: Vec<EventId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub faulty: BTreeSet<ProcessRank>,
    pub failure_events: BTreeMap<ProcessRank, Option<EventId>>,
    pub groups: Vec<FaultyGroup>,
    pub unlocalizable: bool,
    pub unlocalizable_reason: Option<String>,
    pub diagnostics: Vec<String>,
}

/// Backtracing context: `P_e`, `E_e` and the bookkeeping for the chain being
/// traced.
#[derive(Debug)]
pub struct Localizer<'g> {
    graph: &'g EventGraph,
    failures: BTreeMap<ProcessRank, Option<EventId>>,
    faulty: BTreeSet<ProcessRank>,
    end: Option<ChainEnd>,
    chain: Vec<EventId>,
    diagnostics: Vec<String>,
}

impl<'g> Localizer<'g> {
    /// Stage 1: the failure event of every rank.
    pub fn new(graph: &'g EventGraph) -> Self {
        let mut failures: BTreeMap<ProcessRank, Option<EventId>> =
            graph.ranks().map(|r| (r, None)).collect();
        let mut diagnostics = Vec::new();
        for e in graph.events().filter(|e| e.is_failure()) {
            let slot = failures.entry(e.id.rank).or_default();
            match slot {
                None => *slot = Some(e.id),
                Some(first) => diagnostics.push(format!(
                    "rank {} has several failure events; using {first}, ignoring {}",
                    e.id.rank, e.id
                )),
            }
        }
        Self {
            graph,
            failures,
            faulty: BTreeSet::new(),
            end: None,
            chain: Vec::new(),
            diagnostics,
        }
    }

    pub fn failure_events(&self) -> &BTreeMap<ProcessRank, Option<EventId>> {
        &self.failures
    }

    pub fn faulty(&self) -> &BTreeSet<ProcessRank> {
        &self.faulty
    }

    fn fe(&self, p: ProcessRank) -> Option<EventId> {
        self.failures.get(&p).copied().flatten()
    }

    /// `ptnr(fe_p)`. Wildcard receives resolve to their actual sender when
    /// one was matched.
    fn partner(&self, fe: EventId) -> Result<ProcessRank, String> {
        let e = self.graph.event(fe).expect("failure event in graph");
        let declared = e.partner.and_then(|p| p.rank());
        let rank = match declared {
            Some(r) => r,
            None => {
                let matched = if e.kind.is_send_side() {
                    None
                } else {
                    self.graph.matched_send(fe)
                };
                match matched {
                    Some(send) => send.rank,
                    None => {
                        return Err(format!(
                            "{fe} on rank {} has a wildcard partner and no matched sender",
                            fe.rank
                        ))
                    }
                }
            }
        };
        if rank.0 >= self.graph.process_count() {
            return Err(format!(
                "{fe} on rank {}: invalid partner rank {rank}",
                fe.rank
            ));
        }
        Ok(rank)
    }

    /// One call of the recursive backtrace from `p` with call history
    /// `dep`.
    pub fn backtrace_comm_dep(&mut self, p: ProcessRank, dep: &BTreeSet<ProcessRank>) -> Backtrace {
        let fe = self.fe(p);
        if self.faulty.contains(&p) || (fe.is_none() && dep.is_empty()) {
            return Backtrace::Clear;
        }
        let Some(fe) = fe else {
            let waiting = *self.chain.last().expect("nonempty history has a chain");
            self.end = Some(ChainEnd::NonOccurred { waiting });
            return Backtrace::Negative(-2);
        };
        if self
            .graph
            .event(fe)
            .is_some_and(|e| e.kind.is_calculation())
        {
            self.chain.push(fe);
            self.end = Some(ChainEnd::Calculation { failure: fe });
            return Backtrace::Negative(-1);
        }
        if dep.contains(&p) {
            let from = *self.chain.last().expect("closing chain has a caller");
            self.end = Some(ChainEnd::Closed { from, to: fe });
            return Backtrace::Closes(p);
        }
        self.chain.push(fe);
        let q = match self.partner(fe) {
            Ok(q) => q,
            Err(msg) => {
                self.diagnostics.push(msg);
                self.end = Some(ChainEnd::Unresolved { failure: fe });
                self.faulty.insert(p);
                return Backtrace::Clear;
            }
        };
        let mut next = dep.clone();
        next.insert(p);
        let retval = self.backtrace_comm_dep(q, &next);
        if retval != Backtrace::Clear {
            self.faulty.insert(q);
        }
        match retval {
            Backtrace::Closes(r) if r == p => Backtrace::Clear,
            Backtrace::Negative(-1) => Backtrace::Clear,
            Backtrace::Negative(n) => Backtrace::Negative(n + 1),
            other => other,
        }
    }
}

/// Situation of a chain from the way it ended.
pub fn classify(end: &ChainEnd, graph: &EventGraph, evidence: &[EventId]) -> FailureSituation {
    match *end {
        ChainEnd::Calculation { .. } => FailureSituation::CalculationFault,
        ChainEnd::NonOccurred { .. } | ChainEnd::Unresolved { .. } => {
            FailureSituation::NonOccurredEvent
        }
        ChainEnd::Closed { from, to } => {
            let pair_truncated = [(from, to), (to, from)]
                .into_iter()
                .any(|(s, r)| graph.is_truncated(s, r).unwrap_or(false));
            let reason_truncated = evidence.iter().any(|id| {
                graph.event(*id).and_then(|e| e.error_reason()) == Some(ErrorReason::Truncated)
            });
            if pair_truncated || reason_truncated {
                FailureSituation::BufferOverflow
            } else {
                FailureSituation::Deadlock
            }
        }
    }
}

/// Localizes faulty processes over all ranks of `graph`.
/// `terminated_abnormally` marks runs that failed without leaving failure
/// events, which cannot be localized.
pub fn localize(graph: &EventGraph, terminated_abnormally: bool) -> LocalizationReport {
    let mut ctx = Localizer::new(graph);
    let mut groups = Vec::new();
    for p in graph.ranks() {
        let before = ctx.faulty.clone();
        ctx.end = None;
        ctx.chain.clear();
        if ctx.backtrace_comm_dep(p, &BTreeSet::new()) != Backtrace::Clear {
            ctx.faulty.insert(p);
        }
        let ranks: BTreeSet<ProcessRank> = ctx.faulty.difference(&before).copied().collect();
        if ranks.is_empty() {
            continue;
        }
        let end = ctx.end.expect("new faulty ranks come from a base case");
        groups.push(FaultyGroup {
            situation: classify(&end, graph, &ctx.chain),
            ranks,
            evidence: ctx.chain.clone(),
        });
    }
    let no_failures = ctx.failures.values().all(Option::is_none);
    let unlocalizable = terminated_abnormally && no_failures;
    LocalizationReport {
        faulty: ctx.faulty,
        failure_events: ctx.failures,
        groups,
        unlocalizable,
        unlocalizable_reason: unlocalizable.then(|| "no failure events recorded".to_string()),
        diagnostics: ctx.diagnostics,
    }
}

impl LocalizationReport {
    /// Multi-line human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let ranks = |set: &BTreeSet<ProcessRank>| {
            set.iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        if self.faulty.is_empty() && !self.unlocalizable {
            out.push_str("no faulty processes\n");
        } else {
            out.push_str(&format!("faulty processes: {{{}}}\n", ranks(&self.faulty)));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let ev: Vec<String> = g.evidence.iter().map(|e| e.to_string()).collect();
            out.push_str(&format!(
                "group {}: {{{}}} {} (evidence: {})\n",
                i + 1,
                ranks(&g.ranks),
                g.situation,
                ev.join(" ")
            ));
        }
        for (r, fe) in &self.failure_events {
            if let Some(fe) = fe {
                out.push_str(&format!("failure event on rank {r}: {fe}\n"));
            }
        }
        if let Some(reason) = &self.unlocalizable_reason {
            out.push_str(&format!("unlocalizable: {reason}\n"));
        }
        for d in &self.diagnostics {
            out.push_str(&format!("note: {d}\n"));
        }
        out
    }

    /// Convenience for a single-group report.
    pub fn situation(&self) -> Option<FailureSituation> {
        match self.groups.as_slice() {
            [g] => Some(g.situation),
            _ => None,
        }
    }
}

impl Backtrace {
    pub fn is_fault(self) -> bool {
        self != Backtrace::Clear
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{run, SimConfig};
    use crate::scenario::Scenario;

    fn outcome(text: &str) -> (EventGraph, bool) {
        let s = Scenario::parse(text, "t.scn").unwrap();
        let out = run(
            &s,
            &SimConfig {
                timeout_ticks: 40,
                ..SimConfig::default()
            },
        );
        (out.graph, out.terminated_abnormally)
    }

    fn set(r: &[u32]) -> BTreeSet<ProcessRank> {
        r.iter().map(|&x| ProcessRank(x)).collect()
    }

    const CHAIN: &str = "processes 3\nproc 0:\n recv from 1 tag 0 len 1\n\
        proc 1:\n recv from 2 tag 0 len 1\n ssend to 0 tag 0 len 1\nproc 2:\n compute 2\n crash\n";
    const REDUNDANT: &str =
        "processes 2\nproc 0:\n recv from 1 tag 0 len 1\n recv from 1 tag 0 len 1\n\
        proc 1:\n ssend to 0 tag 0 len 1\n";
    const CYCLE: &str = "processes 3\nproc 0:\n ssend to 1 tag 0 len 1\n recv from 2 tag 0 len 1\n\
        proc 1:\n ssend to 2 tag 0 len 1\n recv from 0 tag 0 len 1\n\
        proc 2:\n ssend to 0 tag 0 len 1\n recv from 1 tag 0 len 1\n";
    const OVERFLOW: &str =
        "processes 2\nproc 0:\n ssend to 1 tag 0 len 8\nproc 1:\n recv from 0 tag 0 len 4\n";

    #[test]
    fn calculation_fault_chain() {
        let (g, abnormal) = outcome(CHAIN);
        let rep = localize(&g, abnormal);
        assert_eq!(rep.faulty, set(&[2]));
        assert_eq!(rep.situation(), Some(FailureSituation::CalculationFault));
    }

    #[test]
    fn chain_head_call_returns_clear() {
        let (g, _) = outcome(CHAIN);
        let mut ctx = Localizer::new(&g);
        assert_eq!(
            ctx.backtrace_comm_dep(ProcessRank(0), &BTreeSet::new()),
            Backtrace::Clear
        );
        assert_eq!(ctx.faulty(), &set(&[2]));
    }

    #[test]
    fn non_occurred_pair() {
        let (g, abnormal) = outcome(REDUNDANT);
        let mut ctx = Localizer::new(&g);
        assert_eq!(
            ctx.backtrace_comm_dep(ProcessRank(0), &BTreeSet::new()),
            Backtrace::Negative(-1)
        );
        let rep = localize(&g, abnormal);
        assert_eq!(rep.faulty, set(&[0, 1]));
        assert_eq!(rep.situation(), Some(FailureSituation::NonOccurredEvent));
    }

    #[test]
    fn three_cycle_deadlock() {
        let (g, abnormal) = outcome(CYCLE);
        let mut ctx = Localizer::new(&g);
        assert_eq!(
            ctx.backtrace_comm_dep(ProcessRank(0), &BTreeSet::new()),
            Backtrace::Clear
        );
        assert_eq!(ctx.faulty(), &set(&[0, 1, 2]));
        let rep = localize(&g, abnormal);
        assert_eq!(rep.faulty, set(&[0, 1, 2]));
        assert_eq!(rep.situation(), Some(FailureSituation::Deadlock));
    }

    #[test]
    fn truncated_pair_overflow() {
        let (g, abnormal) = outcome(OVERFLOW);
        let rep = localize(&g, abnormal);
        assert_eq!(rep.faulty, set(&[0, 1]));
        assert_eq!(rep.situation(), Some(FailureSituation::BufferOverflow));
    }

    #[test]
    fn clean_run_has_no_faults() {
        let (g, abnormal) = outcome(
            "processes 2\nproc 0:\n ssend to 1 tag 0 len 1\nproc 1:\n recv from 0 tag 0 len 1\n",
        );
        let rep = localize(&g, abnormal);
        assert!(rep.faulty.is_empty());
        assert!(rep.groups.is_empty());
        assert!(!rep.unlocalizable);
    }

    #[test]
    fn idempotent() {
        let (g, abnormal) = outcome(CYCLE);
        assert_eq!(localize(&g, abnormal), localize(&g, abnormal));
    }

    #[test]
    fn silent_crash_is_unlocalizable() {
        let s = Scenario::parse("processes 1\nproc 0:\n crash\n", "t.scn").unwrap();
        let out = run(
            &s,
            &SimConfig {
                silent_crash: true,
                ..SimConfig::default()
            },
        );
        let rep = localize(&out.graph, out.terminated_abnormally);
        assert!(rep.unlocalizable);
        assert!(rep.faulty.is_empty());
    }

    #[test]
    fn invalid_partner_marks_caller() {
        let (g, abnormal) =
            outcome("processes 2\nproc 0:\n ssend to 5 tag 0 len 1\nproc 1:\n compute 1\n");
        let rep = localize(&g, abnormal);
        assert_eq!(rep.faulty, set(&[0]));
        assert_eq!(rep.diagnostics.len(), 1);
    }
}
