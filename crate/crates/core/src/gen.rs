//! Seeded random scenario generator with optional fault injection.
//!
//! The fault-free base is built from a global sequence of message pairs, so
//! every rank posts its side of pair k after its side of all earlier pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event_graph::{Partner, ProcessRank, SendMode, Tag};
use crate::scenario::{Scenario, Statement, StatementKind};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub min_ranks: u32,
    pub max_ranks: u32,
    pub max_statements: usize,
    pub fault_probability: f64,
    pub max_len: u64,
    /// Allow wildcard receives in the base program.
    pub wildcards: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_ranks: 2,
            max_ranks: 6,
            max_statements: 30,
            fault_probability: 0.3,
            max_len: 96,
            wildcards: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InjectedFault {
    DroppedRecv,
    ExtraSend,
    ShortRecv,
    Crash,
    SwappedStatements,
    InvalidRank,
    TagMismatch,
    UnwaitedHandle,
    ReadySend,
}

pub const ALL_FAULTS: [InjectedFault; 9] = [
    InjectedFault::DroppedRecv,
    InjectedFault::ExtraSend,
    InjectedFault::ShortRecv,
    InjectedFault::Crash,
    InjectedFault::SwappedStatements,
    InjectedFault::InvalidRank,
    InjectedFault::TagMismatch,
    InjectedFault::UnwaitedHandle,
    InjectedFault::ReadySend,
];

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub seed: u64,
    pub scenario: Scenario,
    /// The fault that was applied, if any. An injection that found nothing
    /// to modify leaves the program unchanged and reports `None`.
    pub fault: Option<InjectedFault>,
}

type Scripts = Vec<Vec<StatementKind>>;

struct Builder {
    rng: ChaCha8Rng,
    n: u32,
    scripts: Scripts,
    pending: Vec<Vec<String>>,
    handles: usize,
}

impl Builder {
    fn flush_some(&mut self, rank: usize, all: bool) {
        if self.pending[rank].is_empty() {
            return;
        }
        if all || self.pending[rank].len() == 1 {
            let handles = std::mem::take(&mut self.pending[rank]);
            let stmt = if handles.len() == 1 {
                StatementKind::Wait {
                    handle: handles[0].clone(),
                }
            } else {
                StatementKind::WaitAll { handles }
            };
            self.scripts[rank].push(stmt);
        } else {
            let i = self.rng.gen_range(0..self.pending[rank].len());
            let handle = self.pending[rank].remove(i);
            self.scripts[rank].push(StatementKind::Wait { handle });
        }
    }

    fn handle(&mut self) -> String {
        self.handles += 1;
        format!("h{}", self.handles)
    }

    fn pair(&mut self, max_len: u64, wildcards: bool) {
        let src = self.rng.gen_range(0..self.n);
        let mut dst = self.rng.gen_range(0..self.n - 1);
        if dst >= src {
            dst += 1;
        }
        let tag = self.rng.gen_range(0..3i64);
        let len = if self.rng.gen_bool(0.15) {
            self.rng.gen_range(65..=max_len.max(65))
        } else {
            self.rng.gen_range(1..=max_len.min(64))
        };
        let send = match self.rng.gen_range(0..4) {
            0 => StatementKind::Send {
                dst: ProcessRank(dst),
                tag,
                len,
                mode: SendMode::Synchronous,
            },
            1 => StatementKind::Send {
                dst: ProcessRank(dst),
                tag,
                len,
                mode: SendMode::Buffered,
            },
            2 => StatementKind::Send {
                dst: ProcessRank(dst),
                tag,
                len,
                mode: SendMode::Standard,
            },
            _ => {
                let handle = self.handle();
                self.pending[src as usize].push(handle.clone());
                StatementKind::ISend {
                    dst: ProcessRank(dst),
                    tag,
                    len,
                    handle,
                }
            }
        };
        let from = if wildcards && self.rng.gen_bool(0.1) {
            Partner::Any
        } else {
            Partner::Rank(ProcessRank(src))
        };
        let want = if wildcards && self.rng.gen_bool(0.1) {
            Tag::Any
        } else {
            Tag::Value(tag)
        };
        let recv = if self.rng.gen_bool(0.3) {
            let handle = self.handle();
            self.pending[dst as usize].push(handle.clone());
            StatementKind::IRecv {
                src: from,
                tag: want,
                len,
                handle,
            }
        } else {
            StatementKind::Recv {
                src: from,
                tag: want,
                len,
            }
        };
        self.scripts[src as usize].push(send);
        self.scripts[dst as usize].push(recv);
    }
}

fn positions(scripts: &Scripts, pred: impl Fn(&StatementKind) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (r, s) in scripts.iter().enumerate() {
        for (i, k) in s.iter().enumerate() {
            if pred(k) {
                out.push((r, i));
            }
        }
    }
    out
}

fn inject(rng: &mut ChaCha8Rng, scripts: &mut Scripts, n: u32, fault: InjectedFault) -> bool {
    let pick = |rng: &mut ChaCha8Rng, v: Vec<(usize, usize)>| v.choose(rng).copied();
    match fault {
        InjectedFault::DroppedRecv => {
            let Some((r, i)) = pick(
                rng,
                positions(scripts, |k| matches!(k, StatementKind::Recv { .. })),
            ) else {
                return false;
            };
            scripts[r].remove(i);
        }
        InjectedFault::ExtraSend => {
            let r = rng.gen_range(0..n) as usize;
            let mut dst = rng.gen_range(0..n - 1);
            if dst as usize >= r {
                dst += 1;
            }
            let at = rng.gen_range(0..=scripts[r].len());
            scripts[r].insert(
                at,
                StatementKind::Send {
                    dst: ProcessRank(dst),
                    tag: rng.gen_range(0..3),
                    len: rng.gen_range(1..=8),
                    mode: SendMode::Synchronous,
                },
            );
        }
        InjectedFault::ShortRecv => {
            let candidates = positions(
                scripts,
                |k| matches!(k, StatementKind::Recv { len, .. } | StatementKind::IRecv { len, .. } if *len >= 2),
            );
            let Some((r, i)) = pick(rng, candidates) else {
                return false;
            };
            if let StatementKind::Recv { len, .. } | StatementKind::IRecv { len, .. } =
                &mut scripts[r][i]
            {
                *len /= 2;
            }
        }
        InjectedFault::Crash => {
            let r = rng.gen_range(0..n) as usize;
            let at = rng.gen_range(0..=scripts[r].len());
            scripts[r].insert(at, StatementKind::Crash);
        }
        InjectedFault::SwappedStatements => {
            let movable = |k: &StatementKind| {
                matches!(
                    k,
                    StatementKind::Send { .. }
                        | StatementKind::Recv { .. }
                        | StatementKind::Compute { .. }
                )
            };
            let mut candidates = Vec::new();
            for (r, s) in scripts.iter().enumerate() {
                for i in 1..s.len() {
                    if movable(&s[i - 1]) && movable(&s[i]) {
                        candidates.push((r, i));
                    }
                }
            }
            let Some((r, i)) = pick(rng, candidates) else {
                return false;
            };
            scripts[r].swap(i - 1, i);
        }
        InjectedFault::InvalidRank => {
            let Some((r, i)) = pick(
                rng,
                positions(scripts, |k| matches!(k, StatementKind::Send { .. })),
            ) else {
                return false;
            };
            if let StatementKind::Send { dst, .. } = &mut scripts[r][i] {
                *dst = ProcessRank(n + rng.gen_range(0..3));
            }
        }
        InjectedFault::TagMismatch => {
            let candidates = positions(scripts, |k| {
                matches!(k, StatementKind::Send { .. } | StatementKind::ISend { .. })
            });
            let Some((r, i)) = pick(rng, candidates) else {
                return false;
            };
            if let StatementKind::Send { tag, .. } | StatementKind::ISend { tag, .. } =
                &mut scripts[r][i]
            {
                *tag += 100;
            }
        }
        InjectedFault::UnwaitedHandle => {
            let candidates = positions(scripts, |k| {
                matches!(
                    k,
                    StatementKind::Wait { .. } | StatementKind::WaitAll { .. }
                )
            });
            let Some((r, i)) = pick(rng, candidates) else {
                return false;
            };
            match &mut scripts[r][i] {
                StatementKind::WaitAll { handles } if handles.len() > 1 => {
                    let j = rng.gen_range(0..handles.len());
                    handles.remove(j);
                }
                _ => {
                    scripts[r].remove(i);
                }
            }
        }
        InjectedFault::ReadySend => {
            let Some((r, i)) = pick(
                rng,
                positions(scripts, |k| matches!(k, StatementKind::Send { .. })),
            ) else {
                return false;
            };
            if let StatementKind::Send { mode, .. } = &mut scripts[r][i] {
                *mode = SendMode::Ready;
            }
        }
    }
    true
}

/// Generates one scenario. Equal seeds and configs give equal scenarios.
pub fn generate(seed: u64, cfg: &GenConfig) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_ranks.max(2)..=cfg.max_ranks.max(cfg.min_ranks.max(2)));
    let mut b = Builder {
        rng,
        n,
        scripts: vec![Vec::new(); n as usize],
        pending: vec![Vec::new(); n as usize],
        handles: 0,
    };
    // Room for closing waits and one injected statement.
    let budget = cfg.max_statements.saturating_sub(3).max(2);
    let rounds = b.rng.gen_range(1..=budget);
    let full = |b: &Builder| {
        b.scripts
            .iter()
            .zip(&b.pending)
            .any(|(s, p)| s.len() + p.len().min(1) + 2 > budget)
    };
    for _ in 0..rounds {
        if full(&b) {
            break;
        }
        let roll = b.rng.gen_range(0..100);
        if roll < 10 {
            let r = b.rng.gen_range(0..n) as usize;
            let ticks = b.rng.gen_range(1..=3);
            b.scripts[r].push(StatementKind::Compute { ticks });
        } else if roll < 16 {
            let root = ProcessRank(b.rng.gen_range(0..n));
            let len = b.rng.gen_range(1..=cfg.max_len.max(1));
            let gather = b.rng.gen_bool(0.5);
            for s in &mut b.scripts {
                s.push(if gather {
                    StatementKind::Gather { root, len }
                } else {
                    StatementKind::Bcast { root, len }
                });
            }
        } else {
            b.pair(cfg.max_len.max(1), cfg.wildcards);
        }
        for r in 0..n as usize {
            if b.rng.gen_bool(0.3) {
                let all = b.rng.gen_bool(0.3);
                b.flush_some(r, all);
            }
        }
    }
    for r in 0..n as usize {
        b.flush_some(r, true);
    }
    let mut rng = b.rng;
    let mut scripts = b.scripts;
    let mut fault = None;
    if rng.gen_bool(cfg.fault_probability.clamp(0.0, 1.0)) {
        let f = *ALL_FAULTS.choose(&mut rng).expect("nonempty");
        if inject(&mut rng, &mut scripts, n, f) {
            fault = Some(f);
        }
    }
    let name = format!("gen-{seed}");
    let scenario = Scenario {
        name: name.clone(),
        file: format!("{name}.scn"),
        process_count: n,
        scripts: scripts
            .into_iter()
            .map(|s| s.into_iter().map(|k| Statement::new(k, 0)).collect())
            .collect(),
    };
    // Reparse to assign line numbers.
    let scenario = Scenario::parse(&scenario.to_text(), &scenario.file)
        .expect("generated scenarios are syntactically valid");
    Generated {
        seed,
        scenario,
        fault,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible() {
        let cfg = GenConfig::default();
        assert_eq!(generate(7, &cfg), generate(7, &cfg));
    }

    #[test]
    fn within_limits() {
        let cfg = GenConfig::default();
        let mut faults = 0;
        for seed in 0..300 {
            let g = generate(seed, &cfg);
            assert!((2..=6).contains(&g.scenario.process_count));
            for s in &g.scenario.scripts {
                assert!(s.len() <= 30, "seed {seed}: {} statements", s.len());
            }
            faults += usize::from(g.fault.is_some());
        }
        assert!((50..=130).contains(&faults), "{faults} faulty of 300");
    }
}
