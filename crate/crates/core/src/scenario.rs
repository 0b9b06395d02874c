//! Scenario language: per-process scripts of message-passing calls.
//!
//! ```text
//! processes 2
//! proc 0:
//!   ssend to 1 tag 0 len 4
//! proc 1:
//!   recv from 0 tag 0 len 4   # comment
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use thiserror::Error;

use crate::event_graph::{Partner, ProcessRank, SendMode, Tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatementKind {
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
    WaitAll {
        handles: Vec<String>,
    },
    Compute {
        ticks: u64,
    },
    /// Unconditional abnormal termination of the process.
    Crash,
    Bcast {
        root: ProcessRank,
        len: u64,
    },
    Gather {
        root: ProcessRank,
        len: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub kind: StatementKind,
    /// Routine name as written (`sendrecv` for its desugared pieces).
    pub routine: String,
    pub line: u32,
}

impl Statement {
    pub fn new(kind: StatementKind, line: u32) -> Self {
        let routine = default_routine(&kind).to_string();
        Self {
            kind,
            routine,
            line,
        }
    }
}

fn default_routine(kind: &StatementKind) -> &'static str {
    match kind {
        StatementKind::Send { mode, .. } => match mode {
            SendMode::Standard => "send",
            SendMode::Buffered => "bsend",
            SendMode::Synchronous => "ssend",
            SendMode::Ready => "rsend",
        },
        StatementKind::Recv { .. } => "recv",
        StatementKind::ISend { .. } => "isend",
        StatementKind::IRecv { .. } => "irecv",
        StatementKind::Wait { .. } => "wait",
        StatementKind::WaitAll { .. } => "waitall",
        StatementKind::Compute { .. } => "compute",
        StatementKind::Crash => "crash",
        StatementKind::Bcast { .. } => "bcast",
        StatementKind::Gather { .. } => "gather",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    /// File name recorded in event source locations.
    pub file: String,
    pub process_count: u32,
    pub scripts: Vec<Vec<Statement>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: u32, message: String },
    #[error("line {line}: handle `{handle}` used before it was introduced")]
    UndefinedHandle { line: u32, handle: String },
    #[error("line {line}: handle `{handle}` introduced twice")]
    DuplicateHandle { line: u32, handle: String },
    #[error("line {line}: negative length")]
    NegativeLength { line: u32 },
    #[error("line {line}: compute duration must be at least 1 tick")]
    ZeroDuration { line: u32 },
    #[error("line {line}: proc {rank} declared twice")]
    DuplicateProc { line: u32, rank: u32 },
    #[error("line {line}: proc {rank} outside 0..{process_count}")]
    ProcOutOfRange {
        line: u32,
        rank: u32,
        process_count: u32,
    },
    #[error("missing `processes <N>` header")]
    MissingHeader,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    InvalidRank {
        rank: ProcessRank,
        line: u32,
        target: ProcessRank,
    },
    InconsistentRoot {
        collective: String,
        index: usize,
        roots: BTreeMap<ProcessRank, ProcessRank>,
    },
    CollectiveMismatch {
        index: usize,
        detail: String,
    },
    UnwaitedHandle {
        rank: ProcessRank,
        line: u32,
        handle: String,
    },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::InvalidRank { rank, line, target } => {
                write!(f, "proc {rank} line {line}: invalid rank {target}")
            }
            Warning::InconsistentRoot {
                collective,
                index,
                roots,
            } => {
                write!(f, "{collective} #{index}: inconsistent root (")?;
                for (i, (r, root)) in roots.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "proc {r}: {root}")?;
                }
                f.write_str(")")
            }
            Warning::CollectiveMismatch { index, detail } => {
                write!(f, "collective #{index}: {detail}")
            }
            Warning::UnwaitedHandle { rank, line, handle } => {
                write!(
                    f,
                    "proc {rank} line {line}: handle `{handle}` is never waited on"
                )
            }
        }
    }
}

struct Tokens<'a> {
    words: Vec<&'a str>,
    pos: usize,
    line: u32,
}

impl<'a> Tokens<'a> {
    fn err(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Syntax {
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, ScenarioError> {
        let w = self
            .words
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(format!("expected {what}")))?;
        self.pos += 1;
        Ok(w)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ScenarioError> {
        let w = self.next(&format!("`{kw}`"))?;
        if w != kw {
            return Err(self.err(format!("expected `{kw}`, found `{w}`")));
        }
        Ok(())
    }

    fn int(&mut self, what: &str) -> Result<i64, ScenarioError> {
        let w = self.next(what)?;
        w.parse::<i64>()
            .map_err(|_| self.err(format!("expected {what}, found `{w}`")))
    }

    fn rank(&mut self) -> Result<ProcessRank, ScenarioError> {
        let v = self.int("rank")?;
        u32::try_from(v)
            .map(ProcessRank)
            .map_err(|_| self.err(format!("invalid rank {v}")))
    }

    fn partner(&mut self) -> Result<Partner, ScenarioError> {
        if self.words.get(self.pos) == Some(&"any") {
            self.pos += 1;
            return Ok(Partner::Any);
        }
        Ok(Partner::Rank(self.rank()?))
    }

    fn tag(&mut self) -> Result<i64, ScenarioError> {
        let v = self.int("tag")?;
        if v < 0 {
            return Err(self.err("tags must be non-negative"));
        }
        Ok(v)
    }

    fn tag_or_any(&mut self) -> Result<Tag, ScenarioError> {
        if self.words.get(self.pos) == Some(&"any") {
            self.pos += 1;
            return Ok(Tag::Any);
        }
        Ok(Tag::Value(self.tag()?))
    }

    fn len(&mut self) -> Result<u64, ScenarioError> {
        let v = self.int("length")?;
        if v < 0 {
            return Err(ScenarioError::NegativeLength { line: self.line });
        }
        Ok(v as u64)
    }

    fn finish(&self) -> Result<(), ScenarioError> {
        match self.words.get(self.pos) {
            None => Ok(()),
            Some(w) => Err(self.err(format!("unexpected `{w}`"))),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(code, _)| code)
}

fn parse_statement(t: &mut Tokens<'_>) -> Result<Vec<Statement>, ScenarioError> {
    let line = t.line;
    let kw = t.next("statement")?;
    let one = |kind| Ok(vec![Statement::new(kind, line)]);
    let stmt = match kw {
        "send" | "bsend" | "ssend" | "rsend" => {
            let mode = match kw {
                "send" => SendMode::Standard,
                "bsend" => SendMode::Buffered,
                "ssend" => SendMode::Synchronous,
                _ => SendMode::Ready,
            };
            t.keyword("to")?;
            let dst = t.rank()?;
            t.keyword("tag")?;
            let tag = t.tag()?;
            t.keyword("len")?;
            let len = t.len()?;
            StatementKind::Send {
                dst,
                tag,
                len,
                mode,
            }
        }
        "recv" => {
            t.keyword("from")?;
            let src = t.partner()?;
            t.keyword("tag")?;
            let tag = t.tag_or_any()?;
            t.keyword("len")?;
            let len = t.len()?;
            StatementKind::Recv { src, tag, len }
        }
        "isend" => {
            t.keyword("to")?;
            let dst = t.rank()?;
            t.keyword("tag")?;
            let tag = t.tag()?;
            t.keyword("len")?;
            let len = t.len()?;
            t.keyword("handle")?;
            let handle = t.next("handle")?.to_string();
            StatementKind::ISend {
                dst,
                tag,
                len,
                handle,
            }
        }
        "irecv" => {
            t.keyword("from")?;
            let src = t.partner()?;
            t.keyword("tag")?;
            let tag = t.tag_or_any()?;
            t.keyword("len")?;
            let len = t.len()?;
            t.keyword("handle")?;
            let handle = t.next("handle")?.to_string();
            StatementKind::IRecv {
                src,
                tag,
                len,
                handle,
            }
        }
        "sendrecv" => {
            t.keyword("to")?;
            let dst = t.rank()?;
            t.keyword("tag")?;
            let stag = t.tag()?;
            t.keyword("len")?;
            let slen = t.len()?;
            t.keyword("from")?;
            let src = t.partner()?;
            t.keyword("tag")?;
            let rtag = t.tag_or_any()?;
            t.keyword("len")?;
            let rlen = t.len()?;
            t.finish()?;
            let hs = format!("sendrecv@{line}.s");
            let hr = format!("sendrecv@{line}.r");
            let mk = |kind| Statement {
                kind,
                routine: "sendrecv".to_string(),
                line,
            };
            return Ok(vec![
                mk(StatementKind::ISend {
                    dst,
                    tag: stag,
                    len: slen,
                    handle: hs.clone(),
                }),
                mk(StatementKind::IRecv {
                    src,
                    tag: rtag,
                    len: rlen,
                    handle: hr.clone(),
                }),
                mk(StatementKind::WaitAll {
                    handles: vec![hs, hr],
                }),
            ]);
        }
        "wait" => StatementKind::Wait {
            handle: t.next("handle")?.to_string(),
        },
        "waitall" => {
            let handles: Vec<String> = t.words[t.pos..].iter().map(|s| s.to_string()).collect();
            if handles.is_empty() {
                return Err(t.err("waitall needs at least one handle"));
            }
            t.pos = t.words.len();
            StatementKind::WaitAll { handles }
        }
        "compute" => {
            let ticks = t.int("ticks")?;
            if ticks < 1 {
                return Err(ScenarioError::ZeroDuration { line });
            }
            StatementKind::Compute {
                ticks: ticks as u64,
            }
        }
        "crash" => StatementKind::Crash,
        "bcast" | "gather" => {
            t.keyword("root")?;
            let root = t.rank()?;
            t.keyword("len")?;
            let len = t.len()?;
            if kw == "bcast" {
                StatementKind::Bcast { root, len }
            } else {
                StatementKind::Gather { root, len }
            }
        }
        other => return Err(t.err(format!("unknown statement `{other}`"))),
    };
    t.finish()?;
    one(stmt)
}

fn check_handles(script: &[Statement]) -> Result<(), ScenarioError> {
    let mut introduced = BTreeSet::new();
    let mut waited = BTreeSet::new();
    for s in script {
        match &s.kind {
            StatementKind::ISend { handle, .. } | StatementKind::IRecv { handle, .. } => {
                if !introduced.insert(handle.clone()) {
                    return Err(ScenarioError::DuplicateHandle {
                        line: s.line,
                        handle: handle.clone(),
                    });
                }
            }
            StatementKind::Wait { handle } => {
                use_handle(&introduced, &mut waited, handle, s.line)?;
            }
            StatementKind::WaitAll { handles } => {
                for h in handles {
                    use_handle(&introduced, &mut waited, h, s.line)?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn use_handle(
    introduced: &BTreeSet<String>,
    waited: &mut BTreeSet<String>,
    handle: &str,
    line: u32,
) -> Result<(), ScenarioError> {
    // A completed handle is gone; waiting on it again is the same mistake as
    // waiting on one that never existed.
    if !introduced.contains(handle) || !waited.insert(handle.to_string()) {
        return Err(ScenarioError::UndefinedHandle {
            line,
            handle: handle.to_string(),
        });
    }
    Ok(())
}

impl Scenario {
    /// Parses scenario text; `file` names the source for event locations.
    pub fn parse(text: &str, file: &str) -> Result<Scenario, ScenarioError> {
        let mut process_count: Option<u32> = None;
        let mut scripts: Vec<Option<Vec<Statement>>> = Vec::new();
        let mut current: Option<usize> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx as u32 + 1;
            let code = strip_comment(raw).trim();
            if code.is_empty() {
                continue;
            }
            let mut t = Tokens {
                words: code.split_whitespace().collect(),
                pos: 0,
                line,
            };
            let Some(n) = process_count else {
                t.keyword("processes")?;
                let n = t.int("process count")?;
                if n < 1 || n > u32::MAX as i64 {
                    return Err(t.err("process count must be positive"));
                }
                t.finish()?;
                process_count = Some(n as u32);
                scripts = vec![None; n as usize];
                continue;
            };
            if t.words[0] == "proc" {
                t.pos = 1;
                let w = t.next("rank")?;
                let r = w
                    .strip_suffix(':')
                    .unwrap_or(w)
                    .parse::<u32>()
                    .map_err(|_| t.err(format!("bad proc header `{code}`")))?;
                if !w.ends_with(':') {
                    t.keyword(":")?;
                }
                t.finish()?;
                if r >= n {
                    return Err(ScenarioError::ProcOutOfRange {
                        line,
                        rank: r,
                        process_count: n,
                    });
                }
                if scripts[r as usize].is_some() {
                    return Err(ScenarioError::DuplicateProc { line, rank: r });
                }
                scripts[r as usize] = Some(Vec::new());
                current = Some(r as usize);
                continue;
            }
            let Some(cur) = current else {
                return Err(t.err("statement outside a `proc <r>:` block"));
            };
            let stmts = parse_statement(&mut t)?;
            scripts[cur].as_mut().expect("current script").extend(stmts);
        }
        let process_count = process_count.ok_or(ScenarioError::MissingHeader)?;
        let scripts: Vec<Vec<Statement>> =
            scripts.into_iter().map(Option::unwrap_or_default).collect();
        for s in &scripts {
            check_handles(s)?;
        }
        let name = Path::new(file)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(file)
            .to_string();
        Ok(Scenario {
            name,
            file: file.to_string(),
            process_count,
            scripts,
        })
    }

    /// Canonical text form; parsing it yields the same statements.
    pub fn to_text(&self) -> String {
        let mut out = format!("processes {}\n", self.process_count);
        for (r, script) in self.scripts.iter().enumerate() {
            let _ = writeln!(out, "proc {r}:");
            for s in script {
                let _ = writeln!(out, "  {}", format_statement(&s.kind));
            }
        }
        out
    }

    /// Statically visible fault injections. Scenarios with warnings still run.
    pub fn validate(&self) -> Vec<Warning> {
        let mut warnings = Vec::new();
        let n = self.process_count;
        let mut collectives: Vec<Vec<(&'static str, ProcessRank)>> = Vec::new();
        for (r, script) in self.scripts.iter().enumerate() {
            let rank = ProcessRank(r as u32);
            let mut colls = Vec::new();
            let mut waited = BTreeSet::new();
            for s in script {
                match &s.kind {
                    StatementKind::WaitAll { handles } => waited.extend(handles.iter().cloned()),
                    StatementKind::Wait { handle } => {
                        waited.insert(handle.clone());
                    }
                    _ => {}
                }
            }
            for s in script {
                let target = match &s.kind {
                    StatementKind::Send { dst, .. } | StatementKind::ISend { dst, .. } => {
                        Some(*dst)
                    }
                    StatementKind::Recv { src, .. } | StatementKind::IRecv { src, .. } => {
                        src.rank()
                    }
                    StatementKind::Bcast { root, .. } => {
                        colls.push(("bcast", *root));
                        Some(*root)
                    }
                    StatementKind::Gather { root, .. } => {
                        colls.push(("gather", *root));
                        Some(*root)
                    }
                    _ => None,
                };
                if let Some(target) = target.filter(|t| t.0 >= n) {
                    warnings.push(Warning::InvalidRank {
                        rank,
                        line: s.line,
                        target,
                    });
                }
                if let StatementKind::ISend { handle, .. } | StatementKind::IRecv { handle, .. } =
                    &s.kind
                {
                    if !waited.contains(handle) {
                        warnings.push(Warning::UnwaitedHandle {
                            rank,
                            line: s.line,
                            handle: handle.clone(),
                        });
                    }
                }
            }
            collectives.push(colls);
        }
        let longest = collectives.iter().map(Vec::len).max().unwrap_or(0);
        for index in 0..longest {
            let present: BTreeMap<ProcessRank, (&str, ProcessRank)> = collectives
                .iter()
                .enumerate()
                .filter_map(|(r, c)| c.get(index).map(|x| (ProcessRank(r as u32), *x)))
                .collect();
            if present.len() as u32 != n {
                warnings.push(Warning::CollectiveMismatch {
                    index,
                    detail: format!("called by {} of {} processes", present.len(), n),
                });
            }
            let names: BTreeSet<&str> = present.values().map(|(k, _)| *k).collect();
            if names.len() > 1 {
                warnings.push(Warning::CollectiveMismatch {
                    index,
                    detail: format!(
                        "mixes {}",
                        names.into_iter().collect::<Vec<_>>().join(" and ")
                    ),
                });
                continue;
            }
            let roots: BTreeSet<ProcessRank> = present.values().map(|(_, r)| *r).collect();
            if roots.len() > 1 {
                warnings.push(Warning::InconsistentRoot {
                    collective: names.into_iter().next().unwrap_or_default().to_string(),
                    index,
                    roots: present.iter().map(|(r, (_, root))| (*r, *root)).collect(),
                });
            }
        }
        warnings
    }
}

pub fn format_statement(kind: &StatementKind) -> String {
    match kind {
        StatementKind::Send {
            dst,
            tag,
            len,
            mode,
        } => {
            let kw = default_routine(&StatementKind::Send {
                dst: *dst,
                tag: *tag,
                len: *len,
                mode: *mode,
            });
            format!("{kw} to {dst} tag {tag} len {len}")
        }
        StatementKind::Recv { src, tag, len } => format!("recv from {src} tag {tag} len {len}"),
        StatementKind::ISend {
            dst,
            tag,
            len,
            handle,
        } => format!("isend to {dst} tag {tag} len {len} handle {handle}"),
        StatementKind::IRecv {
            src,
            tag,
            len,
            handle,
        } => format!("irecv from {src} tag {tag} len {len} handle {handle}"),
        StatementKind::Wait { handle } => format!("wait {handle}"),
        StatementKind::WaitAll { handles } => format!("waitall {}", handles.join(" ")),
        StatementKind::Compute { ticks } => format!("compute {ticks}"),
        StatementKind::Crash => "crash".to_string(),
        StatementKind::Bcast { root, len } => format!("bcast root {root} len {len}"),
        StatementKind::Gather { root, len } => format!("gather root {root} len {len}"),
    }
}
