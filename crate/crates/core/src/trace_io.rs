//! JSON-lines trace files.
//!
//! Line 1 is a header, followed by one line per event in `(time, rank, seq)`
//! order, one line per relation, and a final outcome line. Events are
//! referenced by their global number `no`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::event_graph::{
    Edge, ErrorReason, Event, EventGraph, EventId, EventKind, GraphError, Partner, ProcessRank,
    RelationKind, SendMode, SourceLoc, Status, Tag,
};
use crate::runtime::RunOutcome;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub scenario_name: String,
    pub process_count: u32,
    pub timeout_ticks: u64,
    pub generated_by: String,
}

impl TraceHeader {
    pub fn new(scenario_name: &str, process_count: u32, timeout_ticks: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            scenario_name: scenario_name.to_string(),
            process_count,
            timeout_ticks,
            generated_by: concat!("mppd ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub terminated_abnormally: bool,
    pub aborted_ranks: Vec<u32>,
    pub crash_outside_routines: Vec<u32>,
    /// Rank to source line where the rank was halted.
    pub abort_sites: BTreeMap<u32, u32>,
    pub final_tick: u64,
}

impl From<&RunOutcome> for OutcomeRecord {
    fn from(o: &RunOutcome) -> Self {
        Self {
            terminated_abnormally: o.terminated_abnormally,
            aborted_ranks: o.aborted_ranks.iter().map(|r| r.0).collect(),
            crash_outside_routines: o.crash_outside_routines.iter().map(|r| r.0).collect(),
            abort_sites: o.abort_sites.iter().map(|(r, l)| (r.0, *l)).collect(),
            final_tick: o.final_tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub graph: EventGraph,
    pub outcome: OutcomeRecord,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported trace format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: relation names unknown event number {no}")]
    Dangling { line: usize, no: usize },
    #[error("line {line}: {source}")]
    Graph {
        line: usize,
        #[source]
        source: GraphError,
    },
    #[error("trace is empty")]
    Empty,
    #[error("trace has no outcome line")]
    MissingOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EventRecord {
    no: usize,
    rank: u32,
    seq: u32,
    kind: String,
    routine: String,
    mode: Option<SendMode>,
    tag: Option<Value>,
    partner: Option<Value>,
    len: Option<u64>,
    file: String,
    line: u32,
    time: u64,
    status: String,
    reason: Option<ErrorReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    collective: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root: Option<u32>,
    /// Event number of the send matched by a receive initiation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matched: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RelationRecord {
    rel: [usize; 2],
    kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutcomeLine {
    outcome: OutcomeRecord,
}

fn kind_name(kind: &EventKind) -> &'static str {
    match kind.base() {
        EventKind::BlockingSend => "send",
        EventKind::BlockingRecv => "recv",
        EventKind::SendInit => "send_init",
        EventKind::SendComplete => "send_complete",
        EventKind::RecvInit => "recv_init",
        EventKind::RecvComplete => "recv_complete",
        _ => "calc",
    }
}

fn kind_from_name(name: &str) -> Option<EventKind> {
    Some(match name {
        "send" => EventKind::BlockingSend,
        "recv" => EventKind::BlockingRecv,
        "send_init" => EventKind::SendInit,
        "send_complete" => EventKind::SendComplete,
        "recv_init" => EventKind::RecvInit,
        "recv_complete" => EventKind::RecvComplete,
        "calc" => EventKind::Calculation,
        _ => return None,
    })
}

fn wild(v: Option<i64>) -> Value {
    v.map_or_else(|| Value::from("any"), Value::from)
}

/// Parses `int | "any"`; `Ok(None)` for "any".
fn parse_wild(v: &Value) -> Result<Option<i64>, String> {
    match v {
        Value::String(s) if s == "any" => Ok(None),
        Value::Number(n) => n
            .as_i64()
            .map(Some)
            .ok_or_else(|| format!("bad number {n}")),
        other => Err(format!("expected integer or \"any\", got {other}")),
    }
}

/// Global event numbering in `(time, rank, seq)` order.
pub fn event_numbers(graph: &EventGraph) -> Vec<EventId> {
    let mut ids: Vec<(u64, EventId)> = graph.events().map(|e| (e.logical_time, e.id)).collect();
    ids.sort();
    ids.into_iter().map(|(_, id)| id).collect()
}

fn relation_code(kind: RelationKind) -> &'static str {
    kind.code()
}

fn records(graph: &EventGraph) -> (Vec<EventRecord>, Vec<RelationRecord>) {
    let order = event_numbers(graph);
    let no: BTreeMap<EventId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let events = order
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let e = graph.event(*id).expect("numbered event");
            let (collective, root) = match e.kind.collective() {
                Some((name, root)) => (Some(name.to_string()), Some(root.0)),
                None => (None, None),
            };
            EventRecord {
                no: i,
                rank: id.rank.0,
                seq: id.seq,
                kind: kind_name(&e.kind).to_string(),
                routine: e.routine.clone(),
                mode: e.mode,
                tag: e.tag.map(|t| match t {
                    Tag::Value(v) => wild(Some(v)),
                    Tag::Any => wild(None),
                }),
                partner: e.partner.map(|p| wild(p.rank().map(|r| i64::from(r.0)))),
                len: e.buf_len,
                file: e.source.file.clone(),
                line: e.source.line,
                time: e.logical_time,
                status: if e.is_failure() { "failure" } else { "success" }.to_string(),
                reason: e.error_reason(),
                collective,
                root,
                matched: e.matched_send.and_then(|s| no.get(&s).copied()),
            }
        })
        .collect();
    let mut rels: Vec<(usize, usize, RelationKind)> = graph
        .edges()
        .map(|e| (no[&e.from], no[&e.to], e.kind))
        .collect();
    rels.sort();
    let relations = rels
        .into_iter()
        .map(|(a, b, kind)| RelationRecord {
            rel: [a, b],
            kind: relation_code(kind).to_string(),
        })
        .collect();
    (events, relations)
}

/// Writes the trace in canonical form; equal inputs give identical bytes.
pub fn write_trace(
    w: &mut impl Write,
    header: &TraceHeader,
    graph: &EventGraph,
    outcome: &OutcomeRecord,
) -> io::Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    let (events, relations) = records(graph);
    for rec in &events {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    for rec in &relations {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut *w,
        &OutcomeLine {
            outcome: outcome.clone(),
        },
    )?;
    w.write_all(b"\n")?;
    Ok(())
}

/// The same records as a single JSON document:
/// `{"header", "events", "relations", "outcome"}`.
pub fn trace_to_json(header: &TraceHeader, graph: &EventGraph, outcome: &OutcomeRecord) -> Value {
    let (events, relations) = records(graph);
    serde_json::json!({
        "header": header,
        "events": events,
        "relations": relations,
        "outcome": outcome,
    })
}

pub fn trace_to_string(
    header: &TraceHeader,
    graph: &EventGraph,
    outcome: &OutcomeRecord,
) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, header, graph, outcome).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn write_trace_file(
    path: &Path,
    header: &TraceHeader,
    graph: &EventGraph,
    outcome: &OutcomeRecord,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(&mut w, header, graph, outcome)?;
    w.flush()
}

fn malformed(line: usize, message: impl Into<String>) -> TraceError {
    TraceError::Malformed {
        line,
        message: message.into(),
    }
}

fn event_from_record(rec: EventRecord, line: usize) -> Result<Event, TraceError> {
    let base = kind_from_name(&rec.kind)
        .ok_or_else(|| malformed(line, format!("unknown event kind `{}`", rec.kind)))?;
    let kind = match (rec.collective, rec.root) {
        (Some(collective), Some(root)) => EventKind::CollectiveConstituent {
            collective,
            root: ProcessRank(root),
            inner: Box::new(base),
        },
        (None, None) => base,
        _ => {
            return Err(malformed(
                line,
                "`collective` and `root` must appear together",
            ))
        }
    };
    let tag = rec
        .tag
        .as_ref()
        .map(|v| parse_wild(v).map(|t| t.map_or(Tag::Any, Tag::Value)))
        .transpose()
        .map_err(|m| malformed(line, format!("tag: {m}")))?;
    let partner = rec
        .partner
        .as_ref()
        .map(|v| {
            parse_wild(v).and_then(|p| match p {
                None => Ok(Partner::Any),
                Some(r) => u32::try_from(r)
                    .map(|r| Partner::Rank(ProcessRank(r)))
                    .map_err(|_| format!("negative rank {r}")),
            })
        })
        .transpose()
        .map_err(|m| malformed(line, format!("partner: {m}")))?;
    let status = match (rec.status.as_str(), rec.reason) {
        ("success", None) => Status::Successful,
        ("failure", Some(r)) => Status::Failure(r),
        ("failure", None) => return Err(malformed(line, "failure without reason")),
        ("success", Some(_)) => return Err(malformed(line, "reason on a successful event")),
        (other, _) => return Err(malformed(line, format!("unknown status `{other}`"))),
    };
    Ok(Event {
        id: EventId::new(rec.rank, rec.seq),
        kind,
        routine: rec.routine,
        mode: rec.mode,
        tag,
        partner,
        buf_len: rec.len,
        source: SourceLoc {
            file: rec.file,
            line: rec.line,
        },
        status,
        logical_time: rec.time,
        matched_send: None,
    })
}

/// Reads a whole trace. Nothing is returned unless every line parses.
pub fn read_trace(r: impl BufRead) -> Result<Trace, TraceError> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(TraceError::Empty)?;
    let first: Value = serde_json::from_str(&first?).map_err(|e| malformed(1, e.to_string()))?;
    let found = first
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed(1, "header lacks format_version"))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(TraceError::Version { found });
    }
    let header: TraceHeader =
        serde_json::from_value(first).map_err(|e| malformed(1, e.to_string()))?;

    let mut events: Vec<Event> = Vec::new();
    let mut matched: Vec<(usize, usize, usize)> = Vec::new();
    let mut edges: Vec<(usize, Edge)> = Vec::new();
    let mut outcome = None;
    for (ln, text) in lines {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        if outcome.is_some() {
            return Err(malformed(ln, "content after the outcome line"));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| malformed(ln, e.to_string()))?;
        if v.get("outcome").is_some() {
            let o: OutcomeLine =
                serde_json::from_value(v).map_err(|e| malformed(ln, e.to_string()))?;
            outcome = Some(o.outcome);
        } else if v.get("rel").is_some() {
            let rec: RelationRecord =
                serde_json::from_value(v).map_err(|e| malformed(ln, e.to_string()))?;
            let kind = match rec.kind.as_str() {
                "S" => RelationKind::Sequential,
                "C" => RelationKind::Concurrent,
                "N" => RelationKind::Nonblocking,
                other => return Err(malformed(ln, format!("unknown relation kind `{other}`"))),
            };
            let [a, b] = rec.rel;
            for no in [a, b] {
                if no >= events.len() {
                    return Err(TraceError::Dangling { line: ln, no });
                }
            }
            edges.push((
                ln,
                Edge {
                    from: events[a].id,
                    to: events[b].id,
                    kind,
                },
            ));
        } else {
            if !edges.is_empty() {
                return Err(malformed(ln, "event after relation lines"));
            }
            let rec: EventRecord =
                serde_json::from_value(v).map_err(|e| malformed(ln, e.to_string()))?;
            if rec.no != events.len() {
                return Err(malformed(
                    ln,
                    format!(
                        "event number {} out of sequence (expected {})",
                        rec.no,
                        events.len()
                    ),
                ));
            }
            if let Some(m) = rec.matched {
                matched.push((ln, rec.no, m));
            }
            events.push(event_from_record(rec, ln)?);
        }
    }
    let outcome = outcome.ok_or(TraceError::MissingOutcome)?;
    for (ln, no, m) in matched {
        let send = events
            .get(m)
            .map(|e| e.id)
            .ok_or(TraceError::Dangling { line: ln, no: m })?;
        events[no].matched_send = Some(send);
    }
    for w in events.windows(2) {
        if (w[0].logical_time, w[0].id) >= (w[1].logical_time, w[1].id) {
            return Err(malformed(
                0,
                format!("events {} and {} out of order", w[0].id, w[1].id),
            ));
        }
    }
    let mut graph = EventGraph::from_parts(header.process_count, events, std::iter::empty())
        .map_err(|source| TraceError::Graph { line: 0, source })?;
    for (ln, e) in edges {
        graph
            .add_relation(e.from, e.to, e.kind)
            .map_err(|source| TraceError::Graph { line: ln, source })?;
    }
    Ok(Trace {
        header,
        graph,
        outcome,
    })
}

pub fn read_trace_file(path: &Path) -> Result<Trace, TraceError> {
    read_trace(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{run, SimConfig};
    use crate::scenario::Scenario;

    fn sample(text: &str) -> (TraceHeader, RunOutcome) {
        let s = Scenario::parse(text, "t.scn").unwrap();
        let cfg = SimConfig {
            timeout_ticks: 30,
            ..SimConfig::default()
        };
        (
            TraceHeader::new(&s.name, s.process_count, 30),
            run(&s, &cfg),
        )
    }

    const PAIR: &str =
        "processes 2\nproc 0:\n ssend to 1 tag 0 len 4\nproc 1:\n recv from 0 tag 0 len 4\n";

    #[test]
    fn minimal_trace_shape() {
        let (h, o) = sample(PAIR);
        let text = trace_to_string(&h, &o.graph, &OutcomeRecord::from(&o));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("\"format_version\":1"));
        assert!(lines[3].starts_with("{\"rel\":[0,1],\"kind\":\"C\"}"));
        assert!(lines[4].starts_with("{\"outcome\""));
    }

    #[test]
    fn failure_line_carries_reason() {
        let (h, o) = sample(
            "processes 2\nproc 0:\n ssend to 1 tag 0 len 8\nproc 1:\n recv from 0 tag 0 len 4\n",
        );
        let text = trace_to_string(&h, &o.graph, &OutcomeRecord::from(&o));
        assert!(text.contains("\"status\":\"failure\",\"reason\":\"truncated\""));
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let (h, o) = sample(
            "processes 3\nproc 0:\n isend to 1 tag 0 len 4 handle a\n irecv from any tag any len 4 handle b\n waitall a b\n\
             proc 1:\n recv from 0 tag 0 len 4\n bcast root 1 len 2\nproc 2:\n send to 0 tag 3 len 4\n bcast root 1 len 2\n",
        );
        let rec = OutcomeRecord::from(&o);
        let text = trace_to_string(&h, &o.graph, &rec);
        let back = read_trace(text.as_bytes()).unwrap();
        assert_eq!(back.graph, o.graph);
        assert_eq!(back.outcome, rec);
        assert_eq!(
            trace_to_string(&back.header, &back.graph, &back.outcome),
            text
        );
    }

    #[test]
    fn dangling_relation_rejected() {
        let (h, o) = sample(PAIR);
        let text = trace_to_string(&h, &o.graph, &OutcomeRecord::from(&o))
            .replace("\"rel\":[0,1]", "\"rel\":[0,9]");
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::Dangling { line: 4, no: 9 })
        ));
    }

    #[test]
    fn future_version_rejected() {
        let (h, o) = sample(PAIR);
        let text = trace_to_string(&h, &o.graph, &OutcomeRecord::from(&o))
            .replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::Version { found: 2 })
        ));
    }

    #[test]
    fn malformed_line_numbered() {
        let (h, o) = sample(PAIR);
        let mut text = trace_to_string(&h, &o.graph, &OutcomeRecord::from(&o));
        text.insert_str(text.find("\n").unwrap() + 1, "{not json\n");
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::Malformed { line: 2, .. })
        ));
    }
}
