//! Event-graph based detection and localization of communication errors in
//! simulated message-passing programs.

pub mod batch;
pub mod detector;
pub mod event_graph;
pub mod gen;
pub mod localizer;
pub mod runtime;
pub mod scenario;
pub mod trace_io;
