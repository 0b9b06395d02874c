//! Read-only HTTP access to one loaded trace.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use mppd_core::trace_io::{trace_to_json, Trace};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::{report_json, select_view, ViewMode};

pub struct AppState {
    trace: Trace,
    trace_json: Value,
    report: Value,
    assets: Option<PathBuf>,
}

impl AppState {
    pub fn new(trace: Trace, assets: Option<PathBuf>) -> Arc<Self> {
        let trace_json = trace_to_json(&trace.header, &trace.graph, &trace.outcome);
        let report = serde_json::from_str(&report_json(&trace)).expect("report is json");
        Arc::new(Self {
            trace,
            trace_json,
            report,
            assets,
        })
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ViewQuery {
    #[serde(default)]
    pub mode: ViewMode,
    pub ranks: Option<String>,
    #[serde(default)]
    pub related: bool,
}

async fn get_trace(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(st.trace_json.clone())
}

async fn get_localization(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(st.report.clone())
}

async fn get_view(State(st): State<Arc<AppState>>, Query(q): Query<ViewQuery>) -> Response {
    let ranks = q.ranks.as_deref().filter(|s| !s.is_empty());
    match select_view(&st.trace.graph, q.mode, ranks, q.related) {
        Ok(view) => Json(trace_to_json(&st.trace.header, &view, &st.trace.outcome)).into_response(),
        Err(e) => (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": format!("{e:#}") })),
        )
            .into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/trace", get(get_trace))
        .route("/api/localization", get(get_localization))
        .route("/api/view", get(get_view));
    let api = match &state.assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}
