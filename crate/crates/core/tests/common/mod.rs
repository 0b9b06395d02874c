#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use mppd_core::scenario::Scenario;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str) -> Scenario {
    let path = scenario_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::parse(&text, name).unwrap_or_else(|e| panic!("{name}: {e}"))
}
