//! Running many generated scenarios. With the `parallel` feature the work is
//! spread over a rayon pool; results keep seed order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::gen::{generate, GenConfig, Generated};
use crate::localizer::{localize, LocalizationReport};
use crate::runtime::{run, RunOutcome, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub generated: Generated,
    pub outcome: RunOutcome,
    pub report: LocalizationReport,
}

pub fn run_one(seed: u64, gen: &GenConfig, sim: &SimConfig) -> BatchItem {
    let generated = generate(seed, gen);
    let outcome = run(&generated.scenario, sim);
    let report = localize(&outcome.graph, outcome.terminated_abnormally);
    BatchItem {
        generated,
        outcome,
        report,
    }
}

pub fn run_batch_seq(seeds: &[u64], gen: &GenConfig, sim: &SimConfig) -> Vec<BatchItem> {
    seeds.iter().map(|&s| run_one(s, gen, sim)).collect()
}

#[cfg(feature = "parallel")]
pub fn run_batch(seeds: &[u64], gen: &GenConfig, sim: &SimConfig) -> Vec<BatchItem> {
    seeds.par_iter().map(|&s| run_one(s, gen, sim)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(seeds: &[u64], gen: &GenConfig, sim: &SimConfig) -> Vec<BatchItem> {
    run_batch_seq(seeds, gen, sim)
}
