mod common;

use mppd_core::gen::{generate, GenConfig};
use mppd_core::localizer::{localize, FailureSituation};
use mppd_core::runtime::{run, SimConfig};

#[test]
fn fault_free_runs_have_no_faulty_ranks() {
    let cfg = GenConfig {
        fault_probability: 0.0,
        wildcards: false,
        ..GenConfig::default()
    };
    for seed in 0..200 {
        let out = run(&generate(seed, &cfg).scenario, &SimConfig::default());
        let rep = localize(&out.graph, out.terminated_abnormally);
        assert!(rep.faulty.is_empty() && !rep.unlocalizable, "seed {seed}");
    }
}

#[test]
fn groups_partition_faulty_ranks() {
    for seed in 0..500 {
        let out = run(
            &generate(seed, &GenConfig::default()).scenario,
            &SimConfig::default(),
        );
        let rep = localize(&out.graph, out.terminated_abnormally);
        for g in &rep.groups {
            assert!(
                g.situation == FailureSituation::NonOccurredEvent
                    || g.ranks.iter().all(|r| rep.failure_events[r].is_some()),
                "seed {seed} group {:?}",
                g.ranks
            );
            assert!(!g.evidence.is_empty(), "seed {seed}");
        }
        let grouped: usize = rep.groups.iter().map(|g| g.ranks.len()).sum();
        assert_eq!(grouped, rep.faulty.len(), "seed {seed}");
    }
}

#[test]
fn localization_is_stable_under_default_view() {
    for seed in 0..500 {
        let out = run(
            &generate(seed, &GenConfig::default()).scenario,
            &SimConfig::default(),
        );
        let full = localize(&out.graph, out.terminated_abnormally);
        let view = localize(&out.graph.default_view(), out.terminated_abnormally);
        assert_eq!(full.faulty, view.faulty, "seed {seed}");
        assert_eq!(full, localize(&out.graph, out.terminated_abnormally));
    }
}

#[test]
fn canonical_situations() {
    let cases = [
        ("crash_chain", FailureSituation::CalculationFault, vec![2]),
        (
            "redundant_send",
            FailureSituation::NonOccurredEvent,
            vec![0, 1],
        ),
        ("cycle_deadlock", FailureSituation::Deadlock, vec![0, 1, 2]),
        (
            "truncated_pair",
            FailureSituation::BufferOverflow,
            vec![0, 1],
        ),
    ];
    for (name, situation, ranks) in cases {
        let out = run(&common::load(&format!("{name}.scn")), &SimConfig::default());
        let rep = localize(&out.graph, out.terminated_abnormally);
        let faulty: Vec<u32> = rep.faulty.iter().map(|r| r.0).collect();
        assert_eq!(faulty, ranks, "{name}");
        assert_eq!(rep.situation(), Some(situation), "{name}");
    }
}
