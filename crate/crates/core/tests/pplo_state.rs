//! The pseudo-label threshold schedule and phase order, on models whose
//! confidence is pinned.

mod common;

use std::collections::BTreeSet;

use cdapose::eval::predict;
use cdapose::pplo::{refresh_pseudo_labels, relax_mu, train_pplo, PhaseEvent, PploConfig, PploOutputs, PseudoLabelStore};
use cdapose::network::Model;
use common::*;
use proptest::prelude::*;

fn frozen(epochs: usize) -> PploConfig {
    PploConfig {
        epochs,
        learning_rate: 1e-12,
        source_steps: Some(1),
        target_steps: Some(1),
        disturbance: false,
        ..PploConfig::default()
    }
}

#[test]
fn active_windows_relax_and_inactive_ones_hold() {
    let [h, a, t] = figure_sets(60, [10, 10, 8]);
    let wscda = quick_wscda(1);
    let cfg = frozen(30);

    let out = train_pplo(pinned_model(3.0), [&h, &a, &t], &t, &wscda, &cfg, &PploOutputs::default()).unwrap();
    let relax = phase_order(&out.events, cfg.mu_window).unwrap();
    let to: Vec<f64> = relax.iter().map(|r| r.1).collect();
    for (got, want) in to.iter().zip([0.89, 0.88, 0.87]) {
        assert!((got - want).abs() < 1e-12, "{to:?}");
    }
    assert_eq!(out.store.len(), t.len());
    assert!((out.mu - 0.87).abs() < 1e-12);

    let out = train_pplo(pinned_model(-3.0), [&h, &a, &t], &t, &wscda, &cfg, &PploOutputs::default()).unwrap();
    let relax = phase_order(&out.events, cfg.mu_window).unwrap();
    assert!(relax.iter().all(|&(from, to)| from == 0.9 && to == 0.9));
    assert!(out.store.is_empty());
    let skipped = out.events.iter().filter(|e| matches!(e, PhaseEvent::TargetSkipped { .. })).count();
    assert_eq!(skipped, cfg.epochs);
}

#[test]
fn threshold_never_increases_in_the_log() {
    let [h, a, t] = figure_sets(61, [10, 10, 8]);
    // pinned confidence sigmoid(0.5) = 0.62
    for (mu0, active) in [(0.60, true), (0.64, false)] {
        let cfg = PploConfig { mu0, mu_step: 0.01, mu_window: 2, ..frozen(12) };
        let out = train_pplo(pinned_model(0.5), [&h, &a, &t], &t, &quick_wscda(2), &cfg, &PploOutputs::default()).unwrap();
        phase_order(&out.events, cfg.mu_window).unwrap();
        assert!(out.log.windows(2).all(|w| w[1].mu <= w[0].mu));
        let want = if active { mu0 - 0.06 } else { mu0 };
        assert!((out.mu - want).abs() < 1e-9, "mu0 {mu0}: final {}", out.mu);
        assert_eq!(out.log.iter().all(|r| r.accepted_count == t.len()), active);
    }
}

#[test]
fn lower_threshold_accepts_a_superset() {
    let [_, _, t] = figure_sets(62, [1, 1, 24]);
    let mut m = Model::build(&figure_config(), 5).unwrap();
    m.heatmap_bias_mut().iter_mut().for_each(|v| *v = 1.0);
    let mut conf: Vec<f64> = predict(&m, &t).unwrap().into_iter().map(|(_, c)| c).collect();
    conf.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ids = |mu: f64| {
        let mut s = PseudoLabelStore::new();
        refresh_pseudo_labels(&m, &t, &mut s, mu, 0).unwrap();
        s.ids().into_iter().collect::<BTreeSet<_>>()
    };
    let mut prev = BTreeSet::new();
    for &mu in conf.iter().rev().step_by(4) {
        let cur = ids(mu);
        assert!(prev.is_subset(&cur));
        prev = cur;
    }
}

proptest! {
    #[test]
    fn relaxation_is_monotone_and_floored(
        mu0 in 0.0..1.0f64,
        step in 0.001..0.5f64,
        updates in prop::collection::vec(0usize..3, 1..60),
    ) {
        let cfg = PploConfig { mu_step: step, ..PploConfig::default() };
        let mut mu = mu0;
        for u in updates {
            let next = relax_mu(mu, u, &cfg);
            prop_assert!(next <= mu && next >= 0.0);
            if u == 0 {
                prop_assert_eq!(next, mu);
            }
            mu = next;
        }
    }
}
