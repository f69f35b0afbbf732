//! Acceptance run: one PASS/FAIL line per criterion, with the measured
//! quantities and wall time.
//!
//! This target reports; it does not gate. The deterministic criteria are
//! also asserted by the other integration tests, so a regression there
//! fails the suite, while a FAIL line here is a measured shortfall.
//!
//! The two training experiments (criteria 6 and 7) dominate the runtime;
//! set `CDAPOSE_ACCEPTANCE_ONLY=1,2,5` to run a subset.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use cdapose::datasets::bones::compute_bone_proportions;
use cdapose::datasets::synth::{generate_domain, SynthDomainSpec};
use cdapose::eval::{map_score, oks, predict, GroundTruth, OksParams, ScoredPose};
use cdapose::experiment::{labeled_target_sweep, mean_se, method_comparison, DeskTask};
use cdapose::heatmap::HeatmapStack;
use cdapose::losses::{
    adversarial_gradients, ddl, gradient_groups, pose_loss, pplo_target_loss,
    wscda_loss, BatchItem, LossConfig, LossKind, PoseTarget,
};
use cdapose::network::{DiscTap, DomainPrediction, Group, Model};
use cdapose::pplo::{refresh_pseudo_labels, train_pplo, PploConfig, PploOutputs, PseudoLabelStore};
use cdapose::schema::FIGURE_BONES;
use cdapose::types::{Domain, Image, Keypoint, Pose};
use common::*;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// 1. Loss oracles ------------------------------------------------------------

fn random_stack(r: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize) -> HeatmapStack {
    HeatmapStack::from_probabilities(c, h, w, (0..c * h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn criterion_1() -> Verdict {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let cases = 30;
    for _ in 0..cases {
        let n = r.random_range(1..=6);
        let doms: Vec<Domain> = (0..n)
            .map(|_| [Domain::Human, Domain::AnimalLabeled, Domain::AnimalTarget][r.random_range(0..3)])
            .collect();
        let yh: Vec<f64> = (0..n).map(|_| r.random_range(0.001..0.999)).collect();
        let zh: Vec<f64> = (0..n).map(|_| r.random_range(0.001..0.999)).collect();
        let w1 = r.random_range(0.1..3.0);
        let preds: Vec<DomainPrediction> = yh.iter().zip(&zh).map(|(&y_hat, &z_hat)| DomainPrediction { y_hat, z_hat }).collect();
        let y: Vec<u8> = doms.iter().map(|d| d.y()).collect();
        let z: Vec<u8> = doms.iter().map(|d| d.z()).collect();
        worst = worst.max((ddl(&preds, &doms, w1) - ref_ddl(&yh, &zh, &y, &z, w1)).abs());

        let (c, h, w) = (r.random_range(1..=4), r.random_range(2..=5), r.random_range(2..=5));
        let pd: Vec<HeatmapStack> = (0..n).map(|_| random_stack(&mut r, c, h, w)).collect();
        let tg: Vec<PoseTarget> = (0..n)
            .map(|_| PoseTarget {
                maps: random_stack(&mut r, c, h, w),
                annotated: (0..c).map(|_| r.random_bool(0.7)).collect(),
            })
            .collect();
        let mses: Vec<f64> = pd
            .iter()
            .zip(&tg)
            .map(|(p, t)| ref_mse(&p.maps, &t.maps.maps, &t.annotated, h * w))
            .collect();
        let labeled: Vec<Domain> = (0..n).map(|_| if r.random_bool(0.5) { Domain::Human } else { Domain::AnimalLabeled }).collect();
        let ly: Vec<u8> = labeled.iter().map(|d| d.y()).collect();
        let w2 = r.random_range(1.0..20.0);
        let pr: Vec<&HeatmapStack> = pd.iter().collect();
        let tr: Vec<&PoseTarget> = tg.iter().collect();
        let pl = pose_loss(&pr, &tr, &labeled, w2).unwrap();
        worst = worst.max((pl.total - ref_pose(&mses, &ly, w2)).abs());

        let (a, b) = (-r.random_range(0.01..5.0), r.random_range(0.01..1000.0));
        let (dv, pv) = (r.random_range(0.0..5.0), r.random_range(0.0..1.0));
        worst = worst.max((wscda_loss(dv, pv, a, b).unwrap() - (a * dv + b * pv)).abs());

        let accept: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let tl = pplo_target_loss(&pr, &tr, &accept).unwrap();
        worst = worst.max((tl.value - ref_target(&mses, &accept)).abs());
    }
    // hand-computed values
    let hand = [
        (
            ddl(&[DomainPrediction { y_hat: 0.8, z_hat: 0.3 }], &[Domain::AnimalLabeled], 1.0),
            -(0.8f64.ln()) - 0.7f64.ln(),
        ),
        (wscda_loss(0.5798, 0.21, -1.0, 500.0).unwrap(), 104.4202),
    ];
    for (got, want) in hand {
        worst = worst.max((got - want).abs());
    }
    verdict(worst <= 1e-6, format!("{cases} random cases x 4 losses, worst abs error {worst:.2e} (tol 1e-6)"))
}

// 2. Gradient suite ---------------------------------------------------------

fn grad_fixture(seed: u64, tap: DiscTap, se: bool) -> (Model, Vec<Image>, Vec<Domain>, Vec<PoseTarget>) {
    let cfg = grad_config(tap, se);
    let model = grad_model(tap, se, seed);
    let mut r = rng(seed + 50);
    let doms = vec![Domain::Human, Domain::AnimalLabeled, Domain::AnimalTarget, Domain::AnimalLabeled];
    let images = doms.iter().map(|_| random_image(&mut r, &cfg)).collect();
    let (gh, gw) = cfg.heatmap_size();
    let targets = doms
        .iter()
        .map(|_| PoseTarget::from_pose(&random_pose(&mut r, cfg.keypoints, 16.0), gh, gw, 1.0, cfg.stride).unwrap())
        .collect();
    (model, images, doms, targets)
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (i, (tap, se)) in [(DiscTap::Extractor, false), (DiscTap::Dan, true)].into_iter().enumerate() {
        let (model, images, doms, targets) = grad_fixture(7 + i as u64, tap, se);
        let imgs: Vec<&Image> = images.iter().collect();
        let tref: Vec<&PoseTarget> = targets.iter().collect();
        let ddl_groups: &[Group] = if tap == DiscTap::Dan {
            &[Group::Extractor, Group::Dan, Group::Discriminator]
        } else {
            &[Group::Extractor, Group::Discriminator]
        };
        let pose_groups = [Group::Extractor, Group::Dan, Group::Head];
        // labeled items only for the pose loss
        let lab = [0usize, 1, 3];
        let limgs: Vec<&Image> = lab.iter().map(|&j| imgs[j]).collect();
        let ltg: Vec<&PoseTarget> = lab.iter().map(|&j| tref[j]).collect();
        let ldom: Vec<Domain> = lab.iter().map(|&j| doms[j]).collect();
        let accept = [true, false, true, true];
        let kinds: [(LossKind<'_>, &[&Image], &[Group]); 3] = [
            (LossKind::Ddl { domains: &doms, w1: 1.3 }, &imgs, ddl_groups),
            (LossKind::Pose { targets: &ltg, domains: &ldom, w2: 10.0 }, &limgs, &pose_groups),
            (LossKind::Target { targets: &tref, accept: &accept }, &imgs, &pose_groups),
        ];
        for (k, (kind, im, groups)) in kinds.into_iter().enumerate() {
            worst = worst.max(fd_worst(&model, im, kind, groups, 24, 300 + k as u64));
            checks += groups.len();
        }
    }
    verdict(
        worst <= 1e-3,
        format!("{checks} (loss, group) pairs x 24 params, worst relative error {worst:.2e} (tol 1e-3)"),
    )
}

// 3. Adversarial contract ---------------------------------------------------

fn criterion_3() -> Verdict {
    let (model, images, doms, targets) = grad_fixture(21, DiscTap::Extractor, false);
    let imgs: Vec<&Image> = images.iter().collect();
    let batch: Vec<BatchItem> = images
        .iter()
        .zip(&doms)
        .zip(&targets)
        .map(|((im, &d), t)| BatchItem {
            image: im.clone(),
            domain: d,
            target: (d != Domain::AnimalTarget).then(|| t.clone()),
        })
        .collect();
    let plain = gradient_groups(&model, &imgs, LossKind::Ddl { domains: &doms, w1: 1.0 }).unwrap();
    let alpha = -1.7;
    let cfg = LossConfig { alpha, beta: 0.0, w1: 1.0, w2: 10.0 };
    let (adv, _) = adversarial_gradients(&model, &batch, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (g, scale) in [(Group::Extractor, -alpha.abs()), (Group::Discriminator, alpha.abs())] {
        for (a, p) in adv.group(g).iter().zip(plain.group(g)) {
            worst = worst.max((a - scale * p).abs());
        }
    }
    let untouched = adv.group(Group::Head).iter().chain(adv.group(Group::Dan)).all(|&v| v == 0.0);

    // descent with the pose term off, along the reversed gradients and
    // through the optimizer the trainer uses
    let lrs = [1e-3, 1e-4, 1e-5];
    let plain_lr = lrs.iter().copied().find(|&lr| strictly_decreasing(&ddl_trajectory(&model, &batch, &cfg, lr, 20, false)));
    let rms: Vec<(f64, f64)> = lrs
        .iter()
        .map(|&lr| {
            let t = ddl_trajectory(&model, &batch, &cfg, lr, 20, true);
            (lr, t[t.len() - 1] - t[0])
        })
        .collect();
    let rms_ok = lrs.iter().any(|&lr| strictly_decreasing(&ddl_trajectory(&model, &batch, &cfg, lr, 20, true)));
    let pass = worst <= 1e-6 && untouched && plain_lr.is_some() && rms_ok;
    verdict(
        pass,
        format!(
            "reversal max abs deviation {worst:.2e} (tol 1e-6), head/adapter untouched {untouched}; beta=0 descent: \
             plain gradient steps {}, RMSProp steps {} (DDL change over 20 steps {})",
            plain_lr.map_or("never strictly decrease".to_string(), |l| format!("strictly decrease at lr {l:e}")),
            if rms_ok { "strictly decrease" } else { "do not decrease at any lr tried" },
            rms.iter().map(|(lr, d)| format!("{d:+.4} at {lr:e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// 4. Pseudo-label state machine ---------------------------------------------

fn criterion_4() -> Verdict {
    let [h, a, t] = figure_sets(40, [12, 12, 10]);
    let wscda = quick_wscda(4);
    // default threshold schedule; a learning rate this small freezes the model
    let cfg = PploConfig {
        epochs: 20,
        learning_rate: 1e-12,
        source_steps: Some(1),
        target_steps: Some(1),
        disturbance: false,
        ..PploConfig::default()
    };
    let mut problems = Vec::new();
    let mut mus = Vec::new();
    // sigmoid(3) = 0.953 passes 0.9; sigmoid(-3) = 0.047 passes nothing
    for (bias, want) in [(3.0, [(0.9, 0.89), (0.89, 0.88)]), (-3.0, [(0.9, 0.9), (0.9, 0.9)])] {
        let out = train_pplo(pinned_model(bias), [&h, &a, &t], &t, &wscda, &cfg, &PploOutputs::default()).unwrap();
        match phase_order(&out.events, cfg.mu_window) {
            Ok(relax) => {
                let exact = relax.len() == 2 && relax.iter().zip(&want).all(|(g, w)| (g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12);
                if !exact {
                    problems.push(format!("bias {bias}: relaxations {relax:?}, want {want:?}"));
                }
                mus.push(format!("{:?}", relax.iter().map(|r| r.1).collect::<Vec<_>>()));
            }
            Err(e) => problems.push(e),
        }
        if out.log.windows(2).any(|w| w[1].mu > w[0].mu) {
            problems.push(format!("bias {bias}: threshold increased"));
        }
    }
    // superset under a lower threshold, on a model with spread-out confidences
    let model = Model::build(&figure_config(), 9).unwrap();
    let mut m = model.clone();
    m.heatmap_bias_mut().iter_mut().for_each(|v| *v = 1.0);
    let mut conf: Vec<f64> = predict(&m, &t).unwrap().into_iter().map(|(_, c)| c).collect();
    conf.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (lo, hi) = (conf[conf.len() / 4], conf[3 * conf.len() / 4]);
    let ids = |mu: f64| {
        let mut s = PseudoLabelStore::new();
        refresh_pseudo_labels(&m, &t, &mut s, mu, 0).unwrap();
        s.ids().into_iter().collect::<BTreeSet<String>>()
    };
    let (strict, loose) = (ids(hi), ids(lo));
    if !(strict.is_subset(&loose) && loose.len() > strict.len()) {
        problems.push(format!("acceptance at mu {lo:.4} ({}) is not a strict superset of mu {hi:.4} ({})", loose.len(), strict.len()));
    }
    let detail = if problems.is_empty() {
        format!(
            "mu after each window: active {}, inactive {}; phase order ok; {} accepted at mu {lo:.4} contain the {} at {hi:.4}",
            mus[0],
            mus[1],
            loose.len(),
            strict.len()
        )
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty(), detail)
}

// 5. mAP oracle -------------------------------------------------------------

fn criterion_5() -> Verdict {
    let mut r = rng(505);
    let mut mismatches = 0;
    let mut defined = 0;
    let cases = 200;
    for _ in 0..cases {
        let d = r.random_range(1..=4);
        let k: Vec<f64> = (0..d).map(|_| r.random_range(0.2..0.6)).collect();
        let params = OksParams { k: k.clone(), thresholds: cdapose::eval::oks::default_thresholds() };
        let (preds, gts) = random_map_case(&mut r, d);
        let fast = map_score(&preds, &gts, &params).ok().map(|m| m.map);
        let slow = ref_map(&preds, &gts, &k, &params.thresholds);
        if fast.is_some() {
            defined += 1;
        }
        if fast != slow {
            mismatches += 1;
        }
    }
    let (area, k) = (400.0, 0.1f64);
    let dist = (area * k * k).sqrt();
    let gt = Pose::new("t", vec![Keypoint::new(5.0, 5.0, 2), Keypoint::new(9.0, 1.0, 2)]);
    let pr = Pose::new("t", vec![Keypoint::new(5.0 + dist, 5.0, 2), Keypoint::new(9.0, 1.0 - dist, 2)]);
    let spot = oks(&pr, &gt, area, &OksParams { k: vec![k; 2], thresholds: vec![0.5] }).unwrap();
    let spot_err = (spot - (-0.5f64).exp()).abs();
    // one truth, one exact prediction
    let one = map_score(
        &[vec![ScoredPose { pose: gt.clone(), score: 0.5 }]],
        &[vec![GroundTruth::new(gt.clone(), Some([0.0, 0.0, 20.0, 20.0]))]],
        &OksParams { k: vec![k; 2], thresholds: cdapose::eval::oks::default_thresholds() },
    )
    .unwrap()
    .map;
    let pass = mismatches == 0 && spot_err <= 1e-9 && one == 1.0;
    verdict(
        pass,
        format!(
            "{cases} random cases ({defined} defined), {mismatches} differ from exhaustive matching; \
             OKS at d^2 = s^2 k^2 off exp(-0.5) by {spot_err:.1e}; perfect match mAP {one}"
        ),
    )
}

// 6. Method ordering ----------------------------------------------------------

fn fmt_arm(name: &str, xs: &[f64]) -> String {
    let (m, se) = mean_se(xs);
    format!("{name} {m:.3}±{se:.3}")
}

fn criterion_6() -> Verdict {
    let mc = method_comparison(&DeskTask::default(), &SEEDS).unwrap();
    let checks = mc.checks();
    let arms = [
        fmt_arm("baseline", &mc.baseline),
        fmt_arm("wscda(w2=1)", &mc.wscda_w2_1),
        fmt_arm("wscda", &mc.wscda),
        fmt_arm("wscda+pplo", &mc.wscda_pplo),
    ];
    let cmp: Vec<String> = checks
        .iter()
        .map(|c| {
            format!(
                "{}<{}: {:+.3} vs se {:.3} {}",
                c.lower,
                c.higher,
                c.higher_mean - c.lower_mean,
                c.se,
                if c.pass { "ok" } else { "short" }
            )
        })
        .collect();
    verdict(checks.iter().all(|c| c.pass), format!("PCK@0.2 {}; {}", arms.join(", "), cmp.join("; ")))
}

// 7. Labeled target instances -------------------------------------------------

fn criterion_7() -> Verdict {
    let sweep = labeled_target_sweep(&DeskTask::default(), &SEEDS, &[0, 10, 50]).unwrap();
    let means: Vec<f64> = sweep.iter().map(|(_, p)| mean_se(p).0).collect();
    let pass = means.windows(2).all(|w| w[1] >= w[0]) && means[2] > means[0];
    let parts: Vec<String> = sweep.iter().map(|(n, p)| fmt_arm(&format!("N_GT={n}"), p)).collect();
    verdict(pass, format!("PCK@0.2 {}", parts.join(", ")))
}

// 8. Bone proportions ---------------------------------------------------------

fn criterion_8() -> Verdict {
    let mut worst_sum: f64 = 0.0;
    let mut worst_l1: f64 = 0.0;
    let mut parts = Vec::new();
    let specs = [
        SynthDomainSpec::human(500, 80),
        SynthDomainSpec::animal("dog", Domain::AnimalLabeled, 500, 81).unwrap(),
        SynthDomainSpec::animal("horse", Domain::AnimalLabeled, 500, 82).unwrap(),
        SynthDomainSpec::animal("sheep", Domain::AnimalLabeled, 500, 83).unwrap(),
        SynthDomainSpec::animal("cow", Domain::AnimalLabeled, 500, 84).unwrap(),
    ];
    for spec in &specs {
        let (set, _) = generate_domain(spec).unwrap();
        let rep = compute_bone_proportions(&set, &FIGURE_BONES).unwrap();
        for c in rep.classes.values() {
            worst_sum = worst_sum.max((c.proportions.iter().sum::<f64>() - 1.0).abs());
        }
        let l1 = rep.l1(&spec.species, &spec.proportions).unwrap_or(f64::INFINITY);
        worst_l1 = worst_l1.max(l1);
        parts.push(format!("{} {l1:.4}", spec.species));
    }
    verdict(
        worst_sum <= 1e-9 && worst_l1 <= 0.02,
        format!("sum-to-one error {worst_sum:.1e} (tol 1e-9); L1 at 500 instances: {} (tol 0.02)", parts.join(", ")),
    )
}

// 9. Determinism --------------------------------------------------------------

fn criterion_9() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        if let Err(e) = cli_pipeline(d) {
            return verdict(false, format!("pipeline failed: {e}"));
        }
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| &x.0)
        .collect();
    let same_files = ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.0 == y.0);
    let checkpoints = ta.iter().filter(|(p, _)| p.contains("checkpoints")).count();
    let logs = ta.iter().filter(|(p, _)| p.ends_with(".csv") || p.ends_with("events.json")).count();
    verdict(
        same_files && differing.is_empty(),
        format!(
            "every subcommand run twice: {} output files ({checkpoints} checkpoints, {logs} metric logs), {} differ{}",
            ta.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("CDAPOSE_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Verdict); 9] = [
        (1, "loss oracles", Duration::from_secs(60), criterion_1),
        (2, "gradient suite", Duration::from_secs(300), criterion_2),
        (3, "adversarial contract", Duration::from_secs(120), criterion_3),
        (4, "pseudo-label state machine", Duration::from_secs(120), criterion_4),
        (5, "mAP oracle", Duration::from_secs(120), criterion_5),
        (6, "method ordering over 5 seeds", Duration::from_secs(3600), criterion_6),
        (7, "labeled target instances over 5 seeds", Duration::from_secs(3600), criterion_7),
        (8, "bone proportions", Duration::from_secs(60), criterion_8),
        (9, "determinism", Duration::from_secs(u64::MAX / 4), criterion_9),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, budget, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let v = f();
        let took = t.elapsed();
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget_note = if budget.as_secs() < u64::MAX / 8 { format!(", budget {}s", budget.as_secs()) } else { String::new() };
        println!(
            "criterion {n} ({name}): {} - {} [{:.1}s{budget_note}{}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("{} criteria run, {failed} failed", ran);
}
