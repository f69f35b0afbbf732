//! Shared fixtures and independent reference implementations for the
//! integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use cdapose::datasets::synth::{generate_domain, SynthDomainSpec};
use cdapose::datasets::AnnotationSet;
use cdapose::eval::{GroundTruth, ScoredPose};
use cdapose::losses::{gradient_groups, loss_value, LossKind};
use cdapose::network::{DiscTap, Group, Model, ModelConfig};
use cdapose::pplo::PploConfig;
use cdapose::types::{Domain, Image, Keypoint, Pose};
use cdapose::wscda::{AdvanceRule, BatchComposition, StageSchedule, WscdaConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small enough for finite differences over every group.
pub fn grad_config(tap: DiscTap, se: bool) -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 3,
        stage_channels: vec![4, 6, 8],
        dan_width: 5,
        use_dan: true,
        head_width: 4,
        keypoints: 3,
        disc_hidden: 6,
        stride: 4,
        use_se: se,
        disc_tap: tap,
    }
}

/// A `grad_config` model with every parameter nudged off its initial value.
/// Freshly built biases are exactly zero, which puts some ReLUs exactly on
/// their kink where a central difference sees only half a slope.
pub fn grad_model(tap: DiscTap, se: bool, seed: u64) -> Model {
    let mut m = Model::build(&grad_config(tap, se), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params.iter_mut().flatten() {
        *p += r.random_range(-0.05..0.05);
    }
    m
}

/// A model sized for the 16 pixel synthetic figures.
pub fn figure_config() -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        stage_channels: vec![4, 8, 8],
        dan_width: 8,
        head_width: 8,
        keypoints: 19,
        disc_hidden: 8,
        stride: 4,
        ..ModelConfig::default()
    }
}

pub fn random_image(r: &mut ChaCha8Rng, c: &ModelConfig) -> Image {
    let n = c.input_channels * c.input_height * c.input_width;
    Image::from_planar(
        c.input_channels,
        c.input_height,
        c.input_width,
        (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Random pose inside a `size` pixel square, about one keypoint in four unannotated.
pub fn random_pose(r: &mut ChaCha8Rng, d: usize, size: f64) -> Pose {
    let kps = (0..d)
        .map(|_| {
            if r.random_bool(0.25) {
                Keypoint::missing()
            } else {
                Keypoint::new(r.random_range(0.0..size), r.random_range(0.0..size), r.random_range(1..=2))
            }
        })
        .collect();
    Pose::new("t", kps)
}

/// Human, labeled-animal and unlabeled-target sets of 16 pixel figures.
pub fn figure_sets(seed: u64, n: [usize; 3]) -> [AnnotationSet; 3] {
    let mut h = SynthDomainSpec::human(n[0], seed);
    let mut a = SynthDomainSpec::animal("dog", Domain::AnimalLabeled, n[1], seed + 1).unwrap();
    let mut t = SynthDomainSpec::animal("cow", Domain::AnimalTarget, n[2], seed + 2).unwrap();
    for s in [&mut h, &mut a, &mut t] {
        s.image_size = 16;
    }
    [
        generate_domain(&h).unwrap().0,
        generate_domain(&a).unwrap().0,
        generate_domain(&t).unwrap().0,
    ]
}

/// A short three-stage schedule for fast runs.
pub fn quick_wscda(seed: u64) -> WscdaConfig {
    WscdaConfig {
        schedule: StageSchedule::scaled(
            10.0,
            AdvanceRule {
                max_epochs: 2,
                ..AdvanceRule::default()
            },
        ),
        composition: BatchComposition {
            batch_size: 8,
            ..BatchComposition::default()
        },
        seed,
        ..WscdaConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Scalar reference losses, written from the formulas on plain slices.

const EPS: f64 = 1e-7;

fn ln_clamped(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS).ln()
}

/// `-w1 sum[y ln y' + (1-y) ln(1-y')] - sum y [z ln z' + (1-z) ln(1-z')]`.
pub fn ref_ddl(y_hat: &[f64], z_hat: &[f64], y: &[u8], z: &[u8], w1: f64) -> f64 {
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..y_hat.len() {
        let (yf, zf) = (y[i] as f64, z[i] as f64);
        first += yf * ln_clamped(y_hat[i]) + (1.0 - yf) * (1.0 - y_hat[i]).clamp(EPS, 1.0 - EPS).ln();
        second += yf * (zf * ln_clamped(z_hat[i]) + (1.0 - zf) * (1.0 - z_hat[i]).clamp(EPS, 1.0 - EPS).ln());
    }
    -w1 * first - second
}

/// Squared error over the planes of annotated channels, divided by the
/// number of cells in those planes.
pub fn ref_mse(pred: &[f64], target: &[f64], annotated: &[bool], plane: usize) -> f64 {
    let mut sum = 0.0;
    let mut cells = 0usize;
    for (k, &a) in annotated.iter().enumerate() {
        if !a {
            continue;
        }
        for j in 0..plane {
            let e = pred[k * plane + j] - target[k * plane + j];
            sum += e * e;
            cells += 1;
        }
    }
    if cells == 0 {
        0.0
    } else {
        sum / cells as f64
    }
}

/// `sum_i [w2 y_i MSE_i + (1 - y_i) MSE_i]`.
pub fn ref_pose(mses: &[f64], y: &[u8], w2: f64) -> f64 {
    mses.iter().zip(y).map(|(m, &yi)| if yi == 1 { w2 * m } else { *m }).sum()
}

/// `sum_j accept_j MSE_j`.
pub fn ref_target(mses: &[f64], accept: &[bool]) -> f64 {
    mses.iter().zip(accept).filter(|(_, &a)| a).map(|(m, _)| m).sum()
}

// ---------------------------------------------------------------------------
// Exhaustive keypoint mAP.

pub fn ref_oks(pred: &Pose, gt: &Pose, area: f64, k: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..gt.len() {
        if gt.keypoints[i].v == 0 {
            continue;
        }
        let dx = pred.keypoints[i].x - gt.keypoints[i].x;
        let dy = pred.keypoints[i].y - gt.keypoints[i].y;
        s += (-(dx * dx + dy * dy) / (2.0 * area.max(f64::EPSILON) * k[i] * k[i])).exp();
        n += 1.0;
    }
    s / n
}

/// Among every valid one-to-one assignment, the one a score-ordered sweep
/// prefers: earlier (higher-scored) predictions first, matched over
/// unmatched, higher OKS over lower, later ground truth on equal OKS.
fn best_assignment(table: &[Vec<f64>], order: &[usize], thr: f64) -> Vec<Option<usize>> {
    let n_gt = table.first().map_or(0, Vec::len);
    let cap = thr.min(1.0 - 1e-10);
    let mut best: Option<Vec<Option<usize>>> = None;
    let mut cur = Vec::new();
    let mut used = vec![false; n_gt];
    fn better(a: &[Option<usize>], b: &[Option<usize>], table: &[Vec<f64>], order: &[usize]) -> bool {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let key = |m: &Option<usize>| m.map(|g| (1u8, table[order[i]][g], g)).unwrap_or((0, 0.0, 0));
            let (kx, ky) = (key(x), key(y));
            if kx != ky {
                return kx.0 > ky.0 || (kx.0 == ky.0 && (kx.1 > ky.1 || (kx.1 == ky.1 && kx.2 > ky.2)));
            }
        }
        false
    }
    #[allow(clippy::too_many_arguments)]
    fn walk(
        i: usize,
        table: &[Vec<f64>],
        order: &[usize],
        cap: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<Vec<Option<usize>>>,
    ) {
        if i == order.len() {
            if best.as_ref().is_none_or(|b| better(cur, b, table, order)) {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push(None);
        walk(i + 1, table, order, cap, used, cur, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && table[order[i]][g] >= cap {
                used[g] = true;
                cur.push(Some(g));
                walk(i + 1, table, order, cap, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    walk(0, table, order, cap, &mut used, &mut cur, &mut best);
    best.unwrap_or_default()
}

/// AP as the mean over 101 recall levels of the best precision reached at
/// that recall or beyond.
fn ref_ap(mut dets: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (_, m) in dets {
        if m {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        curve.push((tp / n_gt as f64, tp / (tp + fp)));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        sum += curve.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    sum / 101.0
}

/// Keypoint mAP by exhaustive matching. `None` when no ground truth has an
/// annotated keypoint.
pub fn ref_map(preds: &[Vec<ScoredPose>], gts: &[Vec<GroundTruth>], k: &[f64], thresholds: &[f64]) -> Option<f64> {
    let valid: Vec<Vec<&GroundTruth>> =
        gts.iter().map(|g| g.iter().filter(|g| g.pose.annotated_count() > 0).collect()).collect();
    let n_gt: usize = valid.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut total = 0.0;
    for &thr in thresholds {
        let mut dets = Vec::new();
        for (p, g) in preds.iter().zip(&valid) {
            let table: Vec<Vec<f64>> =
                p.iter().map(|d| g.iter().map(|t| ref_oks(&d.pose, &t.pose, t.area, k)).collect()).collect();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].score.partial_cmp(&p[a].score).unwrap());
            let assign = best_assignment(&table, &order, thr);
            for (i, &o) in order.iter().enumerate() {
                dets.push((p[o].score, assign[i].is_some()));
            }
        }
        total += ref_ap(dets, n_gt);
    }
    Some(total / thresholds.len() as f64)
}

/// A random mAP case: up to three images with up to three truths and three
/// predictions each, coarse scores so ties happen.
pub fn random_map_case(r: &mut ChaCha8Rng, d: usize) -> (Vec<Vec<ScoredPose>>, Vec<Vec<GroundTruth>>) {
    let n_img = r.random_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n_img {
        let g: Vec<GroundTruth> = (0..r.random_range(0..=3))
            .map(|_| GroundTruth {
                pose: random_pose(r, d, 10.0),
                area: r.random_range(9.0..25.0),
            })
            .collect();
        let p: Vec<ScoredPose> = (0..r.random_range(0..=3))
            .map(|_| ScoredPose {
                pose: random_pose(r, d, 10.0),
                score: r.random_range(0..4) as f64 / 4.0,
            })
            .collect();
        gts.push(g);
        preds.push(p);
    }
    (preds, gts)
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Worst relative error between analytic and central-difference gradients
/// over `per_group` random parameters of each group in `groups`, with
/// relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn fd_worst(model: &Model, images: &[&Image], loss: LossKind<'_>, groups: &[Group], per_group: usize, seed: u64) -> f64 {
    let analytic = gradient_groups(model, images, loss).unwrap();
    let mut r = rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &g in groups {
        let gi = g as usize;
        let n = model.params[gi].len();
        assert!(n >= per_group, "group {} has only {n} parameters", g.name());
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..per_group {
            let j = r.random_range(i..n);
            idx.swap(i, j);
        }
        for &j in &idx[..per_group] {
            let mut m = model.clone();
            m.params[gi][j] += h;
            let up = loss_value(&m, images, loss).unwrap();
            m.params[gi][j] -= 2.0 * h;
            let down = loss_value(&m, images, loss).unwrap();
            let num = (up - down) / (2.0 * h);
            let a = analytic.0[gi][j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

/// DDL on `batch` before and after each of `steps` adversarial updates,
/// taken either by RMSProp or as plain steps `-lr * g` along the same
/// reversed gradients.
pub fn ddl_trajectory(
    model: &Model,
    batch: &[cdapose::losses::BatchItem],
    cfg: &cdapose::losses::LossConfig,
    lr: f64,
    steps: usize,
    rmsprop: bool,
) -> Vec<f64> {
    let imgs: Vec<&Image> = batch.iter().map(|b| &b.image).collect();
    let doms: Vec<Domain> = batch.iter().map(|b| b.domain).collect();
    let f = |m: &Model| loss_value(m, &imgs, LossKind::Ddl { domains: &doms, w1: cfg.w1 }).unwrap();
    let mut m = model.clone();
    let mut opt = cdapose::optim::RmsProp::new(&m);
    let mut seq = vec![f(&m)];
    for _ in 0..steps {
        if rmsprop {
            cdapose::losses::adversarial_step(&mut m, batch, cfg, &mut opt, lr).unwrap();
        } else {
            let (g, _) = cdapose::losses::adversarial_gradients(&m, batch, cfg).unwrap();
            for (p, d) in m.params.iter_mut().zip(&g.0) {
                p.iter_mut().zip(d).for_each(|(p, d)| *p -= lr * d);
            }
        }
        seq.push(f(&m));
    }
    seq
}

pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

// ---------------------------------------------------------------------------
// The command-line tool end to end.

pub fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdapose"))
        .args(args)
        .current_dir(dir)
        .env("CDAPOSE_OUTPUT", "out")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Runs every subcommand on a small synthetic task inside `dir`, all paths relative.
pub fn cli_pipeline(dir: &Path) -> Result<(), String> {
    let specs = [
        SynthDomainSpec::human(16, 1),
        SynthDomainSpec::animal("dog", Domain::AnimalLabeled, 16, 2).unwrap(),
        SynthDomainSpec::animal("cow", Domain::AnimalTarget, 20, 3).unwrap(),
    ];
    for (i, mut s) in specs.into_iter().enumerate() {
        s.image_size = 16;
        std::fs::write(dir.join(format!("spec{i}.toml")), s.to_toml()).map_err(|e| e.to_string())?;
    }
    run_cli(dir, &["synth", "--spec", "spec0.toml", "--spec", "spec1.toml", "--spec", "spec2.toml", "--out", "data"])?;
    let mut cfg = cdapose::config::RunConfig {
        name: "tiny".into(),
        seed: 5,
        data: cdapose::config::DataPaths {
            human: Some("data/human-human/annotations.json".into()),
            animal: Some("data/dog-animal/annotations.json".into()),
            unlabeled: Some("data/cow-target/annotations.json".into()),
            eval: Some("data/cow-target-truth/annotations.json".into()),
            target_labeled: Some("data/cow-target-truth/annotations.json".into()),
            n_gt: 4,
        },
        model: figure_config(),
        wscda: quick_wscda(0),
        pplo: PploConfig { epochs: 3, mu0: 0.05, mu_window: 2, learning_rate: 1e-3, ..PploConfig::default() },
        pck_fraction: 0.2,
    };
    cfg.wscda.checkpoint_every = 1;
    std::fs::write(dir.join("run.toml"), cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    run_cli(dir, &["train", "wscda", "--config", "run.toml", "--out", "runs/w"])?;
    let mut stages: Vec<String> = std::fs::read_dir(dir.join("runs/w/checkpoints"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().to_string()))
        .filter(|n| n.starts_with("wscda-stage"))
        .collect();
    stages.sort();
    let wck = format!("runs/w/checkpoints/{}", stages.last().ok_or("no stage checkpoint")?);
    run_cli(dir, &["train", "pplo", "--config", "run.toml", "--from", &wck, "--out", "runs/p"])?;
    run_cli(dir, &["train", "supervised-boost", "--config", "run.toml", "--set", "name=\"boost\"", "--out", "runs/b"])?;
    run_cli(
        dir,
        &["eval", "--checkpoint", "runs/p/checkpoints/pplo-final.json", "--set", "data/cow-target-truth/annotations.json", "--out", "eval.json"],
    )?;
    run_cli(dir, &["export-pseudo-labels", "--store", "runs/p/pseudo_labels.json", "--target", "data/cow-target/annotations.json", "--out", "pseudo.json"])?;
    run_cli(dir, &["report", "runs/w", "runs/p", "runs/b", "--out", "report"])?;
    run_cli(dir, &["analyze-bones", "data/dog-animal/annotations.json", "--out", "bones"])?;
    run_cli(dir, &["ingest", "data/dog-animal/annotations.json", "data/human-human/annotations.json", "--out", "merged"])?;
    Ok(())
}

pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// Pseudo-label runs.

/// A model whose heatmaps are flat, so every confidence is `sigmoid(bias)`.
pub fn pinned_model(bias: f64) -> Model {
    let mut m = Model::build(&figure_config(), 3).unwrap();
    m.group_mut(Group::Head).iter_mut().for_each(|v| *v = 0.0);
    m.heatmap_bias_mut().iter_mut().for_each(|v| *v = bias);
    m
}

/// Checks per-epoch phase order and returns the relaxations seen.
pub fn phase_order(events: &[cdapose::pplo::PhaseEvent], window: usize) -> Result<Vec<(f64, f64)>, String> {
    let mut relax = Vec::new();
    let mut it = events.iter().peekable();
    let mut epoch = 0;
    while it.peek().is_some() {
        match it.next() {
            Some(cdapose::pplo::PhaseEvent::Source { epoch: e, .. }) if *e == epoch => {}
            other => return Err(format!("epoch {epoch}: expected source phase, got {other:?}")),
        }
        let accepted = match it.next() {
            Some(cdapose::pplo::PhaseEvent::Refresh { epoch: e, accepted, .. }) if *e == epoch => *accepted,
            other => return Err(format!("epoch {epoch}: expected refresh, got {other:?}")),
        };
        match it.next() {
            Some(cdapose::pplo::PhaseEvent::Target { epoch: e, .. }) if *e == epoch && accepted > 0 => {}
            Some(cdapose::pplo::PhaseEvent::TargetSkipped { epoch: e }) if *e == epoch && accepted == 0 => {}
            other => return Err(format!("epoch {epoch}: expected target phase, got {other:?}")),
        }
        if (epoch + 1) % window == 0 {
            match it.next() {
                Some(cdapose::pplo::PhaseEvent::Relax { epoch: e, from, to, .. }) if *e == epoch => relax.push((*from, *to)),
                other => return Err(format!("epoch {epoch}: expected relaxation, got {other:?}")),
            }
        }
        epoch += 1;
    }
    Ok(relax)
}
