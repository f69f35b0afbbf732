//! Mixed-batch adversarial training over labeled humans, a few labeled
//! animals and unlabeled target animals, in three learning-rate/disturbance
//! stages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::datasets::transform::shift_image;
use crate::datasets::AnnotationSet;
use crate::error::{Error, Result};
use crate::heatmap::{DEFAULT_SIGMA, DEFAULT_STRIDE};
use crate::losses::{adversarial_gradients, BatchItem, LossConfig, PoseTarget, StepStats};
use crate::network::{Checkpoint, Model, StageMeta};
use crate::optim::RmsProp;
use crate::types::{Domain, Image, Instance, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub learning_rate: f64,
    pub disturbance: bool,
}

/// When a stage counts as converged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvanceRule {
    /// Length of the moving average over per-epoch losses.
    pub average: usize,
    /// Consecutive epochs of small improvement required.
    pub window: usize,
    /// Relative improvement of the moving average regarded as small.
    pub tolerance: f64,
    /// Hard cap on epochs per stage.
    pub max_epochs: usize,
}

impl Default for AdvanceRule {
    fn default() -> Self {
        AdvanceRule {
            average: 5,
            window: 3,
            tolerance: 1e-3,
            max_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
    pub rule: AdvanceRule,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            stages: vec![
                Stage { learning_rate: 1e-4, disturbance: false },
                Stage { learning_rate: 1e-4, disturbance: true },
                Stage { learning_rate: 1e-5, disturbance: true },
            ],
            rule: AdvanceRule::default(),
        }
    }
}

impl StageSchedule {
    /// The default three stages with every learning rate multiplied by `factor`.
    pub fn scaled(factor: f64, rule: AdvanceRule) -> Self {
        let mut s = StageSchedule::default();
        for st in &mut s.stages {
            st.learning_rate *= factor;
        }
        s.rule = rule;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| !(s.learning_rate > 0.0 && s.learning_rate.is_finite())) {
            return Err(Error::Config(format!("learning rate {} is not positive", s.learning_rate)));
        }
        let r = &self.rule;
        if r.average == 0 || r.window == 0 || r.max_epochs == 0 || !(r.tolerance >= 0.0) {
            return Err(Error::Config("advance rule needs positive average, window and max epochs".into()));
        }
        Ok(())
    }
}

/// Relative improvement of the trailing moving average, one value per epoch
/// from epoch `average` onwards (0-based).
pub fn moving_average_improvements(history: &[f64], average: usize) -> Vec<f64> {
    if average == 0 || history.len() < average + 1 {
        return Vec::new();
    }
    let ma: Vec<f64> = history.windows(average).map(|w| w.iter().sum::<f64>() / average as f64).collect();
    ma.windows(2)
        .map(|w| {
            let (prev, cur) = (w[0], w[1]);
            if prev == cur {
                0.0
            } else {
                (prev - cur) / prev.abs()
            }
        })
        .collect()
}

/// True when the stage is done: the relative improvement of the moving
/// average stayed below the tolerance for `window` consecutive epochs, or
/// the stage reached its epoch cap.
pub fn stage_advance(history: &[f64], rule: &AdvanceRule) -> bool {
    if history.len() >= rule.max_epochs {
        return true;
    }
    let imp = moving_average_improvements(history, rule.average);
    imp.len() >= rule.window && imp[imp.len() - rule.window..].iter().all(|&r| r < rule.tolerance)
}

/// Share of each source in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchComposition {
    pub human: f64,
    pub animal: f64,
    pub unlabeled: f64,
    pub batch_size: usize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        BatchComposition {
            human: 0.5,
            animal: 0.25,
            unlabeled: 0.25,
            batch_size: 64,
        }
    }
}

impl BatchComposition {
    pub fn validate(&self) -> Result<()> {
        let f = [self.human, self.animal, self.unlabeled];
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("batch fractions {f:?} must be non-negative and sum to 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Items drawn per source, given which sources have data.
    ///
    /// Fractions of empty sources are dropped and the rest renormalised.
    /// Every active source (non-empty, positive fraction) gets
    /// `floor(f * B)` items, at least one; leftover slots go by largest
    /// fractional part, ties to the earlier source (human, animal,
    /// unlabeled); overshoot from the one-item floor is taken back from the
    /// largest count. A batch smaller than the number of active sources
    /// drops the sources with the smallest shares.
    pub fn counts(&self, available: [usize; 3]) -> [usize; 3] {
        let f = [self.human, self.animal, self.unlabeled];
        let active: Vec<bool> = (0..3).map(|i| available[i] > 0 && f[i] > 0.0).collect();
        let z: f64 = (0..3).filter(|&i| active[i]).map(|i| f[i]).sum();
        let mut out = [0usize; 3];
        if z == 0.0 {
            return out;
        }
        let b = self.batch_size;
        let raw: Vec<f64> = (0..3).map(|i| if active[i] { f[i] / z * b as f64 } else { 0.0 }).collect();
        for i in 0..3 {
            if active[i] {
                out[i] = (raw[i].floor() as usize).max(1);
            }
        }
        let mut order: Vec<usize> = (0..3).filter(|&i| active[i]).collect();
        order.sort_by(|&a, &c| {
            let fa = raw[a] - raw[a].floor();
            let fc = raw[c] - raw[c].floor();
            fc.partial_cmp(&fa).expect("finite").then(a.cmp(&c))
        });
        let mut k = 0;
        while out.iter().sum::<usize>() < b {
            out[order[k % order.len()]] += 1;
            k += 1;
        }
        while out.iter().sum::<usize>() > b {
            let i = (0..3).max_by_key(|&i| (out[i], 3 - i)).expect("three sources");
            if out[i] > 1 {
                out[i] -= 1;
            } else {
                // fewer slots than sources: drop the smallest share
                let j = (0..3)
                    .filter(|&j| out[j] > 0)
                    .min_by(|&a, &c| raw[a].partial_cmp(&raw[c]).expect("finite").then(c.cmp(&a)))
                    .expect("some source is active");
                out[j] -= 1;
            }
        }
        out
    }
}

/// Disturbance magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Disturbance {
    pub noise_std: f64,
    /// Largest crop shift as a fraction of the image side.
    pub max_shift: f64,
}

impl Default for Disturbance {
    fn default() -> Self {
        Disturbance {
            noise_std: 0.02,
            max_shift: 0.05,
        }
    }
}

/// Gaussian pixel noise plus a random crop shift; keypoints move with the
/// pixels. Returns the inputs unchanged when `enabled` is false.
pub fn apply_disturbance(
    image: &Image,
    pose: Option<&Pose>,
    enabled: bool,
    params: &Disturbance,
    seed: u64,
) -> (Image, Option<Pose>) {
    if !enabled {
        return (image.clone(), pose.cloned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mx = (params.max_shift * image.width as f64).floor() as i64;
    let my = (params.max_shift * image.height as f64).floor() as i64;
    let dx = if mx > 0 { rng.random_range(-mx..=mx) } else { 0 };
    let dy = if my > 0 { rng.random_range(-my..=my) } else { 0 };
    let mut out = shift_image(image, dx, dy);
    if params.noise_std > 0.0 {
        let n = Normal::new(0.0, params.noise_std).expect("positive std");
        for v in &mut out.data {
            *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    (out, pose.map(|p| p.translated(dx as f64, dy as f64)))
}

/// Endless shuffled passes over one source.
#[derive(Debug, Clone)]
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycle { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Seeded mixed-batch sampler over the three sources.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    cycles: [Cycle; 3],
    counts: [usize; 3],
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(sizes: [usize; 3], composition: &BatchComposition, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cycles = [
            Cycle::new(sizes[0], &mut rng),
            Cycle::new(sizes[1], &mut rng),
            Cycle::new(sizes[2], &mut rng),
        ];
        BatchSampler {
            cycles,
            counts: composition.counts(sizes),
            rng,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Indices into each source for the next batch.
    pub fn next_batch(&mut self) -> [Vec<usize>; 3] {
        let mut out: [Vec<usize>; 3] = Default::default();
        for s in 0..3 {
            for _ in 0..self.counts[s] {
                out[s].push(self.cycles[s].next(&mut self.rng));
            }
        }
        out
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Everything the trainer needs besides data and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WscdaConfig {
    pub loss: LossConfig,
    pub schedule: StageSchedule,
    pub composition: BatchComposition,
    pub disturbance: Disturbance,
    /// Heatmap Gaussian spread in grid cells.
    pub sigma: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = stage boundaries only).
    pub checkpoint_every: usize,
}

impl Default for WscdaConfig {
    fn default() -> Self {
        WscdaConfig {
            loss: LossConfig::default(),
            schedule: StageSchedule::default(),
            composition: BatchComposition::default(),
            disturbance: Disturbance::default(),
            sigma: DEFAULT_SIGMA,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl WscdaConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate_for_training()?;
        self.schedule.validate()?;
        self.composition.validate()?;
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub ddl: f64,
    pub apel: f64,
    pub hpel: f64,
    pub pose: f64,
    pub disc_acc_y: f64,
    pub disc_acc_z: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,stage,ddl,apel,hpel,disc_acc_y,disc_acc_z,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.9e},{:.9e},{:.9e},{:.6},{:.6},{:e}",
            r.epoch, r.stage, r.ddl, r.apel, r.hpel, r.disc_acc_y, r.disc_acc_z, r.lr
        );
    }
    s
}

/// Where the trainer writes checkpoints and its log; both optional.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct WscdaOutcome {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
    /// Index of the last stage entered.
    pub stage_reached: usize,
    pub checkpoints: Vec<PathBuf>,
    pub config_hash: String,
}

/// Builds one training item, applying the stage's disturbance.
pub(crate) fn make_item(
    inst: &Instance,
    disturb: bool,
    params: &Disturbance,
    seed: u64,
    grid: (usize, usize),
    sigma: f64,
    stride: usize,
) -> Result<BatchItem> {
    let img = inst.image()?;
    let (image, pose) = apply_disturbance(img, inst.pose.as_ref(), disturb, params, seed);
    let target = match (inst.domain, pose) {
        (Domain::AnimalTarget, _) => None,
        (_, Some(p)) => Some(PoseTarget::from_pose(&p, grid.0, grid.1, sigma, stride)?),
        (_, None) => {
            return Err(Error::Contract(format!("labeled instance {} has no pose", inst.id)));
        }
    };
    Ok(BatchItem {
        image,
        domain: inst.domain,
        target,
    })
}

/// Checks a source against its batch fraction and domain.
fn check_source(set: &AnnotationSet, fraction: f64, domain: Domain, what: &str) -> Result<()> {
    if fraction > 0.0 && set.is_empty() && domain != Domain::AnimalTarget {
        return Err(Error::Config(format!("{what} set is empty but its batch fraction is {fraction}")));
    }
    for inst in &set.instances {
        if inst.domain != domain {
            return Err(Error::Config(format!(
                "instance {} in the {what} set is tagged {}",
                inst.id,
                inst.domain.name()
            )));
        }
        if domain != Domain::AnimalTarget && inst.pose.is_none() {
            return Err(Error::Config(format!("instance {} in the {what} set has no pose", inst.id)));
        }
    }
    Ok(())
}

pub(crate) fn save_checkpoint(model: &Model, meta: StageMeta, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    Checkpoint::new(model, meta).save(&path)?;
    Ok(path)
}

/// Mutable state of a WS-CDA run, advanced one batch at a time. Also drives
/// the source phase of pseudo-label training.
pub struct SourceStepper<'a> {
    pub sets: [&'a AnnotationSet; 3],
    pub config: WscdaConfig,
    pub sampler: BatchSampler,
    pub optimizer: RmsProp,
}

impl<'a> SourceStepper<'a> {
    pub fn new(model: &Model, sets: [&'a AnnotationSet; 3], config: WscdaConfig, seed: u64) -> Self {
        let sizes = [sets[0].len(), sets[1].len(), sets[2].len()];
        let sampler = BatchSampler::new(sizes, &config.composition, seed);
        SourceStepper {
            sets,
            config,
            sampler,
            optimizer: RmsProp::new(model),
        }
    }

    /// Steps per epoch: one pass over all items at the configured batch size.
    pub fn steps_per_epoch(&self) -> usize {
        let per_batch: usize = self.sampler.counts().iter().sum();
        let total: usize = (0..3)
            .filter(|&s| self.sampler.counts()[s] > 0)
            .map(|s| self.sets[s].len())
            .sum();
        total.div_ceil(per_batch.max(1)).max(1)
    }

    /// Draws a batch and applies one adversarial update with `loss`.
    pub fn step(&mut self, model: &mut Model, loss: &LossConfig, lr: f64, disturb: bool) -> Result<StepStats> {
        let idx = self.sampler.next_batch();
        let grid = model.config.heatmap_size();
        let stride = model.config.stride;
        let mut batch = Vec::with_capacity(idx.iter().map(Vec::len).sum());
        for s in 0..3 {
            for &i in &idx[s] {
                let seed = self.sampler.next_seed();
                batch.push(make_item(
                    &self.sets[s].instances[i],
                    disturb,
                    &self.config.disturbance,
                    seed,
                    grid,
                    self.config.sigma,
                    stride,
                )?);
            }
        }
        let (grads, stats) = adversarial_gradients(model, &batch, loss)?;
        if !grads.is_finite() || !stats.ddl.total(loss.w1).is_finite() || !stats.pose.total.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                checkpoint: None,
            });
        }
        self.optimizer.step(model, &grads, lr);
        Ok(stats)
    }
}

/// Averages step statistics into one log row.
pub(crate) fn summarise(epoch: usize, stage: usize, lr: f64, w1: f64, w2: f64, steps: &[StepStats]) -> EpochMetrics {
    let n = steps.len().max(1) as f64;
    let items: usize = steps.iter().map(|s| s.items).sum();
    let animals: usize = steps.iter().map(|s| s.animal_items).sum();
    let apel = steps.iter().map(|s| s.pose.apel).sum::<f64>() / n;
    let hpel = steps.iter().map(|s| s.pose.hpel).sum::<f64>() / n;
    EpochMetrics {
        epoch,
        stage,
        ddl: steps.iter().map(|s| s.ddl.total(w1)).sum::<f64>() / n,
        apel,
        hpel,
        pose: w2 * apel + hpel,
        disc_acc_y: steps.iter().map(|s| s.correct_y).sum::<usize>() as f64 / items.max(1) as f64,
        disc_acc_z: if animals == 0 {
            f64::NAN
        } else {
            steps.iter().map(|s| s.correct_z).sum::<usize>() as f64 / animals as f64
        },
        lr,
    }
}

/// Trains `model` through the stage schedule.
///
/// Each epoch draws `ceil(N / B)` mixed batches, where `N` counts the items
/// of every source that appears in batches. The per-epoch pose loss drives
/// stage advancement. A non-finite loss writes a checkpoint (when a
/// checkpoint directory is set) and aborts with [`Error::Diverged`].
pub fn train_wscda(
    mut model: Model,
    human: &AnnotationSet,
    animal: &AnnotationSet,
    unlabeled: &AnnotationSet,
    config: &WscdaConfig,
    outputs: &Outputs,
) -> Result<WscdaOutcome> {
    config.validate()?;
    let comp = &config.composition;
    check_source(human, comp.human, Domain::Human, "human")?;
    check_source(animal, comp.animal, Domain::AnimalLabeled, "labeled animal")?;
    check_source(unlabeled, comp.unlabeled, Domain::AnimalTarget, "unlabeled")?;
    if human.is_empty() && animal.is_empty() {
        return Err(Error::Config("no pose-labeled data".into()));
    }
    if model.config.stride != DEFAULT_STRIDE {
        info!("training with output stride {}", model.config.stride);
    }
    let hash = config_hash(&(config, &model.config));
    let mut stepper = SourceStepper::new(&model, [human, animal, unlabeled], config.clone(), config.seed);
    let steps = stepper.steps_per_epoch();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut epoch = 0;
    let mut stage_reached = 0;
    let meta = |stage: usize, epoch: usize| StageMeta {
        phase: "wscda".into(),
        stage,
        epoch,
        mu: None,
        config_hash: Some(hash.clone()),
    };
    for (si, stage) in config.schedule.stages.iter().enumerate() {
        stage_reached = si;
        let mut history = Vec::new();
        loop {
            let mut stats = Vec::with_capacity(steps);
            for _ in 0..steps {
                match stepper.step(&mut model, &config.loss, stage.learning_rate, stage.disturbance) {
                    Ok(s) => stats.push(s),
                    Err(Error::Diverged { .. }) => {
                        let ck = match &outputs.checkpoint_dir {
                            Some(d) => Some(save_checkpoint(&model, meta(si, epoch), d, "diverged.json")?),
                            None => None,
                        };
                        if let Some(p) = &outputs.metrics_path {
                            write_text(p, &metrics_csv(&log))?;
                        }
                        return Err(Error::Diverged { epoch, checkpoint: ck });
                    }
                    Err(e) => return Err(e),
                }
            }
            let row = summarise(epoch, si, stage.learning_rate, config.loss.w1, config.loss.w2, &stats);
            info!(
                "epoch {epoch} stage {si}: ddl {:.4} apel {:.5} hpel {:.5} acc_y {:.2} acc_z {:.2}",
                row.ddl, row.apel, row.hpel, row.disc_acc_y, row.disc_acc_z
            );
            history.push(row.pose);
            log.push(row);
            epoch += 1;
            if let Some(dir) = &outputs.checkpoint_dir {
                if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                    checkpoints.push(save_checkpoint(&model, meta(si, epoch), dir, &format!("wscda-epoch{epoch:04}.json"))?);
                }
            }
            if stage_advance(&history, &config.schedule.rule) {
                break;
            }
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            checkpoints.push(save_checkpoint(&model, meta(si, epoch), dir, &format!("wscda-stage{si}.json"))?);
        }
    }
    if let Some(p) = &outputs.metrics_path {
        write_text(p, &metrics_csv(&log))?;
    }
    if log.iter().any(|r| r.disc_acc_z.is_nan()) && !unlabeled.is_empty() {
        warn!("some epochs saw no animal items");
    }
    Ok(WscdaOutcome {
        model,
        log,
        stage_reached,
        checkpoints,
        config_hash: hash,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
