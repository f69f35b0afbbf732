//! Self-paced pseudo-label boosting on the target domain.
//!
//! Each epoch alternates a source phase (labeled batches under the adversarial
//! loss stack), a refresh sweep that stores confident target predictions, and
//! a target phase that trains on the stored pseudo-labels. The acceptance
//! threshold starts strict and relaxes by a fixed step after every window of
//! epochs in which some pseudo-label was written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::datasets::AnnotationSet;
use crate::error::{Error, Result};
use crate::eval::predict;
use crate::losses::{target_gradients, LossConfig, PoseTarget};
use crate::network::{Model, StageMeta};
use crate::types::{Image, Pose};
use crate::wscda::{apply_disturbance, save_checkpoint, write_text, SourceStepper, WscdaConfig};

/// 1 iff `confidence` strictly exceeds `mu`.
pub fn confidence_filter(confidence: f64, mu: f64) -> bool {
    confidence > mu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub pose: Pose,
    pub confidence: f64,
    /// Epoch of the refresh that wrote this entry.
    pub epoch: usize,
    /// Threshold in force when the entry was written.
    pub mu: f64,
}

/// Accepted pseudo-labels by target instance id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    entries: BTreeMap<String, PseudoLabel>,
}

impl PseudoLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PseudoLabel> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PseudoLabel)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Writes an entry, replacing any previous one whole. Rejects labels that
    /// do not pass the filter at their recorded threshold.
    pub fn accept(&mut self, id: &str, label: PseudoLabel) -> Result<()> {
        if !confidence_filter(label.confidence, label.mu) {
            return Err(Error::Contract(format!(
                "pseudo-label for {id} has confidence {} not above {}",
                label.confidence, label.mu
            )));
        }
        self.entries.insert(id.to_string(), label);
        Ok(())
    }

    /// Checks every entry against the threshold it was accepted under.
    pub fn validate(&self) -> Result<()> {
        for (id, l) in &self.entries {
            if !confidence_filter(l.confidence, l.mu) {
                return Err(Error::Contract(format!("stored pseudo-label {id} violates its threshold")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let store: PseudoLabelStore = serde_json::from_str(&s)?;
        store.validate()?;
        Ok(store)
    }
}

/// Predicts every target instance with a frozen model and stores those whose
/// confidence passes the filter. Returns the number of entries written.
pub fn refresh_pseudo_labels(
    model: &Model,
    target: &AnnotationSet,
    store: &mut PseudoLabelStore,
    mu: f64,
    epoch: usize,
) -> Result<usize> {
    if target.is_empty() {
        return Ok(0);
    }
    let preds = predict(model, target)?;
    let mut written = 0;
    for (inst, (pose, confidence)) in target.instances.iter().zip(preds) {
        if confidence_filter(confidence, mu) {
            store.accept(
                &inst.id,
                PseudoLabel {
                    pose,
                    confidence,
                    epoch,
                    mu,
                },
            )?;
            written += 1;
        }
    }
    Ok(written)
}

/// The relaxed threshold after a window with `updates` writes.
pub fn relax_mu(mu: f64, updates: usize, config: &PploConfig) -> f64 {
    if updates > 0 {
        (mu - config.mu_step).max(0.0)
    } else {
        mu
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PploConfig {
    pub mu0: f64,
    pub mu_step: f64,
    /// Epochs between relaxation checks.
    pub mu_window: usize,
    /// Source steps per epoch; one pass over the source data when unset.
    pub source_steps: Option<usize>,
    /// Target steps per epoch; one pass over the accepted labels when unset.
    pub target_steps: Option<usize>,
    /// Keep the domain discriminator loss in the source phase.
    pub source_ddl: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub disturbance: bool,
    /// Weight on the target loss; the pose weight of the loss stack when unset.
    pub target_weight: Option<f64>,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for PploConfig {
    fn default() -> Self {
        PploConfig {
            mu0: 0.9,
            mu_step: 0.01,
            mu_window: 10,
            source_steps: None,
            target_steps: None,
            source_ddl: true,
            epochs: 30,
            learning_rate: 1e-5,
            disturbance: true,
            target_weight: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl PploConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mu0 > 0.0 && self.mu0 <= 1.0) {
            return bad(format!("mu0 must lie in (0, 1], got {}", self.mu0));
        }
        if !(self.mu_step > 0.0) {
            return bad(format!("mu_step must be positive, got {}", self.mu_step));
        }
        if self.mu_window == 0 {
            return bad("mu_window must be at least 1".into());
        }
        if self.source_steps == Some(0) || self.target_steps == Some(0) {
            return bad("per-epoch step counts must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} is not positive", self.learning_rate));
        }
        if let Some(w) = self.target_weight {
            if !(w > 0.0) {
                return bad(format!("target weight must be positive, got {w}"));
            }
        }
        Ok(())
    }
}

/// What happened, in order, during pseudo-label training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum PhaseEvent {
    Source { epoch: usize, steps: usize, loss: f64 },
    Refresh { epoch: usize, mu: f64, written: usize, accepted: usize },
    Target { epoch: usize, steps: usize, loss: f64 },
    TargetSkipped { epoch: usize },
    Relax { epoch: usize, from: f64, to: f64, updates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PploMetrics {
    pub epoch: usize,
    /// Threshold used by this epoch's refresh.
    pub mu: f64,
    pub accepted_count: usize,
    pub new_or_updated_count: usize,
    pub source_loss: f64,
    pub target_loss: f64,
}

pub const PPLO_METRICS_HEADER: &str = "epoch,mu,accepted_count,new_or_updated_count,source_loss,target_loss";

pub fn pplo_metrics_csv(rows: &[PploMetrics]) -> String {
    let mut s = String::from(PPLO_METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{},{},{:.6},{:.6}",
            r.epoch, r.mu, r.accepted_count, r.new_or_updated_count, r.source_loss, r.target_loss
        );
    }
    s
}

/// Live state of a pseudo-label run.
pub struct PploState<'a> {
    pub source: SourceStepper<'a>,
    pub target: &'a AnnotationSet,
    pub config: PploConfig,
    pub store: PseudoLabelStore,
    pub mu: f64,
    pub epoch: usize,
    pub events: Vec<PhaseEvent>,
    window_updates: usize,
    rng: ChaCha8Rng,
}

impl<'a> PploState<'a> {
    /// `sources` are the human, labeled-animal and unlabeled sets of the
    /// source phase; `target` is the set that receives pseudo-labels.
    pub fn new(
        model: &Model,
        sources: [&'a AnnotationSet; 3],
        target: &'a AnnotationSet,
        wscda: &WscdaConfig,
        config: PploConfig,
    ) -> Result<Self> {
        config.validate()?;
        wscda.validate()?;
        let mut wscda = wscda.clone();
        if !config.source_ddl {
            wscda.loss.alpha = 0.0;
        }
        Ok(PploState {
            source: SourceStepper::new(model, sources, wscda, config.seed),
            target,
            mu: config.mu0,
            store: PseudoLabelStore::new(),
            epoch: 0,
            events: Vec::new(),
            window_updates: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            config,
        })
    }

    fn loss(&self) -> LossConfig {
        self.source.config.loss
    }
}

/// One epoch: source phase, refresh sweep, target phase, then a threshold
/// check when a window closes.
pub fn pplo_epoch(model: &mut Model, st: &mut PploState<'_>) -> Result<PploMetrics> {
    let epoch = st.epoch;
    let lr = st.config.learning_rate;
    let loss = st.loss();

    let ks = st.config.source_steps.unwrap_or_else(|| st.source.steps_per_epoch());
    let mut source_loss = 0.0;
    for _ in 0..ks {
        let s = st.source.step(model, &loss, lr, st.config.disturbance)?;
        source_loss += s.pose.total;
    }
    source_loss /= ks as f64;
    st.events.push(PhaseEvent::Source {
        epoch,
        steps: ks,
        loss: source_loss,
    });

    let mu = st.mu;
    let written = refresh_pseudo_labels(model, st.target, &mut st.store, mu, epoch)?;
    st.window_updates += written;
    st.events.push(PhaseEvent::Refresh {
        epoch,
        mu,
        written,
        accepted: st.store.len(),
    });

    let target_loss = if st.store.is_empty() {
        warn!("epoch {epoch}: no pseudo-labels above {mu:.2}, skipping the target phase");
        st.events.push(PhaseEvent::TargetSkipped { epoch });
        0.0
    } else {
        let (steps, value) = target_phase(model, st)?;
        st.events.push(PhaseEvent::Target {
            epoch,
            steps,
            loss: value,
        });
        value
    };

    st.epoch += 1;
    if st.epoch % st.config.mu_window == 0 {
        let from = st.mu;
        st.mu = relax_mu(from, st.window_updates, &st.config);
        st.events.push(PhaseEvent::Relax {
            epoch,
            from,
            to: st.mu,
            updates: st.window_updates,
        });
        st.window_updates = 0;
    }
    Ok(PploMetrics {
        epoch,
        mu,
        accepted_count: st.store.len(),
        new_or_updated_count: written,
        source_loss,
        target_loss,
    })
}

fn target_phase(model: &mut Model, st: &mut PploState<'_>) -> Result<(usize, f64)> {
    let mut ids = st.store.ids();
    ids.shuffle(&mut st.rng);
    let b = st.source.config.composition.batch_size.max(1);
    let kt = st.config.target_steps.unwrap_or_else(|| ids.len().div_ceil(b));
    let (gh, gw) = model.config.heatmap_size();
    let stride = model.config.stride;
    let sigma = st.source.config.sigma;
    let scale = st.config.target_weight.unwrap_or(st.source.config.loss.beta);
    let mut total = 0.0;
    let mut cursor = 0;
    for _ in 0..kt {
        let mut images = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for _ in 0..b.min(ids.len()) {
            if cursor == ids.len() {
                ids.shuffle(&mut st.rng);
                cursor = 0;
            }
            let id = &ids[cursor];
            cursor += 1;
            let inst = st
                .target
                .find(id)
                .ok_or_else(|| Error::Contract(format!("pseudo-label {id} is not in the target set")))?;
            let label = &st.store.get(id).expect("id from store").pose;
            let seed = st.source.sampler.next_seed();
            let (img, pose) = apply_disturbance(
                inst.image()?,
                Some(label),
                st.config.disturbance,
                &st.source.config.disturbance,
                seed,
            );
            let pose = pose.expect("pose passed in");
            targets.push(PoseTarget::from_pose(&pose, gh, gw, sigma, stride)?);
            images.push(img);
        }
        let refs: Vec<&Image> = images.iter().collect();
        let trefs: Vec<&PoseTarget> = targets.iter().collect();
        let (grads, value) = target_gradients(model, &refs, &trefs, scale)?;
        if !grads.is_finite() || !value.value.is_finite() {
            return Err(Error::Diverged {
                epoch: st.epoch,
                checkpoint: None,
            });
        }
        st.source.optimizer.step(model, &grads, st.config.learning_rate);
        total += value.value;
    }
    Ok((kt, total / kt.max(1) as f64))
}

#[derive(Debug, Clone, Default)]
pub struct PploOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
    pub events_path: Option<PathBuf>,
}

pub struct PploOutcome {
    pub model: Model,
    pub log: Vec<PploMetrics>,
    pub store: PseudoLabelStore,
    pub events: Vec<PhaseEvent>,
    pub mu: f64,
    pub checkpoints: Vec<PathBuf>,
    pub config_hash: String,
}

/// Runs `config.epochs` pseudo-label epochs on a model pre-trained by the
/// adversarial trainer.
pub fn train_pplo(
    mut model: Model,
    sources: [&AnnotationSet; 3],
    target: &AnnotationSet,
    wscda: &WscdaConfig,
    config: &PploConfig,
    outputs: &PploOutputs,
) -> Result<PploOutcome> {
    if sources[0].is_empty() && sources[1].is_empty() {
        return Err(Error::Config("no pose-labeled source data".into()));
    }
    if let Some(inst) = target.instances.iter().find(|i| i.pose.is_some()) {
        warn!("target instance {} carries a pose; it is ignored", inst.id);
    }
    let hash = config_hash(&(wscda, config, &model.config));
    let mut st = PploState::new(&model, sources, target, wscda, config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let meta = |epoch: usize, mu: f64| StageMeta {
        phase: "pplo".into(),
        stage: 0,
        epoch,
        mu: Some(mu),
        config_hash: Some(hash.clone()),
    };
    for _ in 0..config.epochs {
        let row = match pplo_epoch(&mut model, &mut st) {
            Ok(r) => r,
            Err(Error::Diverged { epoch, .. }) => {
                let ck = match &outputs.checkpoint_dir {
                    Some(d) => Some(save_checkpoint(&model, meta(epoch, st.mu), d, "diverged.json")?),
                    None => None,
                };
                return Err(Error::Diverged { epoch, checkpoint: ck });
            }
            Err(e) => return Err(e),
        };
        info!(
            "pplo epoch {}: mu {:.2} accepted {} written {} source {:.5} target {:.5}",
            row.epoch, row.mu, row.accepted_count, row.new_or_updated_count, row.source_loss, row.target_loss
        );
        log.push(row);
        if let Some(dir) = &outputs.checkpoint_dir {
            if config.checkpoint_every > 0 && st.epoch % config.checkpoint_every == 0 {
                checkpoints.push(save_checkpoint(&model, meta(st.epoch, st.mu), dir, &format!("pplo-epoch{:04}.json", st.epoch))?);
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        checkpoints.push(save_checkpoint(&model, meta(st.epoch, st.mu), dir, "pplo-final.json")?);
    }
    if let Some(p) = &outputs.metrics_path {
        write_text(p, &pplo_metrics_csv(&log))?;
    }
    if let Some(p) = &outputs.store_path {
        st.store.save(p)?;
    }
    if let Some(p) = &outputs.events_path {
        write_text(p, &serde_json::to_string_pretty(&st.events)?)?;
    }
    Ok(PploOutcome {
        model,
        log,
        mu: st.mu,
        store: st.store,
        events: st.events,
        checkpoints,
        config_hash: hash,
    })
}
