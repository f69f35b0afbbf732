//! Loss stack: domain discrimination loss, weighted pose loss, the combined
//! adversarial objective, the self-paced pseudo-label target loss, and the
//! gradient-reversal training step that realises the adversarial objective.
//!
//! All losses are sums over batch items. Per-item heatmap MSE is averaged over
//! grid cells and annotated channels only.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{encode_heatmaps, HeatmapStack};
use crate::network::{BranchScales, DomainPrediction, GroupGrads, Model, DOMAIN_EPS};
use crate::optim::RmsProp;
use crate::types::{Domain, Image, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the human-vs-animal term of the discrimination loss.
    pub w1: f64,
    /// Rebalancing weight on the animal pose loss.
    pub w2: f64,
    /// Coefficient of the discrimination loss in the combined objective.
    pub alpha: f64,
    /// Coefficient of the pose loss in the combined objective.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w1: 1.0,
            w2: 10.0,
            alpha: -1.0,
            beta: 500.0,
        }
    }
}

impl LossConfig {
    /// The full adversarial contract: `alpha * beta < 0`, `w1 > 0`, `w2 >= 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha * self.beta < 0.0) {
            return Err(Error::Config(format!(
                "alpha * beta must be negative (alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        self.validate_weights()
    }

    /// Admits the degenerate ablations `alpha = 0` (no domain confusion) and
    /// `beta = 0` (domain loss only); still rejects `alpha * beta > 0`.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.alpha * self.beta > 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "alpha = {} and beta = {} are not adversarial",
                self.alpha, self.beta
            )));
        }
        self.validate_weights()
    }

    fn validate_weights(&self) -> Result<()> {
        if !(self.w1 > 0.0) {
            return Err(Error::Config(format!("w1 must be positive, got {}", self.w1)));
        }
        if !(self.w2 >= 1.0) {
            return Err(Error::Config(format!("w2 must be at least 1, got {}", self.w2)));
        }
        Ok(())
    }
}

fn bce(p: f64, label: u8) -> f64 {
    let p = p.clamp(DOMAIN_EPS, 1.0 - DOMAIN_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

// d bce / d p
fn bce_grad(p: f64, label: u8) -> f64 {
    let p = p.clamp(DOMAIN_EPS, 1.0 - DOMAIN_EPS);
    if label == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// The two terms of the domain discrimination loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DdlParts {
    /// Human-vs-animal cross-entropy, unweighted.
    pub species: f64,
    /// Labeled-vs-target cross-entropy over animal items.
    pub target: f64,
}

impl DdlParts {
    pub fn total(&self, w1: f64) -> f64 {
        w1 * self.species + self.target
    }
}

pub fn ddl_parts(preds: &[DomainPrediction], domains: &[Domain]) -> DdlParts {
    let mut parts = DdlParts::default();
    for (p, d) in preds.iter().zip(domains) {
        parts.species += bce(p.y_hat, d.y());
        if d.y() == 1 {
            parts.target += bce(p.z_hat, d.z());
        }
    }
    parts
}

/// Domain discrimination loss:
/// `-w1 * sum[y ln y_hat + (1-y) ln(1-y_hat)] - sum y * [z ln z_hat + (1-z) ln(1-z_hat)]`.
pub fn ddl(preds: &[DomainPrediction], domains: &[Domain], w1: f64) -> f64 {
    ddl_parts(preds, domains).total(w1)
}

/// Per-item `(dL/dy_hat, dL/dz_hat)`.
pub fn ddl_grad(preds: &[DomainPrediction], domains: &[Domain], w1: f64) -> Vec<[f64; 2]> {
    preds
        .iter()
        .zip(domains)
        .map(|(p, d)| {
            let gy = w1 * bce_grad(p.y_hat, d.y());
            let gz = if d.y() == 1 { bce_grad(p.z_hat, d.z()) } else { 0.0 };
            [gy, gz]
        })
        .collect()
}

/// Heatmap regression target with its channel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTarget {
    pub maps: HeatmapStack,
    pub annotated: Vec<bool>,
}

impl PoseTarget {
    pub fn from_pose(pose: &Pose, height: usize, width: usize, sigma: f64, stride: usize) -> Result<Self> {
        let maps = encode_heatmaps(pose, height, width, sigma, stride)?;
        Ok(PoseTarget {
            maps,
            annotated: pose.keypoints.iter().map(|k| k.is_annotated()).collect(),
        })
    }

    fn normaliser(&self) -> f64 {
        let n = self.annotated.iter().filter(|&&a| a).count();
        (n * self.maps.height * self.maps.width) as f64
    }
}

fn check_shapes(pred: &HeatmapStack, target: &PoseTarget) -> Result<()> {
    let t = &target.maps;
    if (pred.channels, pred.height, pred.width) != (t.channels, t.height, t.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.channels, pred.height, pred.width, t.channels, t.height, t.width
        )));
    }
    Ok(())
}

/// Mean squared error over grid cells of annotated channels.
pub fn heatmap_mse(pred: &HeatmapStack, target: &PoseTarget) -> Result<f64> {
    check_shapes(pred, target)?;
    let n = target.normaliser();
    if n == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (k, &a) in target.annotated.iter().enumerate() {
        if a {
            for (p, t) in pred.plane(k).iter().zip(target.maps.plane(k)) {
                acc += (p - t) * (p - t);
            }
        }
    }
    Ok(acc / n)
}

/// Gradient of [`heatmap_mse`] w.r.t. the predicted probabilities.
pub fn heatmap_mse_grad(pred: &HeatmapStack, target: &PoseTarget) -> Result<Vec<f64>> {
    check_shapes(pred, target)?;
    let mut g = vec![0.0; pred.maps.len()];
    let n = target.normaliser();
    if n == 0.0 {
        return Ok(g);
    }
    let plane = pred.height * pred.width;
    for (k, &a) in target.annotated.iter().enumerate() {
        if a {
            for j in k * plane..(k + 1) * plane {
                g[j] = 2.0 * (pred.maps[j] - target.maps.maps[j]) / n;
            }
        }
    }
    Ok(g)
}

/// Pose loss with its animal (APEL) and human (HPEL) components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseLoss {
    /// `w2 * apel + hpel`.
    pub total: f64,
    /// Sum of per-item MSE over labeled animal items.
    pub apel: f64,
    /// Sum of per-item MSE over human items.
    pub hpel: f64,
}

fn check_pose_items(n: usize, targets: usize, domains: &[Domain]) -> Result<()> {
    if n != targets || n != domains.len() {
        return Err(Error::Shape(format!(
            "pose loss got {n} predictions, {targets} targets, {} domain flags",
            domains.len()
        )));
    }
    if let Some(i) = domains.iter().position(|d| *d == Domain::AnimalTarget) {
        return Err(Error::Contract(format!(
            "item {i} is pose-unlabeled; it carries no pose loss"
        )));
    }
    Ok(())
}

/// `sum_i [w2 * y_i * MSE_i + (1 - y_i) * MSE_i]` over pose-labeled items.
pub fn pose_loss(preds: &[&HeatmapStack], targets: &[&PoseTarget], domains: &[Domain], w2: f64) -> Result<PoseLoss> {
    check_pose_items(preds.len(), targets.len(), domains)?;
    let mut out = PoseLoss::default();
    for ((p, t), d) in preds.iter().zip(targets).zip(domains) {
        let mse = heatmap_mse(p, t)?;
        if d.y() == 1 {
            out.apel += mse;
        } else {
            out.hpel += mse;
        }
    }
    out.total = w2 * out.apel + out.hpel;
    Ok(out)
}

pub fn pose_loss_grad(
    preds: &[&HeatmapStack],
    targets: &[&PoseTarget],
    domains: &[Domain],
    w2: f64,
) -> Result<Vec<Vec<f64>>> {
    check_pose_items(preds.len(), targets.len(), domains)?;
    preds
        .iter()
        .zip(targets)
        .zip(domains)
        .map(|((p, t), d)| {
            let w = if d.y() == 1 { w2 } else { 1.0 };
            let mut g = heatmap_mse_grad(p, t)?;
            for v in &mut g {
                *v *= w;
            }
            Ok(g)
        })
        .collect()
}

/// `alpha * ddl + beta * pose`, defined only under the adversarial contract.
pub fn wscda_loss(ddl_value: f64, pose_value: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha * beta < 0.0) {
        return Err(Error::Config(format!(
            "alpha * beta must be negative (alpha = {alpha}, beta = {beta})"
        )));
    }
    Ok(alpha * ddl_value + beta * pose_value)
}

/// Self-paced target loss over pseudo-labeled items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLoss {
    pub value: f64,
    pub accepted: usize,
}

impl TargetLoss {
    /// True when no item passed the confidence filter.
    pub fn no_pseudo_labels(&self) -> bool {
        self.accepted == 0
    }
}

/// `sum_j accept_j * MSE(pred_j, pseudo_target_j)`, taken with positive sign.
///
/// Rejected items are never read, so their targets may be anything.
pub fn pplo_target_loss(preds: &[&HeatmapStack], pseudo_targets: &[&PoseTarget], accept: &[bool]) -> Result<TargetLoss> {
    if preds.len() != accept.len() || pseudo_targets.len() != accept.len() {
        return Err(Error::Shape("target loss inputs differ in length".into()));
    }
    let mut value = 0.0;
    let mut accepted = 0;
    for ((p, t), &a) in preds.iter().zip(pseudo_targets).zip(accept) {
        if a {
            value += heatmap_mse(p, t)?;
            accepted += 1;
        }
    }
    Ok(TargetLoss { value, accepted })
}

pub fn pplo_target_grad(preds: &[&HeatmapStack], pseudo_targets: &[&PoseTarget], accept: &[bool]) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .zip(pseudo_targets)
        .zip(accept)
        .map(|((p, t), &a)| if a { heatmap_mse_grad(p, t) } else { Ok(vec![0.0; p.maps.len()]) })
        .collect()
}

/// One training item: pixels, domain and (for labeled items) the heatmap target.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: Image,
    pub domain: Domain,
    pub target: Option<PoseTarget>,
}

/// Losses and discriminator accuracy observed during one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub ddl: DdlParts,
    pub pose: PoseLoss,
    pub items: usize,
    pub animal_items: usize,
    pub correct_y: usize,
    pub correct_z: usize,
}

/// Forward pass plus gradients of the adversarial step, without updating.
///
/// Discriminator parameters receive `|alpha| * dDDL`, the extractor receives
/// `-|alpha| * dDDL + beta * dPose`, the adapter and keypoint head receive
/// `beta * dPose`.
pub fn adversarial_gradients(model: &Model, batch: &[BatchItem], config: &LossConfig) -> Result<(GroupGrads, StepStats)> {
    config.validate_for_training()?;
    let images: Vec<&Image> = batch.iter().map(|b| &b.image).collect();
    let traced = model.forward_traced(&images)?;
    let domains: Vec<Domain> = batch.iter().map(|b| b.domain).collect();
    let preds: Vec<DomainPrediction> = traced.iter().map(|(o, _)| o.domain).collect();

    let distinct = {
        let mut d = domains.clone();
        d.sort();
        d.dedup();
        d.len()
    };
    if distinct < 2 {
        warn!("single-domain batch; applying the domain gradient anyway");
    }

    let mut stats = StepStats {
        ddl: ddl_parts(&preds, &domains),
        items: batch.len(),
        ..StepStats::default()
    };
    for (p, d) in preds.iter().zip(&domains) {
        if (p.y_hat > 0.5) == (d.y() == 1) {
            stats.correct_y += 1;
        }
        if d.y() == 1 {
            stats.animal_items += 1;
            if (p.z_hat > 0.5) == (d.z() == 1) {
                stats.correct_z += 1;
            }
        }
    }
    let d_dom = ddl_grad(&preds, &domains, config.w1);

    let labeled: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].target.is_some()).collect();
    let lp: Vec<&HeatmapStack> = labeled.iter().map(|&i| &traced[i].0.heatmaps).collect();
    let lt: Vec<&PoseTarget> = labeled.iter().map(|&i| batch[i].target.as_ref().expect("filtered")).collect();
    let ld: Vec<Domain> = labeled.iter().map(|&i| domains[i]).collect();
    stats.pose = pose_loss(&lp, &lt, &ld, config.w2)?;
    let d_pose = pose_loss_grad(&lp, &lt, &ld, config.w2)?;

    let scales = BranchScales {
        pose: config.beta,
        discriminator: config.alpha.abs(),
        reversal: -config.alpha.abs(),
    };
    let mut grads = GroupGrads::zeros_like(model);
    let mut pose_iter = labeled.iter().zip(&d_pose).peekable();
    for (i, (_, trace)) in traced.iter().enumerate() {
        let dh = match pose_iter.peek() {
            Some((&j, g)) if j == i => {
                let g = g.as_slice();
                pose_iter.next();
                Some(g)
            }
            _ => None,
        };
        model.backward(trace, dh, Some(d_dom[i]), scales, &mut grads);
    }
    Ok((grads, stats))
}

/// One adversarial update with RMSProp.
pub fn adversarial_step(
    model: &mut Model,
    batch: &[BatchItem],
    config: &LossConfig,
    optimizer: &mut RmsProp,
    lr: f64,
) -> Result<StepStats> {
    let (grads, stats) = adversarial_gradients(model, batch, config)?;
    if !grads.is_finite() {
        return Err(Error::Contract("non-finite gradient".into()));
    }
    optimizer.step(model, &grads, lr);
    Ok(stats)
}

/// Gradient of `scale * pplo_target_loss` over the pose path only.
pub fn target_gradients(
    model: &Model,
    images: &[&Image],
    targets: &[&PoseTarget],
    scale: f64,
) -> Result<(GroupGrads, TargetLoss)> {
    let traced = model.forward_traced(images)?;
    let preds: Vec<&HeatmapStack> = traced.iter().map(|(o, _)| &o.heatmaps).collect();
    let accept = vec![true; images.len()];
    let loss = pplo_target_loss(&preds, targets, &accept)?;
    let g = pplo_target_grad(&preds, targets, &accept)?;
    let mut grads = GroupGrads::zeros_like(model);
    let scales = BranchScales {
        pose: scale,
        discriminator: 0.0,
        reversal: 0.0,
    };
    for ((_, trace), gi) in traced.iter().zip(&g) {
        model.backward(trace, Some(gi), None, scales, &mut grads);
    }
    Ok((grads, loss))
}

/// Which scalar [`gradient_groups`] differentiates.
#[derive(Debug, Clone, Copy)]
pub enum LossKind<'a> {
    Ddl { domains: &'a [Domain], w1: f64 },
    Pose { targets: &'a [&'a PoseTarget], domains: &'a [Domain], w2: f64 },
    Target { targets: &'a [&'a PoseTarget], accept: &'a [bool] },
}

/// Value of a loss on `images`, for finite-difference checks.
pub fn loss_value(model: &Model, images: &[&Image], loss: LossKind<'_>) -> Result<f64> {
    let out = model.forward(images)?;
    match loss {
        LossKind::Ddl { domains, w1 } => {
            let p: Vec<DomainPrediction> = out.iter().map(|o| o.domain).collect();
            Ok(ddl(&p, domains, w1))
        }
        LossKind::Pose { targets, domains, w2 } => {
            let p: Vec<&HeatmapStack> = out.iter().map(|o| &o.heatmaps).collect();
            Ok(pose_loss(&p, targets, domains, w2)?.total)
        }
        LossKind::Target { targets, accept } => {
            let p: Vec<&HeatmapStack> = out.iter().map(|o| &o.heatmaps).collect();
            Ok(pplo_target_loss(&p, targets, accept)?.value)
        }
    }
}

/// Plain gradients of one loss, partitioned by parameter group. Groups the
/// loss does not reach get zeros.
pub fn gradient_groups(model: &Model, images: &[&Image], loss: LossKind<'_>) -> Result<GroupGrads> {
    let traced = model.forward_traced(images)?;
    let mut grads = GroupGrads::zeros_like(model);
    match loss {
        LossKind::Ddl { domains, w1 } => {
            let p: Vec<DomainPrediction> = traced.iter().map(|(o, _)| o.domain).collect();
            for ((_, t), g) in traced.iter().zip(ddl_grad(&p, domains, w1)) {
                model.backward(t, None, Some(g), BranchScales::PLAIN, &mut grads);
            }
        }
        LossKind::Pose { targets, domains, w2 } => {
            let p: Vec<&HeatmapStack> = traced.iter().map(|(o, _)| &o.heatmaps).collect();
            for ((_, t), g) in traced.iter().zip(pose_loss_grad(&p, targets, domains, w2)?) {
                model.backward(t, Some(&g), None, BranchScales::PLAIN, &mut grads);
            }
        }
        LossKind::Target { targets, accept } => {
            let p: Vec<&HeatmapStack> = traced.iter().map(|(o, _)| &o.heatmaps).collect();
            for ((_, t), g) in traced.iter().zip(pplo_target_grad(&p, targets, accept)?) {
                model.backward(t, Some(&g), None, BranchScales::PLAIN, &mut grads);
            }
        }
    }
    Ok(grads)
}
