//! Desk-scale experiments on synthetic domains: the method comparison on a
//! held-out species, the labeled-target sweep, and the component ablation.
//!
//! Every run is a [`Variant`] of the same task, so the three experiments
//! differ only in which toggles they sweep.

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_domain, AnnotationSet, Split, SynthDomainSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResults, RunRecord};
use crate::losses::LossConfig;
use crate::network::{Model, ModelConfig};
use crate::pplo::{train_pplo, PploConfig, PploMetrics, PploOutputs};
use crate::types::Domain;
use crate::wscda::{
    train_wscda, AdvanceRule, BatchComposition, EpochMetrics, Outputs, Stage, StageSchedule, WscdaConfig,
};

/// Synthetic task: labeled humans and a few labeled species, one held-out
/// target species seen only unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskTask {
    pub image_size: usize,
    pub humans: usize,
    /// Labeled source species and their instance counts.
    pub labeled: Vec<(String, usize)>,
    pub target: String,
    pub unlabeled: usize,
    pub eval: usize,
    /// Labeled target instances available to supervised boosting.
    pub target_pool: usize,
    /// Seed of the evaluation set, shared by every run.
    pub eval_seed: u64,
}

impl Default for DeskTask {
    fn default() -> Self {
        DeskTask {
            image_size: 48,
            humans: 240,
            labeled: vec![("dog".into(), 30), ("horse".into(), 30)],
            target: "cow".into(),
            unlabeled: 120,
            eval: 100,
            target_pool: 50,
            eval_seed: 9_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskData {
    pub human: AnnotationSet,
    pub animal: AnnotationSet,
    pub unlabeled: AnnotationSet,
    /// Held-out target instances with ground truth.
    pub eval: AnnotationSet,
    /// Labeled target instances, tagged as labeled animals.
    pub target_pool: AnnotationSet,
}

impl DeskTask {
    fn spec(&self, mut s: SynthDomainSpec) -> SynthDomainSpec {
        s.image_size = self.image_size;
        s
    }

    /// Renders all sets. Training sets depend on `seed`; the evaluation set
    /// depends only on `eval_seed`.
    pub fn generate(&self, seed: u64) -> Result<DeskData> {
        let base = seed.wrapping_mul(1_000);
        let (human, _) = generate_domain(&self.spec(SynthDomainSpec::human(self.humans, base + 1)))?;
        let mut animal: Option<AnnotationSet> = None;
        for (k, (species, n)) in self.labeled.iter().enumerate() {
            if *species == self.target {
                return Err(Error::Config(format!("{species} is both a source and the target")));
            }
            let spec = SynthDomainSpec::animal(species, Domain::AnimalLabeled, *n, base + 10 + k as u64)?;
            let (set, _) = generate_domain(&self.spec(spec))?;
            animal = Some(match animal {
                Some(a) => a.merged(&set)?,
                None => set,
            });
        }
        let animal = animal.ok_or_else(|| Error::Config("no labeled source species".into()))?;
        let target = |n: usize, s: u64| -> Result<(AnnotationSet, AnnotationSet)> {
            let spec = SynthDomainSpec::animal(&self.target, Domain::AnimalTarget, n, s)?;
            let (visible, truth) = generate_domain(&self.spec(spec))?;
            Ok((visible, truth.expect("target sets carry truth")))
        };
        let (unlabeled, _) = target(self.unlabeled, base + 2)?;
        let (_, mut eval) = target(self.eval, self.eval_seed)?;
        eval.splits = vec![Split::Test; eval.len()];
        let (_, pool) = target(self.target_pool, base + 3)?;
        Ok(DeskData {
            human,
            animal,
            unlabeled,
            eval,
            target_pool: pool,
        })
    }
}

/// Four-stage encoder, one-block adapter, two upsampling blocks.
pub fn desk_model(image_size: usize, keypoints: usize) -> ModelConfig {
    ModelConfig {
        input_height: image_size,
        input_width: image_size,
        stage_channels: vec![8, 16, 16, 16],
        dan_width: 16,
        head_width: 16,
        disc_hidden: 16,
        keypoints,
        ..ModelConfig::default()
    }
}

/// The three-stage schedule at desk-scale learning rates.
pub fn desk_wscda(seed: u64) -> WscdaConfig {
    let lr = 2e-3;
    WscdaConfig {
        schedule: StageSchedule {
            stages: vec![
                Stage { learning_rate: lr, disturbance: false },
                Stage { learning_rate: lr, disturbance: true },
                Stage { learning_rate: lr / 10.0, disturbance: true },
            ],
            rule: AdvanceRule { max_epochs: 15, ..AdvanceRule::default() },
        },
        composition: BatchComposition { batch_size: 32, ..BatchComposition::default() },
        seed,
        ..WscdaConfig::default()
    }
}

/// Pseudo-label settings for desk-scale models, whose peak confidences sit
/// well below those of full-size networks.
pub fn desk_pplo(seed: u64) -> PploConfig {
    PploConfig {
        mu0: 0.7,
        mu_window: 5,
        epochs: 30,
        learning_rate: 5e-4,
        seed,
        ..PploConfig::default()
    }
}

/// One training recipe, named by its toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// Labeled source animals used; `None` keeps all.
    pub n_animal: Option<usize>,
    pub human: bool,
    /// Adaptation network plus adversarial discriminator.
    pub dan: bool,
    pub unlabeled: bool,
    /// Animal pose loss weighted by 10 instead of 1.
    pub reweight: bool,
    pub pplo: bool,
    /// Labeled target instances added to the labeled animals.
    pub n_gt: usize,
}

impl Variant {
    /// Trained on labeled animals alone, no adaptation.
    pub fn baseline() -> Self {
        Variant {
            name: "baseline".into(),
            n_animal: None,
            human: false,
            dan: false,
            unlabeled: false,
            reweight: false,
            pplo: false,
            n_gt: 0,
        }
    }

    pub fn wscda(reweight: bool) -> Self {
        Variant {
            name: if reweight { "wscda".into() } else { "wscda-w2=1".into() },
            human: true,
            dan: true,
            unlabeled: true,
            reweight,
            ..Self::baseline()
        }
    }

    pub fn wscda_pplo() -> Self {
        Variant {
            name: "wscda+pplo".into(),
            pplo: true,
            ..Self::wscda(true)
        }
    }

    pub fn supervised_boost(n_gt: usize) -> Self {
        Variant {
            name: format!("boost-ngt{n_gt}"),
            n_gt,
            ..Self::wscda_pplo()
        }
    }

    /// The five ablation columns as (name, value) pairs.
    pub fn toggles(&self, data: &DeskData) -> Vec<(String, String)> {
        let mark = |b: bool| if b { "x" } else { "-" }.to_string();
        let n_a = self.n_animal.unwrap_or(data.animal.len()).min(data.animal.len());
        vec![
            ("N_A".into(), format!("{n_a:03}")),
            ("H".into(), mark(self.human)),
            ("DAN".into(), mark(self.dan)),
            ("UA".into(), mark(self.unlabeled)),
            ("RB".into(), mark(self.reweight)),
        ]
    }

    /// Configs for this variant; fractions are renormalised over the
    /// sources it actually uses.
    pub fn configs(&self, task: &DeskTask, seed: u64) -> (ModelConfig, WscdaConfig, PploConfig) {
        let mut model = desk_model(task.image_size, 19);
        model.use_dan = self.dan;
        let mut w = desk_wscda(seed);
        w.loss = LossConfig {
            alpha: if self.dan { -1.0 } else { 0.0 },
            w2: if self.reweight { 10.0 } else { 1.0 },
            ..LossConfig::default()
        };
        let d = BatchComposition::default();
        let raw = [
            if self.human { d.human } else { 0.0 },
            if self.n_animal == Some(0) { 0.0 } else { d.animal },
            if self.unlabeled { d.unlabeled } else { 0.0 },
        ];
        let z: f64 = raw.iter().sum();
        w.composition.human = raw[0] / z;
        w.composition.animal = raw[1] / z;
        w.composition.unlabeled = raw[2] / z;
        (model, w, desk_pplo(seed))
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub results: EvalResults,
    pub wscda_log: Vec<EpochMetrics>,
    pub pplo_log: Vec<PploMetrics>,
    /// Target PCK before pseudo-label training, when it ran.
    pub pck_before_pplo: Option<f64>,
    pub model: Model,
}

impl VariantOutcome {
    pub fn pck(&self) -> f64 {
        self.results.pck
    }

    pub fn record(&self, data: &DeskData) -> RunRecord {
        let mut curve: Vec<(usize, f64)> = self.wscda_log.iter().map(|r| (r.epoch, r.pose)).collect();
        let offset = curve.len();
        curve.extend(self.pplo_log.iter().map(|r| (offset + r.epoch, r.source_loss)));
        RunRecord {
            name: format!("{}-s{}", self.variant.name, self.seed),
            config: self.variant.toggles(data),
            results: self.results.clone(),
            curve,
        }
    }
}

/// Trains and scores one variant.
pub fn run_variant(task: &DeskTask, data: &DeskData, v: &Variant, seed: u64) -> Result<VariantOutcome> {
    let (mc, wc, pc) = v.configs(task, seed);
    let n_a = v.n_animal.unwrap_or(data.animal.len()).min(data.animal.len());
    let mut animal = data.animal.subset(&(0..n_a).collect::<Vec<_>>());
    if v.n_gt > data.target_pool.len() {
        return Err(Error::Config(format!(
            "{} labeled target instances requested, {} available",
            v.n_gt,
            data.target_pool.len()
        )));
    }
    if v.n_gt > 0 {
        animal = animal.merged(&data.target_pool.subset(&(0..v.n_gt).collect::<Vec<_>>()))?;
    }
    let empty_h = data.human.subset(&[]);
    let empty_u = data.unlabeled.subset(&[]);
    let human = if v.human { &data.human } else { &empty_h };
    let unlabeled = if v.unlabeled { &data.unlabeled } else { &empty_u };
    let model = Model::build(&mc, seed)?;
    let out = train_wscda(model, human, &animal, unlabeled, &wc, &Outputs::default())?;
    let (model, pplo_log, before) = if v.pplo {
        let before = evaluate(&out.model, &data.eval, 0.2)?.pck;
        let p = train_pplo(out.model, [human, &animal, unlabeled], &data.unlabeled, &wc, &pc, &PploOutputs::default())?;
        (p.model, p.log, Some(before))
    } else {
        (out.model, Vec::new(), None)
    };
    let mut results = evaluate(&model, &data.eval, 0.2)?;
    results.config_hash = Some(crate::config::config_hash(&(v, &mc, &wc, &pc)));
    Ok(VariantOutcome {
        variant: v.clone(),
        seed,
        results,
        wscda_log: out.log,
        pplo_log,
        pck_before_pplo: before,
        model,
    })
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// One directional check: `hi` beats `lo` by more than the larger of the
/// two standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub lower: String,
    pub higher: String,
    pub lower_mean: f64,
    pub higher_mean: f64,
    pub se: f64,
    pub pass: bool,
}

pub fn order_check(lower: (&str, &[f64]), higher: (&str, &[f64])) -> OrderCheck {
    let (ml, sl) = mean_se(lower.1);
    let (mh, sh) = mean_se(higher.1);
    let se = sl.max(sh);
    OrderCheck {
        lower: lower.0.into(),
        higher: higher.0.into(),
        lower_mean: ml,
        higher_mean: mh,
        se,
        pass: mh - ml > se,
    }
}

/// Target PCK per seed for each method of the held-out-species comparison.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub seeds: Vec<u64>,
    pub baseline: Vec<f64>,
    pub wscda_w2_1: Vec<f64>,
    pub wscda: Vec<f64>,
    pub wscda_pplo: Vec<f64>,
}

impl MethodComparison {
    pub fn checks(&self) -> Vec<OrderCheck> {
        vec![
            order_check(("baseline", &self.baseline), ("wscda", &self.wscda)),
            order_check(("wscda", &self.wscda), ("wscda+pplo", &self.wscda_pplo)),
            order_check(("wscda-w2=1", &self.wscda_w2_1), ("wscda", &self.wscda)),
        ]
    }
}

/// Baseline, both loss weightings, and pseudo-label boosting on each seed.
/// Pseudo-label training continues from the same seed's adversarial model.
pub fn method_comparison(task: &DeskTask, seeds: &[u64]) -> Result<MethodComparison> {
    let mut mc = MethodComparison {
        seeds: seeds.to_vec(),
        ..Default::default()
    };
    for &seed in seeds {
        let data = task.generate(seed)?;
        mc.baseline.push(run_variant(task, &data, &Variant::baseline(), seed)?.pck());
        mc.wscda_w2_1.push(run_variant(task, &data, &Variant::wscda(false), seed)?.pck());
        let full = run_variant(task, &data, &Variant::wscda_pplo(), seed)?;
        mc.wscda.push(full.pck_before_pplo.expect("pseudo-label run"));
        mc.wscda_pplo.push(full.pck());
    }
    Ok(mc)
}

/// Mean target PCK of the full pipeline for each labeled-target count.
pub fn labeled_target_sweep(task: &DeskTask, seeds: &[u64], counts: &[usize]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out: Vec<(usize, Vec<f64>)> = counts.iter().map(|&n| (n, Vec::new())).collect();
    for &seed in seeds {
        let data = task.generate(seed)?;
        for (n, pcks) in &mut out {
            pcks.push(run_variant(task, &data, &Variant::supervised_boost(*n), seed)?.pck());
        }
    }
    Ok(out)
}

/// The component ablation rows: labeled animals alone, then adding humans,
/// the adaptation network, unlabeled targets and the loss reweighting, at a
/// reduced and a full labeled-animal count.
pub fn ablation_variants(reduced: usize) -> Vec<Variant> {
    let mut rows = vec![Variant {
        name: "humans-only".into(),
        n_animal: Some(0),
        human: true,
        ..Variant::baseline()
    }];
    for (tag, n) in [("a", Some(reduced)), ("b", None)] {
        let steps = [
            (false, false, false, false),
            (true, false, false, false),
            (true, true, false, false),
            (true, true, true, false),
            (true, true, true, true),
        ];
        for (i, (h, dan, ua, rb)) in steps.into_iter().enumerate() {
            rows.push(Variant {
                name: format!("{tag}{}", i + 1),
                n_animal: n,
                human: h,
                dan,
                unlabeled: ua,
                reweight: rb,
                ..Variant::baseline()
            });
        }
    }
    rows
}
