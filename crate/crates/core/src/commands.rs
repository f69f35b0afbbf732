//! The operations behind the command-line tool. Each writes its artifacts
//! under one directory and returns a summary for the caller to print.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig};
use crate::datasets::{
    compute_bone_proportions, generate_domain, parse_annotations, write_annotations, AnnotationSet, BoneReport,
    Split, SynthDomainSpec,
};
use crate::error::{Error, Result};
use crate::eval::report::{plot_curves, plot_profiles};
use crate::eval::{evaluate, report, EvalResults, Report, RunRecord};
use crate::experiment::DeskTask;
use crate::network::{Checkpoint, Model};
use crate::pplo::{train_pplo, PseudoLabelStore, PploOutputs};
use crate::schema::{SkeletonSchema, FIGURE19};
use crate::types::Domain;
use crate::wscda::{train_wscda, write_text, Outputs};

/// Environment variable naming the directory that receives run outputs.
pub const OUTPUT_ROOT_ENV: &str = "CDAPOSE_OUTPUT";

/// Output root from the environment, `runs` by default.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub instances: usize,
    pub schema: String,
    pub classes: BTreeMap<String, usize>,
    pub output: PathBuf,
}

/// Reads annotation files, optionally aligns them to another schema, and
/// writes one merged annotation file.
pub fn cmd_ingest(
    inputs: &[PathBuf],
    align_to: Option<&str>,
    alignment_table: Option<&Path>,
    out_dir: &Path,
) -> Result<IngestSummary> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no annotation files given".into()));
    }
    let mut merged: Option<AnnotationSet> = None;
    for p in inputs {
        let set = parse_annotations(p, true)?;
        info!("{}: {} instances", p.display(), set.len());
        merged = Some(match merged {
            Some(m) => m.merged(&set)?,
            None => set,
        });
    }
    let mut set = merged.expect("at least one input");
    if let Some(name) = align_to {
        let target = SkeletonSchema::builtin(name)
            .ok_or_else(|| Error::Config(format!("unknown target schema {name}")))?;
        if let Some(t) = alignment_table {
            let json = std::fs::read_to_string(t).map_err(|e| Error::io(t, e))?;
            set.schema = set.schema.clone().with_alignment_json(&target, &json)?;
        }
        set = set.aligned_to(&target)?;
    }
    let output = out_dir.join("annotations.json");
    write_annotations(&set, &output)?;
    let summary = IngestSummary {
        instances: set.len(),
        schema: set.schema.name.clone(),
        classes: set.class_counts(),
        output,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Bone-proportion profiles per class, as JSON and a line plot.
pub fn cmd_analyze_bones(set_path: &Path, out_dir: &Path) -> Result<BoneReport> {
    let set = parse_annotations(set_path, false)?;
    let report = compute_bone_proportions(&set, &set.schema.bones)?;
    for c in &report.absent {
        warn!("class {c} has no instance covering every bone");
    }
    write_json(&out_dir.join("bones.json"), &report)?;
    let profiles: Vec<(String, Vec<f64>)> = report
        .classes
        .iter()
        .map(|(k, v)| (k.clone(), v.proportions.clone()))
        .collect();
    if !profiles.is_empty() {
        plot_profiles(&profiles, &out_dir.join("bones.svg"))?;
    }
    Ok(report)
}

/// Files written by [`cmd_synth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub files: Vec<PathBuf>,
    /// A run config wired to the generated task, when one was written.
    pub config: Option<PathBuf>,
}

/// Renders synthetic domains. With spec files, writes one annotation file
/// per spec (plus hidden truth for target specs). Without, writes the
/// desk-scale task and a run config that trains on it.
pub fn cmd_synth(specs: &[PathBuf], seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    let mut files = Vec::new();
    if !specs.is_empty() {
        for p in specs {
            let spec = SynthDomainSpec::load(p)?;
            let (set, truth) = generate_domain(&spec)?;
            let stem = format!("{}-{}", spec.species, spec.domain.name());
            let f = out_dir.join(&stem).join("annotations.json");
            write_annotations(&set, &f)?;
            files.push(f);
            if let Some(t) = truth {
                let f = out_dir.join(format!("{stem}-truth")).join("annotations.json");
                write_annotations(&t, &f)?;
                files.push(f);
            }
        }
        return Ok(SynthOutput { files, config: None });
    }
    let task = DeskTask::default();
    let data = task.generate(seed)?;
    let mut paths = BTreeMap::new();
    for (name, set) in [
        ("human", &data.human),
        ("animal", &data.animal),
        ("unlabeled", &data.unlabeled),
        ("eval", &data.eval),
        ("target_labeled", &data.target_pool),
    ] {
        let rel = PathBuf::from(name).join("annotations.json");
        write_annotations(set, &out_dir.join(&rel))?;
        files.push(out_dir.join(&rel));
        paths.insert(name, rel);
    }
    let (model, wscda, pplo) = crate::experiment::Variant::wscda_pplo().configs(&task, seed);
    let cfg = RunConfig {
        name: "desk".into(),
        seed,
        data: crate::config::DataPaths {
            human: Some(paths["human"].clone()),
            animal: Some(paths["animal"].clone()),
            unlabeled: Some(paths["unlabeled"].clone()),
            eval: Some(paths["eval"].clone()),
            target_labeled: Some(paths["target_labeled"].clone()),
            n_gt: 0,
        },
        model,
        wscda,
        pplo,
        pck_fraction: 0.2,
    };
    let config = out_dir.join("run.toml");
    write_text(&config, &cfg.to_toml()?)?;
    Ok(SynthOutput {
        files,
        config: Some(config),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Wscda,
    Pplo,
    SupervisedBoost,
}

/// Everything a training run wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub mode: TrainMode,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub datasets: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub metric_logs: Vec<PathBuf>,
    pub stage_reached: String,
    pub results: Option<PathBuf>,
}

impl RunManifest {
    /// Every artifact must exist before the manifest is written.
    pub fn write(&self, path: &Path) -> Result<()> {
        let files = self
            .datasets
            .iter()
            .chain(&self.checkpoints)
            .chain(&self.metric_logs)
            .chain(&self.results);
        for f in files {
            if !f.exists() {
                return Err(Error::Contract(format!("manifest references missing {}", f.display())));
            }
        }
        write_json(path, self)
    }
}

struct RunData {
    human: AnnotationSet,
    animal: AnnotationSet,
    unlabeled: AnnotationSet,
    eval: Option<AnnotationSet>,
    paths: Vec<PathBuf>,
}

fn load_run_data(cfg: &RunConfig, boost: bool) -> Result<RunData> {
    let d = &cfg.data;
    let mut paths = Vec::new();
    let mut load = |p: &Option<PathBuf>| -> Result<Option<AnnotationSet>> {
        match p {
            Some(p) => {
                paths.push(p.clone());
                Ok(Some(parse_annotations(p, true)?))
            }
            None => Ok(None),
        }
    };
    let human = load(&d.human)?;
    let animal = load(&d.animal)?;
    let unlabeled = load(&d.unlabeled)?;
    let eval = load(&d.eval)?;
    let pool = if boost && d.n_gt > 0 { load(&d.target_labeled)? } else { None };
    let schema = [&human, &animal, &unlabeled]
        .into_iter()
        .flatten()
        .next()
        .map(|s| s.schema.clone())
        .unwrap_or_else(|| SkeletonSchema::builtin(FIGURE19).expect("builtin"));
    let empty = || AnnotationSet::empty(schema.clone());
    let mut animal = animal.unwrap_or_else(empty);
    if boost && d.n_gt > 0 {
        let pool = pool.ok_or_else(|| Error::Config("supervised boosting needs data.target_labeled".into()))?;
        if pool.len() < d.n_gt {
            return Err(Error::Config(format!(
                "data.n_gt is {} but the labeled target pool has {}",
                d.n_gt,
                pool.len()
            )));
        }
        let mut extra = pool.subset(&(0..d.n_gt).collect::<Vec<_>>());
        for inst in &mut extra.instances {
            if inst.pose.is_none() {
                return Err(Error::Config(format!("labeled target instance {} has no pose", inst.id)));
            }
            inst.domain = Domain::AnimalLabeled;
        }
        animal = animal.merged(&extra)?;
    }
    Ok(RunData {
        human: human.unwrap_or_else(empty),
        animal,
        unlabeled: unlabeled.unwrap_or_else(empty),
        eval,
        paths,
    })
}

fn toggles(cfg: &RunConfig, data: &RunData) -> Vec<(String, String)> {
    let mark = |b: bool| if b { "x" } else { "-" }.to_string();
    let c = &cfg.wscda.composition;
    vec![
        ("N_A".into(), format!("{:03}", data.animal.len())),
        ("H".into(), mark(c.human > 0.0 && !data.human.is_empty())),
        ("DAN".into(), mark(cfg.model.use_dan && cfg.wscda.loss.alpha != 0.0)),
        ("UA".into(), mark(c.unlabeled > 0.0 && !data.unlabeled.is_empty())),
        ("RB".into(), mark(cfg.wscda.loss.w2 > 1.0)),
    ]
}

/// Trains in the requested mode under `run_dir`.
///
/// `pplo` continues from `init`, which must be a checkpoint written by the
/// adversarial trainer. `supervised-boost` runs both phases with `data.n_gt`
/// labeled target instances added to the labeled animals.
pub fn cmd_train(mode: TrainMode, cfg: &RunConfig, init: Option<&Path>, run_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let data = load_run_data(cfg, mode == TrainMode::SupervisedBoost)?;
    let mut wscda = cfg.wscda.clone();
    wscda.seed = cfg.seed;
    let mut pplo = cfg.pplo.clone();
    pplo.seed = cfg.seed;
    let ck_dir = run_dir.join("checkpoints");
    let mut checkpoints = Vec::new();
    let mut metric_logs = Vec::new();
    let mut curve = Vec::new();
    let (model, stage_reached) = match mode {
        TrainMode::Pplo => {
            let init = init.ok_or_else(|| {
                Error::Config("pseudo-label training continues from an adversarial checkpoint; pass --from".into())
            })?;
            let ck = Checkpoint::load(init)?;
            if ck.meta.phase != "wscda" {
                return Err(Error::Config(format!(
                    "{} was written by the {} phase, not by adversarial training",
                    init.display(),
                    ck.meta.phase
                )));
            }
            (ck.model()?, None)
        }
        TrainMode::Wscda | TrainMode::SupervisedBoost => {
            let model = match init {
                Some(p) => Checkpoint::load(p)?.model()?,
                None => Model::build(&cfg.model, cfg.seed)?,
            };
            let metrics = run_dir.join("metrics.csv");
            let out = train_wscda(
                model,
                &data.human,
                &data.animal,
                &data.unlabeled,
                &wscda,
                &Outputs {
                    checkpoint_dir: Some(ck_dir.clone()),
                    metrics_path: Some(metrics.clone()),
                },
            )?;
            checkpoints.extend(out.checkpoints);
            metric_logs.push(metrics);
            curve.extend(out.log.iter().map(|r| (r.epoch, r.pose)));
            (out.model, Some(out.stage_reached))
        }
    };
    let mut stage = format!("wscda stage {}", stage_reached.unwrap_or(0));
    let model = if mode == TrainMode::Wscda {
        model
    } else {
        let metrics = run_dir.join("pplo_metrics.csv");
        let store = run_dir.join("pseudo_labels.json");
        let events = run_dir.join("pplo_events.json");
        let out = train_pplo(
            model,
            [&data.human, &data.animal, &data.unlabeled],
            &data.unlabeled,
            &wscda,
            &pplo,
            &PploOutputs {
                checkpoint_dir: Some(ck_dir.clone()),
                metrics_path: Some(metrics.clone()),
                store_path: Some(store.clone()),
                events_path: Some(events.clone()),
            },
        )?;
        checkpoints.extend(out.checkpoints);
        metric_logs.extend([metrics, events]);
        let offset = curve.len();
        curve.extend(out.log.iter().map(|r| (offset + r.epoch, r.source_loss)));
        stage = format!("pplo epoch {} (mu {:.2})", out.log.len(), out.mu);
        out.model
    };
    let config_path = run_dir.join("config.toml");
    write_text(&config_path, &cfg.to_toml()?)?;
    let mut results = None;
    if let Some(eval) = &data.eval {
        let mut r = evaluate(&model, eval, cfg.pck_fraction)?;
        r.config_hash = Some(cfg.hash());
        let p = run_dir.join("results.json");
        write_json(&p, &r)?;
        let record = RunRecord {
            name: cfg.name.clone(),
            config: toggles(cfg, &data),
            results: r,
            curve,
        };
        write_json(&run_dir.join("record.json"), &record)?;
        results = Some(p);
    }
    let manifest = RunManifest {
        name: cfg.name.clone(),
        mode,
        config_hash: cfg.hash(),
        seeds: BTreeMap::from([
            ("run".to_string(), cfg.seed),
            ("model".to_string(), model.seed),
        ]),
        datasets: data.paths,
        checkpoints,
        metric_logs,
        stage_reached: stage,
        results,
    };
    manifest.write(&run_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Scores a checkpoint on an annotation set and writes `out`.
pub fn cmd_eval(checkpoint: &Path, set_path: &Path, pck_fraction: f64, out: &Path) -> Result<EvalResults> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let set = parse_annotations(set_path, true)?;
    let train = set.splits.iter().filter(|s| **s == Split::Train).count();
    if train > 0 {
        warn!("{train} of {} evaluation instances are tagged as training data", set.len());
    }
    let mut r = evaluate(&model, &set, pck_fraction)?;
    r.config_hash = ck.meta.config_hash.clone();
    write_json(out, &r)?;
    Ok(r)
}

/// Writes accepted pseudo-labels as an annotation file of labeled animals.
pub fn cmd_export_pseudo_labels(store_path: &Path, target_path: &Path, out: &Path) -> Result<usize> {
    let store = PseudoLabelStore::load(store_path)?;
    let target = parse_annotations(target_path, true)?;
    let mut idx = Vec::new();
    for (i, inst) in target.instances.iter().enumerate() {
        if store.get(&inst.id).is_some() {
            idx.push(i);
        }
    }
    let missing = store.len() - idx.len();
    if missing > 0 {
        warn!("{missing} pseudo-labels name instances absent from {}", target_path.display());
    }
    let mut set = target.subset(&idx);
    for inst in &mut set.instances {
        let label = store.get(&inst.id).expect("filtered above");
        inst.pose = Some(label.pose.clone());
        inst.domain = Domain::AnimalLabeled;
    }
    write_annotations(&set, out)?;
    Ok(set.len())
}

/// Comparison table and curve plot over finished runs.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let mut records = Vec::with_capacity(run_dirs.len());
    for d in run_dirs {
        let p = d.join("record.json");
        if !p.exists() {
            return Err(Error::Config(format!(
                "{} has no evaluation record; train with data.eval set",
                d.display()
            )));
        }
        records.push(read_json::<RunRecord>(&p)?);
    }
    let r = report(&records)?;
    write_text(&out_dir.join("report.csv"), &r.to_csv())?;
    write_text(&out_dir.join("report.md"), &r.to_markdown())?;
    write_json(&out_dir.join("report.json"), &r)?;
    if records.iter().any(|r| !r.curve.is_empty()) {
        plot_curves(&records, "training loss", &out_dir.join("curves.svg"))?;
    }
    Ok(r)
}

/// Hash identifying the effective configuration of a run.
pub fn effective_hash(mode: TrainMode, cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.name.clear();
    if mode == TrainMode::Wscda {
        c.pplo = Default::default();
    }
    if mode != TrainMode::SupervisedBoost {
        c.data.n_gt = 0;
    }
    config_hash(&(&c.model, &c.wscda, &c.pplo, c.data.n_gt, c.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boost_without_labels_matches_the_pplo_pipeline() {
        let cfg = RunConfig::default();
        assert_eq!(
            effective_hash(TrainMode::SupervisedBoost, &cfg),
            effective_hash(TrainMode::Pplo, &cfg)
        );
        let boosted = RunConfig {
            data: crate::config::DataPaths { n_gt: 10, ..Default::default() },
            ..RunConfig::default()
        };
        assert_ne!(
            effective_hash(TrainMode::SupervisedBoost, &boosted),
            effective_hash(TrainMode::Pplo, &boosted)
        );
    }

    #[test]
    fn pplo_needs_an_adversarial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_train(TrainMode::Pplo, &RunConfig::default(), None, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn manifest_refuses_missing_artifacts() {
        let m = RunManifest {
            name: "x".into(),
            mode: TrainMode::Wscda,
            config_hash: String::new(),
            seeds: BTreeMap::new(),
            datasets: vec![PathBuf::from("/definitely/not/here.json")],
            checkpoints: vec![],
            metric_logs: vec![],
            stage_reached: String::new(),
            results: None,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(m.write(&dir.path().join("m.json")).is_err());
    }
}
