use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cdapose::commands::{self, output_root, TrainMode};
use cdapose::config::RunConfig;
use cdapose::Error;

/// Cross-domain keypoint adaptation: data tools, training and evaluation.
///
/// Outputs go under $CDAPOSE_OUTPUT (default ./runs) unless --out is given.
#[derive(Parser)]
#[command(name = "cdapose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Wscda,
    Pplo,
    SupervisedBoost,
}

#[derive(Subcommand)]
enum Command {
    /// Read annotation files, optionally align them, write one merged set.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Built-in schema to align keypoints to (e.g. coco17).
        #[arg(long)]
        align_to: Option<String>,
        /// JSON name-to-name table replacing the built-in alignment.
        #[arg(long, requires = "align_to")]
        table: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class bone-length profiles with a plot.
    AnalyzeBones {
        set: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render synthetic domains: the spec files given, or the desk task.
    Synth {
        #[arg(long = "spec")]
        specs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a run config.
    Train {
        #[arg(value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set wscda.loss.alpha=-2
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint to start from; required for pplo.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on an annotation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        set: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        pck: f64,
        /// Results file (default <output root>/eval/results.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write stored pseudo-labels as a labeled annotation file.
    ExportPseudoLabels {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs: table and training-curve plot.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_or(out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| output_root().join(default))
}

fn run(cli: Cli) -> cdapose::Result<()> {
    match cli.command {
        Command::Ingest {
            files,
            align_to,
            table,
            out,
        } => {
            let s = commands::cmd_ingest(&files, align_to.as_deref(), table.as_deref(), &out_or(out, "ingest"))?;
            println!("{} instances ({}) -> {}", s.instances, s.schema, s.output.display());
            for (class, n) in &s.classes {
                println!("  {class}: {n}");
            }
        }
        Command::AnalyzeBones { set, out } => {
            let out = out_or(out, "bones");
            let r = commands::cmd_analyze_bones(&set, &out)?;
            for (class, c) in &r.classes {
                let p: Vec<String> = c.proportions.iter().map(|x| format!("{x:.3}")).collect();
                println!("{class} ({}): {}", c.count, p.join(" "));
            }
            println!("report written to {}", out.display());
        }
        Command::Synth { specs, seed, out } => {
            let s = commands::cmd_synth(&specs, seed, &out_or(out, "synth"))?;
            for f in &s.files {
                println!("{}", f.display());
            }
            if let Some(c) = s.config {
                println!("run config: {}", c.display());
            }
        }
        Command::Train {
            mode,
            config,
            overrides,
            from,
            out,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let mode = match mode {
                Mode::Wscda => TrainMode::Wscda,
                Mode::Pplo => TrainMode::Pplo,
                Mode::SupervisedBoost => TrainMode::SupervisedBoost,
            };
            let dir = out.unwrap_or_else(|| output_root().join(&cfg.name));
            let m = commands::cmd_train(mode, &cfg, from.as_deref(), &dir)?;
            println!("reached {}; manifest at {}", m.stage_reached, dir.join("manifest.json").display());
        }
        Command::Eval {
            checkpoint,
            set,
            pck,
            out,
        } => {
            let out = out.unwrap_or_else(|| output_root().join("eval").join("results.json"));
            let r = commands::cmd_eval(&checkpoint, &set, pck, &out)?;
            let map = r.map.map(|m| format!("{m:.4}")).unwrap_or_else(|| "undefined".into());
            println!("mAP {map}  PCK@{} {:.4}  ({} instances)", r.pck_fraction, r.pck, r.instances);
        }
        Command::ExportPseudoLabels { store, target, out } => {
            let out = out.unwrap_or_else(|| output_root().join("pseudo").join("annotations.json"));
            let n = commands::cmd_export_pseudo_labels(&store, &target, &out)?;
            println!("{n} pseudo-labeled instances -> {}", out.display());
        }
        Command::Report { runs, out } => {
            let out = out_or(out, "report");
            let r = commands::cmd_report(&runs, &out)?;
            print!("{}", r.to_markdown());
            println!("written to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
