use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use stlt_core::harness::{
    appearance_vectors, export_report, fewshot_finetune_with, load_data, score, train_with, write_dataset, DataBundle,
    EpochRecord, MetricValue, MetricsReport, Run, Sample, ScoreFile, TrainConfig, Trained,
};
use stlt_core::fusion::save_appearance_vectors;
use stlt_core::metrics::ensemble;
use stlt_core::StltError;
use stlt_engine::gradcheck::{run_suite, TOLERANCE};
use stlt_engine::{Container, EngineError};

const CONFIG_KEYS: &str = "\
Configuration files are TOML with flat keys. Every key except `seed` is optional.

  seed                 u64      required; fixes data order, initialization and dropout
  task                 str      single-label | multi-label
  epochs               int      60
  batch_size           int      32
  learning_rate        float    1e-3 (Adam)
  patience             int      10 epochs without test improvement
  target_top1          float    stop once test top-1 (or mAP) reaches this
  frames               int      16 layout frames per video
  app_frames           int      32 appearance frames per clip
  resolution           int      112 pixels per side
  width                int      128
  spatial_layers       int      2
  spatial_heads        int      4
  temporal_layers      int      2
  temporal_heads       int      4
  dropout              float    0.1
  max_objects          int      6 objects per frame, plus the class token
  ff_mult              int      4
  architecture         str      factorized | joint
  scheme               str      none | appearance | pff | pbf | ef | vatf | lcf | caf | cacnf
  app_width            int      128
  fusion_layers        int      2
  fusion_heads         int      4
  token_layers         int      1
  lambda_layout        float    0.5 (cacnf)
  lambda_app           float    0.5 (cacnf)
  train_annotations    path     JSON-lines annotations; omit for synthetic data
  test_annotations     path
  finetune_annotations path     few-shot fine-tuning set
  categories           [str]    [\"hand\", \"object\"]
  actions              [str]    action names that labels refer to
  novel_actions        [str]    few-shot novel action names
  oracle               bool     true keeps every box regardless of score
  score_threshold      float    0.5
  lenient_categories   bool     map unknown categories to `object`
  frames_dir           path     directory of {id}.rgb frame archives
  appearance_features  path     precomputed appearance vectors
  synthetic_actions    int      12
  synthetic_train      int      2000
  synthetic_test       int      600
  synthetic_length     int      32
  train_styles         [int]    0..8
  test_styles          [int]    8..16
  style_bias           float    0.8
  corrupt_fraction     float    0.0
  corrupt_noise        float    0.1
  fewshot_shots        int      shots per novel action
  fewshot_novel        [int]    catalog ids of novel actions
  data_seed            u64      defaults to seed

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.";

#[derive(Parser)]
#[command(name = "stlt", version, about = "Layout-based action recognition", after_long_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic split as annotation files (and frame archives).
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also render frame archives at this resolution.
        #[arg(long)]
        render: Option<usize>,
    },
    /// Train a model and write config.toml, checkpoint.stlt, report.json and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep every box regardless of detection score.
        #[arg(long)]
        oracle: bool,
    },
    /// Evaluate a run directory on one split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Write per-video scores for `ensemble`.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Fine-tune the classifier of a base-action checkpoint on novel actions.
    FinetuneFewshot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the normalized scores of two models.
    Ensemble {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite of the tensor engine.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a run's metrics as CSV, or the appearance vectors of its videos.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

fn print_metrics(values: &[MetricValue]) {
    for v in values {
        println!("{}/{} = {:.4}", v.split, v.metric, v.value);
    }
}

fn progress(r: &EpochRecord) {
    let parts: Vec<String> = r.values.iter().map(|v| format!("{}/{}={:.4}", v.split, v.metric, v.value)).collect();
    eprintln!("epoch {:>3}  {}", r.epoch, parts.join("  "));
}

fn save(run: &Run, out: &Path) -> Result<()> {
    run.save(out)?;
    print_metrics(&run.report.final_metrics);
    println!("wrote {}", out.display());
    Ok(())
}

fn split_of(data: &DataBundle, split: Split) -> &[Sample] {
    match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
        Split::Finetune => &data.finetune,
    }
}

/// Loads a run directory written by `train` or `finetune-fewshot`.
fn load_run(dir: &Path) -> Result<(Trained, DataBundle)> {
    let cfg = TrainConfig::load(dir.join("config.toml"))?;
    let ckpt = Container::load(dir.join("checkpoint.stlt"))?;
    let meta: serde_json::Value = serde_json::from_str(&ckpt.metadata).context("checkpoint metadata")?;
    let classes = meta["classes"].as_u64().context("checkpoint lacks a class count")? as usize;
    let data = load_data(&cfg)?;
    let mut t = Trained::new(&cfg, data.vocabulary.len(), classes)?;
    t.restore(&ckpt)?;
    Ok((t, data))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, render } => {
            let cfg = TrainConfig::load(&spec)?;
            write_dataset(&cfg, &out, render)?;
            println!("wrote {}", out.join("dataset.toml").display());
        }
        Command::Train { config, out, oracle } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.oracle |= oracle;
            let data = load_data(&cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let run = train_with(&cfg, &data, &mut progress)?;
            save(&run, &out)?;
        }
        Command::Evaluate { run, split, scores } => {
            let (t, data) = load_run(&run)?;
            let samples = split_of(&data, split);
            if samples.is_empty() {
                bail!(StltError::Data("the requested split is empty".into()));
            }
            let p = t.predict(samples)?;
            print_metrics(&score(&p, data.task, t.classes, "eval")?);
            if let Some(path) = scores {
                fs::write(&path, serde_json::to_string(&ScoreFile::from_predictions(&p, data.task))?)?;
            }
        }
        Command::FinetuneFewshot { config, checkpoint, out } => {
            let cfg = TrainConfig::load(&config)?;
            let data = load_data(&cfg)?;
            let ckpt = Container::load(&checkpoint)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let run = fewshot_finetune_with(&cfg, &ckpt, &data, &mut progress)?;
            save(&run, &out)?;
        }
        Command::Ensemble { a, b, out } => {
            let read = |p: &Path| -> Result<ScoreFile> {
                let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
                Ok(serde_json::from_str(&text).map_err(StltError::from)?)
            };
            let (fa, fb) = (read(&a)?, read(&b)?);
            if fa.ids != fb.ids || fa.labels != fb.labels || fa.task != fb.task {
                bail!(StltError::Data("score files cover different videos".into()));
            }
            let combined = ensemble(&fa.tensor()?, &fb.tensor()?, fa.task)?;
            let classes = combined.cols();
            let labels = fa.label_values();
            for (name, scores) in [("a", fa.tensor()?), ("b", fb.tensor()?), ("ensemble", combined.clone())] {
                let p = stlt_core::harness::Predictions {
                    ids: fa.ids.clone(),
                    labels: labels.clone(),
                    fused: scores,
                    layout: None,
                    appearance: None,
                };
                print_metrics(&score(&p, fa.task, classes, name)?);
            }
            if let Some(path) = out {
                let file = ScoreFile {
                    scores: (0..combined.rows()).map(|i| combined.row(i).to_vec()).collect(),
                    ..fa
                };
                fs::write(path, serde_json::to_string(&file)?)?;
            }
        }
        Command::Gradcheck { instances, seed } => {
            let reports = run_suite(instances, seed)?;
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<24} {:>4} instances  max rel error {:.3e}  {verdict}", r.op, r.instances, r.max_rel_error);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!(NumericalFailure(format!("{failed} operations exceed relative error {TOLERANCE:e}")));
            }
        }
        Command::Export { run, csv, features } => {
            if csv.is_none() && features.is_none() {
                bail!(StltError::Config("nothing to export: pass --csv and/or --features".into()));
            }
            if let Some(path) = csv {
                let text = fs::read_to_string(run.join("report.json"))?;
                let report: MetricsReport = serde_json::from_str(&text).map_err(StltError::from)?;
                export_report(&report, &path)?;
            }
            if let Some(path) = features {
                let (t, data) = load_run(&run)?;
                if t.model.appearance.is_none() {
                    bail!(StltError::Config(format!("scheme {:?} has no appearance branch", t.config.scheme)));
                }
                let mut vectors = appearance_vectors(&t, &data.train)?;
                vectors.extend(appearance_vectors(&t, &data.test)?);
                vectors.extend(appearance_vectors(&t, &data.finetune)?);
                save_appearance_vectors(&vectors, &path)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<NumericalFailure>() {
        return 4;
    }
    if let Some(e) = e.downcast_ref::<StltError>() {
        return e.exit_code() as u8;
    }
    match e.downcast_ref::<EngineError>() {
        Some(EngineError::Config(_)) => 2,
        Some(EngineError::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
