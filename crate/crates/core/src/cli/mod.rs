//! Batch command-line driver: synthesize data, train, evaluate, predict,
//! inspect checkpoints.
//!
//! Logs go to stderr, data artifacts to files, parse-friendly results to
//! stdout. Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numeric failure. Every command is deterministic given its config.

pub mod config;

use crate::dataset::{load_splits, synth_generate, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{build_report, select_threshold, write_predictions};
use crate::head::clamp_prob;
use crate::model::Model;
use crate::preprocess::RawRadiograph;
use crate::rng::RngStream;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::train::{predict_records, train};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "radtriage",
    about = "Radiograph abnormality triage: synthesize corpora, fine-tune, evaluate, predict",
    version
)]
struct Cli {
    /// JSON config file; command-line flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (overrides the config file's train and split seeds)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Architecture preset
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Tiny,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic radiograph corpus in the standard layout
    Synth {
        /// Number of patients
        #[arg(long, default_value_t = 16)]
        patients: usize,
        /// Studies per patient
        #[arg(long, default_value_t = 2)]
        studies: usize,
        /// Views per study
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Square image size in pixels
        #[arg(long, default_value_t = 56)]
        size: usize,
        /// Fraction of studies labeled abnormal
        #[arg(long, default_value_t = 0.5)]
        abnormal_fraction: f64,
        /// Spread studies across all seven anatomies instead of one
        #[arg(long)]
        cycle_anatomies: bool,
    },

    /// Fine-tune on a corpus and write the best checkpoint plus logs
    Train {
        /// Dataset root directory
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Encoder blocks to unfreeze (0 = head only)
        #[arg(long)]
        unfreeze_k: Option<usize>,
        #[arg(long)]
        lr_head: Option<f64>,
        #[arg(long)]
        lr_encoder: Option<f64>,
        /// Print the parameter shape audit and exit without training
        #[arg(long)]
        dry_run: bool,
    },

    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long)]
        root: Option<PathBuf>,
        /// Which split to report on
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Fixed operating threshold (skips validation-set selection)
        #[arg(long)]
        threshold: Option<f64>,
    },

    /// Score images with a checkpoint; prints `path,prob` lines
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also print the aggregated study probability
        #[arg(long)]
        study: bool,
        /// Image files to score
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },

    /// Print a checkpoint's manifest
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Parses arguments, dispatches, and maps errors to the exit-code contract.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut run_cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run_cfg.train.seed = seed;
        run_cfg.split.seed = seed;
    }
    if let Some(out) = &cli.out {
        run_cfg.out_dir = Some(out.clone());
    }
    let preset_flag = cli.preset.map(Preset::name);

    match cli.command {
        Command::Synth {
            patients,
            studies,
            views,
            size,
            abnormal_fraction,
            cycle_anatomies,
        } => cmd_synth(
            &run_cfg,
            SynthConfig {
                n_patients: patients,
                studies_per_patient: studies,
                views_per_study: views,
                image_size: size,
                abnormal_fraction,
                seed: cli.seed.unwrap_or(0),
                cycle_anatomies,
            },
        ),
        Command::Train {
            root,
            epochs,
            batch_size,
            unfreeze_k,
            lr_head,
            lr_encoder,
            dry_run,
        } => {
            if let Some(root) = root {
                run_cfg.dataset_root = Some(root);
            }
            if let Some(v) = epochs {
                run_cfg.train.epochs = v;
            }
            if let Some(v) = batch_size {
                run_cfg.train.batch_size = v;
            }
            if let Some(v) = unfreeze_k {
                run_cfg.train.unfreeze_k = v;
            }
            if let Some(v) = lr_head {
                run_cfg.train.lr_head = v;
            }
            if let Some(v) = lr_encoder {
                run_cfg.train.lr_encoder = v;
            }
            cmd_train(&run_cfg, preset_flag, dry_run)
        }
        Command::Eval {
            checkpoint,
            root,
            split,
            threshold,
        } => {
            if let Some(root) = root {
                run_cfg.dataset_root = Some(root);
            }
            cmd_eval(&run_cfg, &checkpoint, split, threshold)
        }
        Command::Predict {
            checkpoint,
            study,
            images,
        } => cmd_predict(&checkpoint, study, &images),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn out_dir(run_cfg: &RunConfig) -> PathBuf {
    run_cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_synth(run_cfg: &RunConfig, synth: SynthConfig) -> Result<()> {
    let dir = out_dir(run_cfg);
    let outcome = synth_generate(&synth, &dir)?;
    let abnormal = outcome.records.iter().filter(|r| r.label == 1).count();
    println!(
        "patients={} studies={} images={} abnormal={} manifest={}",
        synth.n_patients,
        outcome.records.len(),
        outcome.image_count,
        abnormal,
        outcome.manifest_path.display()
    );
    Ok(())
}

fn cmd_train(run_cfg: &RunConfig, preset_flag: Option<&str>, dry_run: bool) -> Result<()> {
    let encoder_cfg = run_cfg.resolve_encoder(preset_flag)?;
    let pre = run_cfg.resolve_preprocess(&encoder_cfg)?;
    run_cfg.train.validate(encoder_cfg.num_layers)?;

    if dry_run {
        let head_cfg = crate::head::HeadConfig::for_embed_dim(encoder_cfg.embed_dim);
        let shapes = Model::parameter_shapes(&encoder_cfg, &head_cfg);
        println!("tokens_per_image={}", encoder_cfg.num_tokens());
        let mut total = 0usize;
        for (name, shape) in &shapes {
            let numel: usize = shape.iter().product();
            total += numel;
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            println!("{name},{},{numel}", dims.join("x"));
        }
        println!("total_parameters={total}");
        return Ok(());
    }

    let root = run_cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::Config("dataset_root is required (set --root or the config file)".into()))?;
    let splits = load_splits(root, &run_cfg.split)?;
    eprintln!(
        "splits: train={} val={} test={} studies",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    let mut model = Model::init(encoder_cfg, run_cfg.train.seed)?;
    eprintln!("{}", crate::train::EpochLog::HEADER);
    let outcome = train(&mut model, &splits, &pre, &run_cfg.train)?;

    let dir = out_dir(run_cfg);
    std::fs::create_dir_all(&dir)?;

    let mut log_text = String::from(crate::train::EpochLog::HEADER);
    log_text.push('\n');
    for log in &outcome.logs {
        log_text.push_str(&log.to_line());
        log_text.push('\n');
    }
    std::fs::write(dir.join("train_log.csv"), log_text)?;

    let ckpt = Checkpoint::from_model(
        &outcome.best_model,
        Some(run_cfg.train),
        Some(&outcome.best_optimizer),
        RngStream::new(run_cfg.train.seed),
        Some(outcome.best_metrics),
    );
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;

    // final validation report at the validation-selected threshold
    let preds = predict_records(&outcome.best_model, &splits.val, &pre)?;
    let labels: Vec<u8> = splits.val.iter().map(|r| r.label).collect();
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let threshold = select_threshold(&probs, &labels)?;
    let report = build_report(&preds, &labels, threshold)?;
    std::fs::write(dir.join("val_report.csv"), report.to_csv())?;
    std::fs::write(dir.join("val_report.txt"), report.to_table())?;

    println!(
        "best_epoch={} best_val_auroc={:.6} checkpoint={}",
        outcome.best_epoch,
        outcome.best_val_auroc,
        ckpt_path.display()
    );
    Ok(())
}

fn split_records(splits: &Splits, which: SplitName) -> &[crate::dataset::StudyRecord] {
    match which {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    }
}

fn cmd_eval(
    run_cfg: &RunConfig,
    checkpoint: &Path,
    split: SplitName,
    threshold_override: Option<f64>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    let pre = run_cfg.resolve_preprocess(&model.encoder_cfg)?;
    let root = run_cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::Config("dataset_root is required (set --root or the config file)".into()))?;
    let splits = load_splits(root, &run_cfg.split)?;
    let records = split_records(&splits, split);
    if records.is_empty() {
        return Err(Error::Data("requested split has no studies".into()));
    }

    let threshold = match threshold_override {
        Some(t) => t,
        None => {
            let val_preds = predict_records(&model, &splits.val, &pre)?;
            let probs: Vec<f64> = val_preds.iter().map(|p| p.prob).collect();
            let labels: Vec<u8> = splits.val.iter().map(|r| r.label).collect();
            select_threshold(&probs, &labels)?
        }
    };

    let preds = predict_records(&model, records, &pre)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let report = build_report(&preds, &labels, threshold)?;

    let dir = out_dir(run_cfg);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("report.txt"), report.to_table())?;
    write_predictions(&preds, &labels, &dir.join("predictions.csv"))?;

    print!("{}", report.to_table());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, study: bool, images: &[PathBuf]) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    let pre = crate::preprocess::PreprocessConfig::for_target(model.encoder_cfg.image_size);
    let mut probs = Vec::with_capacity(images.len());
    let mut failures = 0usize;
    for path in images {
        match RawRadiograph::load_png(path).and_then(|raw| model.predict_raw(&raw, &pre)) {
            Ok(p) => {
                let p = clamp_prob(p);
                println!("{},{p:.6}", path.display());
                probs.push(p);
            }
            Err(e) => {
                println!("{},error", path.display());
                eprintln!("error: {}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Error::Data(format!("{failures} image(s) could not be scored")));
    }
    if study {
        let aggregated = crate::eval::aggregate_study(&probs)?;
        println!("study,{aggregated:.6}");
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    println!("version={}", crate::train::checkpoint::VERSION);
    println!(
        "encoder={}",
        serde_json::to_string(&ckpt.encoder_cfg).expect("config serializes")
    );
    println!(
        "head={}",
        serde_json::to_string(&ckpt.head_cfg).expect("config serializes")
    );
    match &ckpt.train_cfg {
        Some(t) => println!("train={}", serde_json::to_string(t).expect("config serializes")),
        None => println!("train=none"),
    }
    let (seed, counter) = ckpt.rng.state();
    println!("rng_seed={seed} rng_counter={counter}");
    match ckpt.optimizer_step {
        Some(s) => println!("optimizer_step={s}"),
        None => println!("optimizer_step=none"),
    }
    match &ckpt.metrics {
        Some(m) => println!(
            "metrics: epoch={} train_loss={:.6} val_auroc={:.6} val_f1={:.6}",
            m.epoch, m.train_loss, m.val_auroc, m.val_f1
        ),
        None => println!("metrics=none"),
    }
    let total: usize = ckpt.tensors.iter().map(|(_, t)| t.numel()).sum();
    println!("tensors={} parameters={total}", ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        println!("{name},{},{}", dims.join("x"), t.numel());
    }
    Ok(())
}
