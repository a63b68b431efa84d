//! Command line interface.
//!
//! Every subcommand reads a TOML run configuration (see [`crate::settings`])
//! and writes its artifacts under a run directory
//! (`checkpoints/`, `reports/`, `logs/`). Existing outputs are never
//! clobbered unless `--overwrite` is passed.
//!
//! Exit codes: 0 success, 2 usage errors, 3 config errors, 4 data errors,
//! 5 checkpoint errors, 6 refusal to overwrite, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{count_flops, ExecutedOp, FlopsConvention, FlopsLedger};
use crate::infer::{
    ablation_run, infer_sample, layer_similarity_diagnostic, sweep_thresholds, AblationMode,
    InferOptions, Metric,
};
use crate::params::ModelParams;
use crate::report;
use crate::settings::{default_run_root, Settings};
use crate::train::{load_checkpoint, save_checkpoint, train_stage1, train_stage2, Checkpoint};

#[derive(Parser)]
#[command(
    name = "skipgate",
    about = "Adaptive transformer inference with layer skipping and entropy exits",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to <run root>/default.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

impl CommonArgs {
    fn run_dir(&self) -> PathBuf {
        self.run_dir
            .clone()
            .unwrap_or_else(|| default_run_root().join("default"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1, stage 2, or both, writing checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Which stage to run.
        #[arg(long, default_value = "both", value_parser = ["1", "2", "both"])]
        stage: String,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured lambda (skip regularizer weight).
        #[arg(long)]
        lambda: Option<f64>,
        /// Override the configured eta (contrastive weight).
        #[arg(long)]
        eta: Option<f64>,
        /// Train the plain reference model instead (no gates, no exits);
        /// writes checkpoints/baseline.ckpt.
        #[arg(long)]
        baseline: bool,
    },
    /// Run adaptive inference over the test split, writing per-sample traces.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint path; defaults to <run_dir>/checkpoints/stage2.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Entropy threshold S.
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        /// Inference mode: full, skip_only, exit_only, no_gates_no_exit.
        #[arg(long, default_value = "full")]
        mode: String,
    },
    /// Sweep entropy thresholds and emit CSV reports.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated thresholds; defaults to the config's list.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Print the analytic per-operation cost ledger for a configuration.
    Flops {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-layer skip/exit histograms at one threshold.
    Frequencies {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
    },
    /// Consecutive-layer representation similarity diagnostic.
    Similarity {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one ablation mode at one threshold.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// full, skip_only, exit_only or no_gates_no_exit.
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
    },
    /// Generate the configured synthetic dataset as TSV files.
    GenerateData {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.tsv/val.tsv/test.tsv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

/// Entry point; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/usage itself; 2 for usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
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
    match cli.command {
        Command::Train {
            common,
            stage,
            seed,
            lambda,
            eta,
            baseline,
        } => cmd_train(&common, &stage, seed, lambda, eta, baseline),
        Command::Infer {
            common,
            checkpoint,
            threshold,
            mode,
        } => cmd_infer(&common, checkpoint, threshold, &mode),
        Command::Sweep {
            common,
            checkpoint,
            thresholds,
            mode,
        } => cmd_sweep(&common, checkpoint, thresholds, mode),
        Command::Flops { config } => cmd_flops(&config),
        Command::Frequencies {
            common,
            checkpoint,
            threshold,
        } => cmd_frequencies(&common, checkpoint, threshold),
        Command::Similarity { common, checkpoint } => cmd_similarity(&common, checkpoint),
        Command::Ablate {
            common,
            checkpoint,
            mode,
            threshold,
        } => cmd_ablate(&common, checkpoint, &mode, threshold),
        Command::GenerateData {
            config,
            out,
            overwrite,
        } => cmd_generate_data(&config, &out, overwrite),
    }
}

fn ensure_writable(paths: &[PathBuf], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::WouldClobber(p.display().to_string()));
        }
    }
    Ok(())
}

fn checkpoint_path(common: &CommonArgs, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| common.run_dir().join("checkpoints/stage2.ckpt"))
}

fn load_model(path: &Path) -> Result<(Checkpoint, ModelParams)> {
    let ckpt = load_checkpoint(path)?;
    let params = ckpt.build_params()?;
    params.validate_finite()?;
    Ok((ckpt, params))
}

fn cmd_train(
    common: &CommonArgs,
    stage: &str,
    seed: Option<u64>,
    lambda: Option<f64>,
    eta: Option<f64>,
    baseline: bool,
) -> Result<()> {
    let mut settings = Settings::load(&common.config)?;
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    if let Some(l) = lambda {
        settings.train.lambda = l;
    }
    if let Some(e) = eta {
        settings.train.eta = e;
    }
    settings.train.validate()?;
    let run_dir = common.run_dir();
    let ckpt_dir = run_dir.join("checkpoints");
    let logs_dir = run_dir.join("logs");
    let stage1_path = ckpt_dir.join("stage1.ckpt");
    let stage2_path = ckpt_dir.join("stage2.ckpt");
    let metrics_path = logs_dir.join("metrics.jsonl");

    let (train, val, _test) = settings.load_datasets()?;

    if baseline {
        let baseline_path = ckpt_dir.join("baseline.ckpt");
        let baseline_metrics = logs_dir.join("baseline_metrics.jsonl");
        ensure_writable(
            &[baseline_path.clone(), baseline_metrics.clone()],
            common.overwrite,
        )?;
        let params =
            ModelParams::init(&settings.model, settings.ccl.proj_dim, settings.train.seed)?;
        let outcome = crate::train::train_vanilla(&params, &train, &val, &settings.train)?;
        let ckpt = Checkpoint::from_model(
            &params,
            &settings.train,
            &settings.ccl,
            0,
            settings.train.seed,
            outcome.rng_word_pos,
            Some(outcome.optimizer.clone()),
        );
        save_checkpoint(&baseline_path, &ckpt)?;
        report::write_metrics_jsonl(&outcome.records, &baseline_metrics)?;
        println!(
            "baseline done: best epoch {} validation accuracy {:.4}",
            outcome.best_epoch, outcome.best_val_accuracy
        );
        return Ok(());
    }
    let mut all_records = Vec::new();

    let run_stage1 = stage == "1" || stage == "both";
    let run_stage2 = stage == "2" || stage == "both";
    let mut outputs: Vec<PathBuf> = vec![metrics_path.clone()];
    if run_stage1 {
        outputs.push(stage1_path.clone());
    }
    if run_stage2 {
        outputs.push(stage2_path.clone());
    }
    ensure_writable(&outputs, common.overwrite)?;

    let params = if run_stage1 {
        let params = ModelParams::init(&settings.model, settings.ccl.proj_dim, settings.train.seed)?;
        let outcome = train_stage1(&params, &train, &val, &settings.ccl, &settings.train)?;
        all_records.extend(outcome.records.clone());
        let ckpt = Checkpoint::from_model(
            &params,
            &settings.train,
            &settings.ccl,
            1,
            settings.train.seed,
            outcome.rng_word_pos,
            Some(outcome.optimizer),
        );
        save_checkpoint(&stage1_path, &ckpt)?;
        println!(
            "stage 1 done: best epoch {} validation accuracy {:.4}",
            outcome.best_epoch, outcome.best_val_accuracy
        );
        params
    } else {
        let (ckpt, params) = load_model(&stage1_path)?;
        if ckpt.stage != 1 {
            return Err(Error::Checkpoint(format!(
                "{} is a stage-{} checkpoint, expected stage 1",
                stage1_path.display(),
                ckpt.stage
            )));
        }
        params
    };

    if run_stage2 {
        let outcome = train_stage2(&params, &train, &val, &settings.ccl, &settings.train)?;
        all_records.extend(outcome.records.clone());
        let ckpt = Checkpoint::from_model(
            &params,
            &settings.train,
            &settings.ccl,
            2,
            settings.train.seed,
            outcome.rng_word_pos,
            Some(outcome.optimizer),
        );
        save_checkpoint(&stage2_path, &ckpt)?;
        println!(
            "stage 2 done: final intermediate-classifier accuracy {:.4}",
            outcome.best_val_accuracy
        );
    }

    report::write_metrics_jsonl(&all_records, &metrics_path)?;
    println!("artifacts under {}", run_dir.display());
    Ok(())
}

fn resolve_mode(mode: &str) -> Result<AblationMode> {
    mode.parse()
}

fn resolve_metric(settings: &Settings) -> Result<Metric> {
    settings.inference.metric.parse()
}

fn test_split(settings: &Settings) -> Result<Dataset> {
    let (_, _, test) = settings.load_datasets()?;
    Ok(test)
}

fn cmd_infer(
    common: &CommonArgs,
    checkpoint: Option<PathBuf>,
    threshold: f64,
    mode: &str,
) -> Result<()> {
    let settings = Settings::load(&common.config)?;
    let (_, params) = load_model(&checkpoint_path(common, &checkpoint))?;
    let test = test_split(&settings)?;
    let run_dir = common.run_dir();
    let traces_path = run_dir.join("reports/traces.jsonl");
    ensure_writable(&[traces_path.clone()], common.overwrite)?;
    std::fs::create_dir_all(traces_path.parent().unwrap())?;

    let opts = InferOptions {
        threshold,
        mode: resolve_mode(mode)?,
        convention: settings.inference.convention,
        ..Default::default()
    };
    let mut traces = Vec::with_capacity(test.len());
    let mut correct = 0usize;
    for (i, s) in test.samples.iter().enumerate() {
        let (pred, trace) = infer_sample(&params, &s.ids, &opts)?;
        if pred == s.label {
            correct += 1;
        }
        traces.push((i, s.label, trace));
    }
    report::write_traces_jsonl(&traces, &traces_path)?;
    println!(
        "{} samples, accuracy {:.4}, traces at {}",
        test.len(),
        correct as f64 / test.len() as f64,
        traces_path.display()
    );
    Ok(())
}

fn cmd_sweep(
    common: &CommonArgs,
    checkpoint: Option<PathBuf>,
    thresholds: Option<String>,
    mode: Option<String>,
) -> Result<()> {
    let settings = Settings::load(&common.config)?;
    let (_, params) = load_model(&checkpoint_path(common, &checkpoint))?;
    let test = test_split(&settings)?;
    let thresholds: Vec<f64> = match thresholds {
        Some(list) => list
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidArgument {
                        op: "sweep",
                        msg: format!("bad threshold '{t}'"),
                    }
                })
            })
            .collect::<Result<_>>()?,
        None => settings.inference.thresholds.clone(),
    };
    let mode = resolve_mode(mode.as_deref().unwrap_or(&settings.inference.mode))?;
    let metric = resolve_metric(&settings)?;
    let out_dir = common.run_dir().join("reports");
    let expected = ["sweep.csv", "frequencies.csv", "summary.txt", "manifest.json"]
        .iter()
        .map(|f| out_dir.join(f))
        .collect::<Vec<_>>();
    ensure_writable(&expected, common.overwrite)?;

    let results = sweep_thresholds(
        &params,
        &test,
        &thresholds,
        mode,
        metric,
        settings.inference.convention,
    )?;
    let files = report::emit_report(&results, &out_dir)?;
    for r in &results {
        println!(
            "S={:.3} {}={:.4} mean_flops={:.1} cost_ratio={:.4}",
            r.s, r.metric_name, r.metric_value, r.mean_flops, r.cost_ratio
        );
    }
    println!("reports: {}", files.len());
    Ok(())
}

fn cmd_flops(config: &Path) -> Result<()> {
    let settings = Settings::load(config)?;
    let costs = count_flops(&settings.model);
    let ledger = FlopsLedger::new(&settings.model, FlopsConvention::TwoFlopsPerMac);
    println!(
        "analytic cost ledger (N={}, L={})",
        settings.model.max_seq_len, settings.model.num_layers
    );
    println!("convention: 2 FLOPs per MAC (MACs in parentheses)");
    let rows = [
        ("embedding", ExecutedOp::Embedding, costs.embedding_macs),
        (
            "encoder layer",
            ExecutedOp::EncoderLayer(1),
            costs.encoder_layer_macs,
        ),
        ("skipping gate", ExecutedOp::Gate(1), costs.gate_macs),
        ("classifier", ExecutedOp::Classifier(1), costs.classifier_macs),
    ];
    for (name, op, macs) in rows {
        println!(
            "{name:>14}: {:>12.1}M FLOPs ({:>12.1}M MACs)",
            ledger.op_cost(op) as f64 / 1e6,
            macs as f64 / 1e6
        );
    }
    println!(
        "{:>14}: {:>12.1}M FLOPs",
        "full forward",
        ledger.vanilla_full() as f64 / 1e6
    );
    Ok(())
}

fn cmd_frequencies(
    common: &CommonArgs,
    checkpoint: Option<PathBuf>,
    threshold: f64,
) -> Result<()> {
    let settings = Settings::load(&common.config)?;
    let (_, params) = load_model(&checkpoint_path(common, &checkpoint))?;
    let test = test_split(&settings)?;
    let out = common.run_dir().join("reports/frequencies.csv");
    ensure_writable(&[out.clone()], common.overwrite)?;
    std::fs::create_dir_all(out.parent().unwrap())?;
    let mode = resolve_mode(&settings.inference.mode)?;
    let metric = resolve_metric(&settings)?;
    let results = sweep_thresholds(
        &params,
        &test,
        &[threshold],
        mode,
        metric,
        settings.inference.convention,
    )?;
    report::write_frequency_csv(&results, &out)?;
    let freq = results[0].frequencies.as_ref().unwrap();
    for (i, (s, e)) in freq.skips.iter().zip(&freq.exits).enumerate() {
        println!("layer {:>2}: skips {:>6}  exits {:>6}", i + 1, s, e);
    }
    println!("fallthrough {}", freq.fallthrough);
    Ok(())
}

fn cmd_similarity(common: &CommonArgs, checkpoint: Option<PathBuf>) -> Result<()> {
    let settings = Settings::load(&common.config)?;
    let (_, params) = load_model(&checkpoint_path(common, &checkpoint))?;
    let test = test_split(&settings)?;
    let out = common.run_dir().join("reports/similarity.csv");
    ensure_writable(&[out.clone()], common.overwrite)?;
    std::fs::create_dir_all(out.parent().unwrap())?;
    let sims = layer_similarity_diagnostic(&params, &test)?;
    let mut w = csv::Writer::from_path(&out)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", out.display())))?;
    w.write_record(["lower_layer", "mean_token_similarity", "mean_cls_similarity"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for s in &sims {
        w.write_record([
            s.lower_layer.to_string(),
            s.mean_token_similarity.to_string(),
            s.mean_cls_similarity.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
        println!(
            "layers {}->{}: tokens {:.4}  cls {:.4}",
            s.lower_layer,
            s.lower_layer + 1,
            s.mean_token_similarity,
            s.mean_cls_similarity
        );
    }
    w.flush()?;
    Ok(())
}

fn cmd_ablate(
    common: &CommonArgs,
    checkpoint: Option<PathBuf>,
    mode: &str,
    threshold: f64,
) -> Result<()> {
    let settings = Settings::load(&common.config)?;
    let (_, params) = load_model(&checkpoint_path(common, &checkpoint))?;
    let test = test_split(&settings)?;
    let mode = resolve_mode(mode)?;
    let metric = resolve_metric(&settings)?;
    let out = common
        .run_dir()
        .join(format!("reports/ablation_{mode}.csv"));
    ensure_writable(&[out.clone()], common.overwrite)?;
    std::fs::create_dir_all(out.parent().unwrap())?;
    let result = ablation_run(
        &params,
        &test,
        mode,
        threshold,
        metric,
        settings.inference.convention,
    )?;
    report::write_sweep_csv(std::slice::from_ref(&result), &out)?;
    println!(
        "mode={} S={:.3} {}={:.4} cost_ratio={:.4}",
        result.mode, result.s, result.metric_name, result.metric_value, result.cost_ratio
    );
    Ok(())
}

fn cmd_generate_data(config: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let settings = Settings::load(config)?;
    let (train, val, test) = settings.load_datasets()?;
    let paths = [
        out.join("train.tsv"),
        out.join("val.tsv"),
        out.join("test.tsv"),
    ];
    ensure_writable(&paths, overwrite)?;
    std::fs::create_dir_all(out)?;
    crate::data::write_tsv(&train, &paths[0])?;
    crate::data::write_tsv(&val, &paths[1])?;
    crate::data::write_tsv(&test, &paths[2])?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}
