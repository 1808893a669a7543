mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use flashvtg_core::data::{
    generate_synthetic, load_annotations, load_checkpoint, load_dataset, save_checkpoint,
    write_dataset, Dataset, Sample, SyntheticConfig,
};
use flashvtg_core::inference::{by_qid, read_predictions, write_predictions};
use flashvtg_core::metrics::{self, MetricReport};
use flashvtg_core::trainer::{
    ablate, ablation_csv, evaluate, loss_grad_check, model_from_checkpoint, train, TrainConfig,
    TrainError,
};
use flashvtg_core::Model;
use log::{error, info};

use crate::config::ConfigFile;

#[derive(Parser)]
#[command(
    name = "flashvtg",
    version,
    about = "Video temporal grounding on clip features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model; writes last.fvck, best.fvck and runlog.jsonl.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file against annotations.
    Eval(EvalArgs),
    /// Write ranked moments and clip saliency as line-JSON.
    Predict(PredictArgs),
    /// Train the baseline, +tfl and +tfl+asr variants and emit a CSV table.
    Ablate(AblateArgs),
    /// Finite-difference check of the full training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file; its `[synth]` table overlays the generator defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory to create (falls back to `out` in the file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training videos.
    #[arg(long)]
    n_videos: Option<usize>,
    /// Number of validation videos.
    #[arg(long)]
    n_val: Option<usize>,
    /// Scale of the planted query signal inside GT windows.
    #[arg(long)]
    signal_strength: Option<f64>,
    /// Fraction of windows shorter than 10 s.
    #[arg(long)]
    short_fraction: Option<f64>,
}

/// Flags that override `[train]` values.
#[derive(Args, Clone, Default)]
struct TrainOverrides {
    /// `tiny` (default) or `default`.
    #[arg(long)]
    preset: Option<String>,
    /// Training seed (initialisation, shuffling, loss sampling).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Pyramid levels K.
    #[arg(long)]
    levels: Option<usize>,
    /// Validate every this many steps (and at the end of training).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Coordinates per parameter probed by the pre-training gradient gate; 0 skips it.
    #[arg(long)]
    gate_coords: Option<usize>,
    /// Disable the temporal feature pyramid.
    #[arg(long)]
    no_tfl: bool,
    /// Disable adaptive score refinement.
    #[arg(long)]
    no_asr: bool,
}

impl TrainOverrides {
    fn apply(&self, file: &ConfigFile) -> Result<TrainConfig> {
        let mut cfg = file.train_config(self.preset.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(seed, epochs, lr, batch_size, levels, gate_coords);
        if let Some(v) = self.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = Some(v);
        }
        if self.no_tfl {
            cfg.tfl_enabled = false;
        }
        if self.no_asr {
            cfg.asr_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with `preset`, `data`, `out` and a `[train]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `synth` or laid out the same way.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and the run log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to predict with.
    #[arg(
        long,
        required_unless_present = "pred_file",
        conflicts_with = "pred_file"
    )]
    checkpoint: Option<PathBuf>,
    /// Prediction file written by `predict`; no weights are loaded.
    #[arg(long)]
    pred_file: Option<PathBuf>,
    /// Dataset directory holding the annotations.
    #[arg(long)]
    data: PathBuf,
    /// `val` or `train`.
    #[arg(long, default_value = "val")]
    split: String,
    /// Moments kept per query after NMS.
    #[arg(long)]
    top_n: Option<usize>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to predict on.
    #[arg(long)]
    data: PathBuf,
    /// Line-JSON output file.
    #[arg(long)]
    out: PathBuf,
    /// `val` or `train`.
    #[arg(long, default_value = "val")]
    split: String,
    /// Moments kept per query after NMS.
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML file; `seeds` and `[train]` are read from it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; it must have a validation split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model settings come from `[train]`; without a file the gate model
    /// (d=8, 2 heads, 3 levels, 2 dummies) is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the model, the sample and the probed coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates probed per parameter; all when omitted.
    #[arg(long)]
    coords: Option<usize>,
    /// Largest max relative error that passes.
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Replace every backward rule by a wrong one.
    #[arg(long, hide = true)]
    inject_broken_backward: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = threads(1) {
        error!("{e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Worker cap from `FLASHVTG_THREADS`, else `default`.
fn threads(default: usize) -> Result<usize> {
    match std::env::var("FLASHVTG_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("FLASHVTG_THREADS={v:?} is not a count"))?;
            ensure!(n > 0, "FLASHVTG_THREADS must be positive");
            Ok(n)
        }
        Err(_) => Ok(default),
    }
}

fn all_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| file.clone()) {
        Some(p) => Ok(p),
        None => bail!("--{name} is required (or set `{name}` in the config file)"),
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [Sample]> {
    let samples = match name {
        "train" => &data.train,
        "val" => &data.val,
        other => bail!("unknown split {other:?} (expected \"train\" or \"val\")"),
    };
    ensure!(!samples.is_empty(), "split {name:?} is empty");
    Ok(samples)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let out = required(a.out, &file.out, "out")?;
    let mut cfg = file.synth_config()?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_videos {
        cfg.n_videos = v;
    }
    if let Some(v) = a.n_val {
        cfg.n_val = v;
    }
    if let Some(v) = a.signal_strength {
        cfg.signal_strength = v;
    }
    if let Some(v) = a.short_fraction {
        cfg.short_fraction = v;
    }
    let ds = generate_synthetic(&cfg)?;
    let generator = serde_json::to_value(&cfg)?;
    let manifest = write_dataset(&out, &ds, Some(cfg.seed), generator)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    info!(
        "wrote {} train and {} val queries ({} files) to {}",
        ds.train.len(),
        ds.val.len(),
        manifest.files.len(),
        out.display()
    );
    Ok(())
}

fn write_runlog(path: &Path, log: &flashvtg_core::trainer::RunLog) -> Result<()> {
    std::fs::write(path, log.to_jsonl()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let data_dir = required(a.data, &file.data, "data")?;
    let out = required(a.out, &file.out, "out")?;
    let cfg = a.overrides.apply(&file)?;
    let t = threads(1)?;
    if t != 1 {
        info!("training is single-threaded; FLASHVTG_THREADS={t} applies to evaluation only");
    }
    let data = load_data(&data_dir)?;
    let resume = a
        .resume
        .as_deref()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match train(&cfg, &data, resume.as_ref()) {
        Ok(outcome) => {
            save_checkpoint(&outcome.last, out.join("last.fvck"))?;
            save_checkpoint(&outcome.best, out.join("best.fvck"))?;
            write_runlog(&out.join("runlog.jsonl"), &outcome.log)?;
            if let Some(g) = &outcome.gate {
                info!("gradient gate max relative error {:.3e}", g.max_rel_error);
            }
            match outcome.best_map {
                Some(m) => info!("best val mAP {m:.4}; checkpoints in {}", out.display()),
                None => info!("no val split; checkpoints in {}", out.display()),
            }
            Ok(())
        }
        Err(TrainError::Diverged {
            step,
            reason,
            last_good,
            log,
        }) => {
            let partial = out.join("partial.fvck");
            save_checkpoint(&last_good, &partial)?;
            write_runlog(&out.join("runlog.jsonl"), &log)?;
            bail!(
                "training diverged at step {step}: {reason}; last good state saved to {}",
                partial.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

/// Loads a checkpoint and checks it fits the dataset's feature widths.
fn model_for(path: &Path, data: &Dataset) -> Result<(Model, TrainConfig)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, cfg) = model_from_checkpoint(&ckpt)?;
    let (dv, dq) = (data.d_video(), data.d_query());
    if dv.is_some_and(|d| d != model.config.d_video)
        || dq.is_some_and(|d| d != model.config.d_query)
    {
        bail!(
            "checkpoint expects {}-wide video and {}-wide query features, dataset has {:?} and {:?}",
            model.config.d_video,
            model.config.d_query,
            dv,
            dq
        );
    }
    Ok((model, cfg.train))
}

fn emit_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => {
            std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{json}"),
    }
    eprint!("{}", report.render_table());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let report = if let Some(pred) = &a.pred_file {
        let path = a.data.join(format!("{}.jsonl", a.split));
        let anns =
            load_annotations(&path).with_context(|| format!("loading {}", path.display()))?;
        ensure!(!anns.is_empty(), "split {:?} is empty", a.split);
        let preds =
            read_predictions(pred).with_context(|| format!("loading {}", pred.display()))?;
        metrics::evaluate(&by_qid(&preds), &anns)
    } else {
        let ckpt = a.checkpoint.as_deref().expect("clap requires one source");
        let data = load_data(&a.data)?;
        let samples = split(&data, &a.split)?;
        let (model, cfg) = model_for(ckpt, &data)?;
        evaluate(
            &model,
            samples,
            a.top_n.unwrap_or(cfg.top_n),
            threads(all_cores())?,
        )?
        .0
    };
    emit_report(&report, a.out.as_deref())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let samples = split(&data, &a.split)?;
    let (model, cfg) = model_for(&a.checkpoint, &data)?;
    let top_n = a.top_n.unwrap_or(cfg.top_n);
    ensure!(top_n > 0, "--top-n must be positive");
    let (_, preds) = evaluate(&model, samples, top_n, threads(all_cores())?)?;
    write_predictions(&a.out, &preds).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let data_dir = required(a.data, &file.data, "data")?;
    let out = required(a.out, &file.out, "out")?;
    let cfg = a.overrides.apply(&file)?;
    let seeds = a
        .seeds
        .or_else(|| file.seeds.clone())
        .unwrap_or_else(|| (0..5).collect());
    ensure!(!seeds.is_empty(), "no ablation seeds");
    let data = load_data(&data_dir)?;
    ensure!(!data.val.is_empty(), "ablation needs a val split");
    let rows = ablate(&cfg, &data, &seeds)?;
    std::fs::write(&out, ablation_csv(&rows))
        .with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {} ablation rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ConfigFile::load(Some(p))?.train_config(None)?,
        None => TrainConfig {
            d_model: 8,
            heads: 2,
            levels: 3,
            n_dummies: 2,
            encoder_layers: 1,
            score_kernel: 3,
            ..TrainConfig::tiny()
        },
    };
    let cfg = TrainConfig {
        seed: a.seed,
        ..cfg
    };
    let data = generate_synthetic(&SyntheticConfig {
        n_videos: 1,
        n_val: 0,
        min_clips: 12,
        max_clips: 12,
        min_query_len: 3,
        max_query_len: 3,
        d_video: 8,
        d_query: 8,
        seed: a.seed,
        ..SyntheticConfig::default()
    })?;
    let sample = &data.train[0];
    let model = Model::new(cfg.model_config(8, 8, sample.annotation.clip_len))?;
    let report = loss_grad_check(
        &model,
        sample,
        &cfg.weights,
        &cfg.loss,
        a.coords,
        a.seed,
        a.inject_broken_backward,
    )?;
    for (name, err) in &report.per_param {
        println!("{name:<40} {err:.3e}");
    }
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) over {} coordinates",
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric,
        report.coords_checked
    );
    if report.max_rel_error < a.threshold {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        bail!(
            "gradient check failed: {:.3e} >= {:.1e} at {}",
            report.max_rel_error,
            a.threshold,
            report.worst_param
        )
    }
}
