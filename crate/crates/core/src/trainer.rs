//! Deterministic training loop, evaluation and the component ablation.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Checkpoint, DataError, Dataset, Sample};
use crate::inference::{by_qid, predict, PredictOptions, PredictionSet};
use crate::losses::{
    assign_targets, model_loss, LossComponents, LossParams, LossWeights, MatchTargets,
};
use crate::metrics::{self, MetricReport};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::pyramid::level_lengths;
use crate::seeds::derived_rng;
use crate::tensor::{
    grad_check, AdamWConfig, GradCheckOptions, GradCheckReport, LossAndGrad, Mask, OptimState,
    ParamStore, Tape, Tensor, TensorError,
};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_LOSS: u64 = 2;
const STREAM_GATE: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("gradient gate failed: max relative error {:.3e} at {}", .0.max_rel_error, .0.worst_param)]
    GateFailed(Box<GradCheckReport>),
    #[error("loss diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// Parameters and optimizer state before the failing step.
        last_good: Box<Checkpoint>,
        log: RunLog,
    },
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Pyramid depth when the feature pyramid is enabled.
    pub levels: usize,
    pub n_dummies: usize,
    pub encoder_layers: usize,
    pub ffn_mult: usize,
    pub aca_residual: bool,
    pub pos_enc: bool,
    pub score_kernel: usize,
    /// Temporal feature pyramid; off forces a single level.
    pub tfl_enabled: bool,
    /// Adaptive score refinement; off uses a width-1 per-level score head.
    pub asr_enabled: bool,
    pub weights: LossWeights,
    pub loss: LossParams,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation interval in optimizer steps; `None` evaluates once per epoch.
    pub eval_every: Option<u64>,
    /// Coordinates probed per parameter by the pre-training gradient gate;
    /// zero disables the gate.
    pub gate_coords: usize,
    pub gate_threshold: f64,
    pub top_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            levels: 4,
            n_dummies: 10,
            encoder_layers: 3,
            ffn_mult: 2,
            aca_residual: true,
            pos_enc: true,
            score_kernel: 5,
            tfl_enabled: true,
            asr_enabled: true,
            weights: LossWeights::default(),
            loss: LossParams::default(),
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 150,
            max_steps: None,
            batch_size: 8,
            seed: 0,
            eval_every: None,
            gate_coords: 2,
            gate_threshold: 1e-3,
            top_n: crate::inference::DEFAULT_TOP_N,
        }
    }
}

impl TrainConfig {
    /// Small model for desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            d_model: 64,
            levels: 3,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and nonnegative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and nonnegative");
        }
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if self.top_n == 0 {
            return bad("top_n must be positive");
        }
        self.weights.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    pub fn effective_levels(&self) -> usize {
        if self.tfl_enabled {
            self.levels
        } else {
            1
        }
    }

    pub fn model_config(&self, d_video: usize, d_query: usize, clip_len: f64) -> ModelConfig {
        ModelConfig {
            d_video,
            d_query,
            d_model: self.d_model,
            heads: self.heads,
            n_dummies: self.n_dummies,
            encoder_layers: self.encoder_layers,
            ffn_mult: self.ffn_mult,
            levels: self.effective_levels(),
            clip_len,
            aca_residual: self.aca_residual,
            pos_enc: self.pos_enc,
            asr_enabled: self.asr_enabled,
            score_kernel: self.score_kernel,
            init_seed: self.seed,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Configuration echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch {
        epoch: u64,
        step: u64,
        loss: f64,
        components: LossComponents,
        grad_norm: f64,
        wall_secs: f64,
    },
    Eval {
        epoch: u64,
        step: u64,
        report: MetricReport,
        wall_secs: f64,
    },
}

/// Append-only training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    /// Total loss of every optimizer step, batch mean.
    pub step_losses: Vec<f64>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimState,
    /// Final parameters with optimizer state.
    pub last: Checkpoint,
    /// Parameters with the best validation average mAP (the final ones
    /// when there is no validation split).
    pub best: Checkpoint,
    pub best_map: Option<f64>,
    pub log: RunLog,
    pub gate: Option<GradCheckReport>,
}

struct Prepared<'a> {
    sample: &'a Sample,
    targets: MatchTargets,
}

fn prepare<'a>(samples: &'a [Sample], model: &ModelConfig, loss: &LossParams) -> Vec<Prepared<'a>> {
    samples
        .iter()
        .map(|s| {
            let lengths = level_lengths(s.video.rows(), model.levels);
            let masks: Vec<Mask> = lengths.iter().map(|&l| Mask::all_valid(l)).collect();
            Prepared {
                sample: s,
                targets: assign_targets(&s.annotation, &masks, loss),
            }
        })
        .collect()
}

/// Loss of one sample under `params`, with gradients when requested.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &Model,
    params: &ParamStore,
    sample: &Sample,
    targets: &MatchTargets,
    weights: &LossWeights,
    loss: &LossParams,
    sampling_seed: u64,
    mut tape: Tape,
    want_grad: bool,
) -> Result<(f64, LossComponents, Option<Vec<Tensor>>), TensorError> {
    let vars = if want_grad {
        params.register(&mut tape)?
    } else {
        params.register_frozen(&mut tape)?
    };
    let video = sample.video_sequence();
    let query = sample.query_tokens();
    let out = model.forward(&mut tape, &vars, &video, &query, ForwardOptions::default())?;
    let mut rng = derived_rng(sampling_seed, STREAM_LOSS, 0);
    let l = model_loss(&mut tape, &out, targets, weights, loss, &mut rng)?;
    let total = tape.value(l.total).data()[0];
    let grads = if want_grad {
        let g = tape.backward(l.total)?;
        Some(
            vars.iter()
                .zip(params.values())
                .map(|(&v, p)| g.get_or_zeros(v, p))
                .collect(),
        )
    } else {
        None
    };
    Ok((total, l.components, grads))
}

/// Finite-difference check of the full training loss on one sample.
#[allow(clippy::too_many_arguments)]
pub fn loss_grad_check(
    model: &Model,
    sample: &Sample,
    weights: &LossWeights,
    loss: &LossParams,
    coords_per_param: Option<usize>,
    seed: u64,
    broken_backward: bool,
) -> Result<GradCheckReport, TensorError> {
    let masks: Vec<Mask> = level_lengths(sample.video.rows(), model.config.levels)
        .into_iter()
        .map(Mask::all_valid)
        .collect();
    let targets = assign_targets(&sample.annotation, &masks, loss);
    let opts = GradCheckOptions {
        max_coords_per_param: coords_per_param,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(&model.params, opts, |p, want| {
        let tape = if broken_backward {
            Tape::with_broken_backward()
        } else {
            Tape::new()
        };
        let (l, _, g) = sample_loss(model, p, sample, &targets, weights, loss, seed, tape, want)?;
        Ok::<_, TensorError>(LossAndGrad { loss: l, grads: g })
    })
}

fn config_json(model: &ModelConfig, train: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(CheckpointConfig {
        model: model.clone(),
        train: train.clone(),
    })
    .expect("config serializes")
}

/// Rebuilds a model from a checkpoint's echoed config and tensors.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, CheckpointConfig)> {
    let cfg: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    let mut model = Model::new(cfg.model.clone())?;
    ckpt.restore_params(&mut model.params)?;
    Ok((model, cfg))
}

fn grads_finite(g: &[Tensor]) -> bool {
    g.iter().all(Tensor::is_finite)
}

fn params_finite(p: &ParamStore) -> bool {
    p.values().iter().all(Tensor::is_finite)
}

/// Trains from scratch, or continues from `resume` (which must carry
/// optimizer state saved by an earlier run with the same config).
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let first = &data.train[0];
    let model_cfg = cfg.model_config(
        first.video.cols(),
        first.query.cols(),
        first.annotation.clip_len,
    );
    if data
        .train
        .iter()
        .chain(&data.val)
        .any(|s| s.video.cols() != model_cfg.d_video || s.query.cols() != model_cfg.d_query)
    {
        return Err(TrainError::Config(
            "feature widths differ between samples".into(),
        ));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut opt = OptimState::new(cfg.adamw(), &model.params);
    if let Some(ckpt) = resume {
        let stored: CheckpointConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
        if stored.model != model_cfg {
            return Err(TrainError::ConfigMismatch(
                "model config differs from the checkpoint".into(),
            ));
        }
        ckpt.restore_params(&mut model.params)?;
        if let Some(state) = ckpt.restore_optimizer(&model.params)? {
            opt = OptimState {
                config: cfg.adamw(),
                ..state
            };
        }
    }
    let prepared = prepare(&data.train, &model_cfg, &cfg.loss);

    let gate = if cfg.gate_coords > 0 && opt.step == 0 {
        let smallest = data
            .train
            .iter()
            .min_by_key(|s| s.video.rows())
            .expect("nonempty");
        let report = loss_grad_check(
            &model,
            smallest,
            &cfg.weights,
            &cfg.loss,
            Some(cfg.gate_coords),
            crate::seeds::splitmix(cfg.seed ^ STREAM_GATE),
            false,
        )?;
        info!(
            "gradient gate: max relative error {:.3e} ({})",
            report.max_rel_error, report.worst_param
        );
        if report.max_rel_error >= cfg.gate_threshold {
            return Err(TrainError::GateFailed(Box::new(report)));
        }
        Some(report)
    } else {
        None
    };

    let n = prepared.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg
        .max_steps
        .unwrap_or(u64::MAX)
        .min(cfg.epochs.saturating_mul(steps_per_epoch));
    let eval_every = cfg.eval_every.unwrap_or(steps_per_epoch).max(1);
    let mut log = RunLog::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut epoch_acc = EpochAcc::default();

    while opt.step < total_steps {
        let step = opt.step;
        let epoch = step / steps_per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(cfg.seed, STREAM_SHUFFLE, epoch));
        let b = (step % steps_per_epoch) as usize;
        let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];

        let mut grads: Vec<Tensor> = model
            .params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut batch_loss = 0.0;
        let mut comps = LossComponents::default();
        let scale = 1.0 / batch.len() as f64;
        for (j, &idx) in batch.iter().enumerate() {
            let p = &prepared[idx];
            let seed = crate::seeds::splitmix(cfg.seed ^ crate::seeds::splitmix(step)) ^ j as u64;
            let result = sample_loss(
                &model,
                &model.params,
                p.sample,
                &p.targets,
                &cfg.weights,
                &cfg.loss,
                seed,
                Tape::new(),
                true,
            );
            let (l, c, g) = match result {
                Ok(v) => v,
                Err(e @ TensorError::NonFinite { .. }) => {
                    return Err(diverged(
                        &model,
                        &opt,
                        &model_cfg,
                        cfg,
                        step,
                        e.to_string(),
                        log,
                    ));
                }
                Err(e) => return Err(e.into()),
            };
            batch_loss += l * scale;
            add_scaled(&mut comps, &c, scale);
            for (acc, gi) in grads.iter_mut().zip(g.expect("requested")) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gi.data())
                    .for_each(|(a, b)| *a += b * scale);
            }
        }
        if !batch_loss.is_finite() || !grads_finite(&grads) {
            return Err(diverged(
                &model,
                &opt,
                &model_cfg,
                cfg,
                step,
                "non-finite loss or gradient".into(),
                log,
            ));
        }
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let snapshot = (model.params.clone(), opt.clone());
        opt.step(&mut model.params, &grads)?;
        if !params_finite(&model.params) {
            let (p, o) = snapshot;
            model.params = p;
            return Err(diverged(
                &model,
                &o,
                &model_cfg,
                cfg,
                step,
                "non-finite parameter".into(),
                log,
            ));
        }
        log.step_losses.push(batch_loss);
        epoch_acc.push(batch_loss, &comps, grad_norm);
        debug!(
            "step {} loss {:.6} grad_norm {:.4}",
            opt.step, batch_loss, grad_norm
        );

        let done = opt.step == total_steps;
        if opt.step.is_multiple_of(steps_per_epoch) || done {
            log.records
                .push(epoch_acc.finish(epoch, opt.step, started.elapsed().as_secs_f64()));
        }
        if !data.val.is_empty() && (opt.step.is_multiple_of(eval_every) || done) {
            let (report, _) = evaluate(&model, &data.val, cfg.top_n, 1)?;
            info!(
                "step {} val mAP {:.4} R1@0.7 {:.4}",
                opt.step, report.map_avg, report.r1_at_0_7
            );
            if best.as_ref().is_none_or(|(m, _)| report.map_avg > *m) {
                let ckpt =
                    Checkpoint::from_params(&model.params, None, config_json(&model_cfg, cfg))?;
                best = Some((report.map_avg, ckpt));
            }
            log.records.push(LogRecord::Eval {
                epoch,
                step: opt.step,
                report,
                wall_secs: started.elapsed().as_secs_f64(),
            });
        }
    }

    let last = Checkpoint::from_params(&model.params, Some(&opt), config_json(&model_cfg, cfg))?;
    let (best_map, best) = match best {
        Some((m, c)) => (Some(m), c),
        None => (
            None,
            Checkpoint::from_params(&model.params, None, config_json(&model_cfg, cfg))?,
        ),
    };
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        last,
        best,
        best_map,
        log,
        gate,
    })
}

fn diverged(
    model: &Model,
    opt: &OptimState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    step: u64,
    reason: String,
    log: RunLog,
) -> TrainError {
    match Checkpoint::from_params(&model.params, Some(opt), config_json(model_cfg, cfg)) {
        Ok(ckpt) => TrainError::Diverged {
            step,
            reason,
            last_good: Box::new(ckpt),
            log,
        },
        Err(e) => e.into(),
    }
}

fn add_scaled(acc: &mut LossComponents, c: &LossComponents, s: f64) {
    acc.reg += c.reg * s;
    acc.cls += c.cls * s;
    acc.cas += c.cas * s;
    acc.snce += c.snce * s;
    acc.sal += c.sal * s;
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    loss: f64,
    comps: LossComponents,
    grad_norm: f64,
}

impl EpochAcc {
    fn push(&mut self, loss: f64, comps: &LossComponents, grad_norm: f64) {
        self.steps += 1;
        self.loss += loss;
        add_scaled(&mut self.comps, comps, 1.0);
        self.grad_norm += grad_norm;
    }

    fn finish(&mut self, epoch: u64, step: u64, wall_secs: f64) -> LogRecord {
        let n = self.steps.max(1) as f64;
        let mut components = LossComponents::default();
        add_scaled(&mut components, &self.comps, 1.0 / n);
        let rec = LogRecord::Epoch {
            epoch,
            step,
            loss: self.loss / n,
            components,
            grad_norm: self.grad_norm / n,
            wall_secs,
        };
        *self = Self::default();
        rec
    }
}

/// Predicts every sample and scores the predictions. Uses up to `threads`
/// workers; results do not depend on the thread count.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    top_n: usize,
    threads: usize,
) -> Result<(MetricReport, Vec<PredictionSet>)> {
    let opts = PredictOptions {
        top_n,
        ..PredictOptions::default()
    };
    let preds: Vec<PredictionSet> = if threads <= 1 {
        samples
            .iter()
            .map(|s| predict(model, s, opts))
            .collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(|| {
            samples
                .par_iter()
                .map(|s| predict(model, s, opts))
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    let anns: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let report = metrics::evaluate(&by_qid(&preds), &anns);
    Ok((report, preds))
}

/// The three ablation variants: single scale without refinement, with the
/// pyramid, and with pyramid plus refinement.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("baseline", false, false),
    ("+tfl", true, false),
    ("+tfl+asr", true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub val: MetricReport,
}

/// Trains each variant under every seed and reports validation metrics of
/// the final parameters.
pub fn ablate(cfg: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, tfl, asr) in ABLATION_VARIANTS {
            let run = TrainConfig {
                seed,
                tfl_enabled: tfl,
                asr_enabled: asr,
                ..cfg.clone()
            };
            rows.push(ablation_run(&run, data, name)?);
        }
    }
    Ok(rows)
}

/// One ablation cell: trains `cfg` and evaluates on the validation split.
pub fn ablation_run(cfg: &TrainConfig, data: &Dataset, name: &str) -> Result<AblationRow> {
    let holdout = Dataset {
        train: data.train.clone(),
        val: Vec::new(),
    };
    let out = train(cfg, &holdout, None)?;
    let (val, _) = evaluate(&out.model, &data.val, cfg.top_n, 1)?;
    info!(
        "ablation {name} seed {}: val mAP {:.4}",
        cfg.seed, val.map_avg
    );
    Ok(AblationRow {
        variant: name.to_string(),
        seed: cfg.seed,
        val,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut out = String::from(
        "variant,seed,r1_at_0_5,r1_at_0_7,map_at_0_5,map_at_0_75,map_avg,miou,short_map,middle_map,long_map,hd_map,hit_at_1\n",
    );
    for r in rows {
        let m = &r.val;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            m.r1_at_0_5,
            m.r1_at_0_7,
            m.map_at_0_5,
            m.map_at_0_75,
            m.map_avg,
            m.miou,
            opt(m.short_map),
            opt(m.middle_map),
            opt(m.long_map),
            opt(m.hd_map),
            opt(m.hit_at_1),
        ));
    }
    out
}
