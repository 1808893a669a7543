//! Highlight, moment and confidence heads on top of the feature pyramid.

use rand_chacha::ChaCha8Rng;

use crate::layers::{Conv1d, Linear};
use crate::pyramid::{level_stride, FeaturePyramid};
use crate::tensor::{Mask, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Clip saliency `s_i = (W1 f_i)·(W2 g) / sqrt(d)` with `g` the mean of the
/// valid fused clips.
#[derive(Debug, Clone)]
pub struct HdHead {
    pub w1: Linear,
    pub w2: Linear,
}

impl HdHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, "hd.w1", d, d, false, rng)?,
            w2: Linear::new(store, "hd.w2", d, d, false, rng)?,
        })
    }

    /// Returns an `L_v×1` column. Scores of invalid clips are computed but
    /// meaningless; callers replace them with `-inf` before ranking.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], f: Var, mask: &Mask) -> Result<Var> {
        if !mask.any_valid() {
            return Err(TensorError::AllMasked { op: "hd_head" });
        }
        let d = tape.value(f).cols();
        let g = tape.masked_mean_rows(f, mask)?;
        let a = self.w1.forward(tape, vars, f)?;
        let b = self.w2.forward(tape, vars, g)?;
        let s = tape.matmul_nt(a, b)?;
        tape.scale(s, 1.0 / (d as f64).sqrt())
    }
}

/// Replaces scores of invalid clips by `-inf`.
pub fn rank_saliency(scores: &[f64], mask: &Mask) -> Vec<f64> {
    scores
        .iter()
        .zip(mask.as_slice())
        .map(|(&s, &ok)| if ok { s } else { f64::NEG_INFINITY })
        .collect()
}

/// Shared conv-relu-conv-relu offset head, scaled per level by
/// `C_k = exp(log_scale[k])`.
#[derive(Debug, Clone)]
pub struct MomentHead {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub log_scale: ParamId,
}

/// Multiplier on the Xavier init of the moment head's output conv.
const MOMENT_KERNEL_INIT_SCALE: f64 = 0.1;

impl MomentHead {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        levels: usize,
        clip_len: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv1 = Conv1d::new(store, "moment.conv1", 3, d, d, 1, 0.0, rng)?;
        // Positive bias and a shrunk kernel keep the final relu open at every
        // position at initialisation; a unit closed there never reopens.
        let conv2 = Conv1d::new(store, "moment.conv2", 3, d, 2, 1, 1.0, rng)?;
        store
            .get_mut(conv2.kernel)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= MOMENT_KERNEL_INIT_SCALE);
        let init = (0..levels)
            .map(|k| level_stride(k, clip_len).ln())
            .collect();
        let log_scale = store.add("moment.log_scale", Tensor::new(vec![1, levels], init)?)?;
        Ok(Self {
            conv1,
            conv2,
            log_scale,
        })
    }

    /// `C_k` for 0-based `level` as a one-element variable.
    pub fn scale(&self, tape: &mut Tape, vars: &[Var], level: usize) -> Result<Var> {
        let ls = tape.slice_cols(vars[self.log_scale.index()], level, 1)?;
        tape.exp(ls)
    }

    /// Offsets `relu(conv(relu(conv(F_k)))) · C_k` as an `L_k×2` tensor.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        level_features: Var,
        mask: &Mask,
        scale: Var,
    ) -> Result<Var> {
        let x = tape.mask_rows(level_features, mask)?;
        let h = self.conv1.forward(tape, vars, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, vars, h)?;
        let h = tape.relu(h)?;
        tape.scale_by(h, scale)
    }
}

/// Two stacked temporal convolutions collapsing the width to one score.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

impl ScoreHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), width, d, d, 1, 0.0, rng)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), width, d, 1, 1, 0.0, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, vars, x)?;
        let h = tape.relu(h)?;
        self.conv2.forward(tape, vars, h)
    }
}

/// How the intra/inter mixing weight is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum MixWeight {
    /// `x = sigmoid(ξ)` from the learned pre-weight.
    #[default]
    Learned,
    /// Fixed `x`, used to probe the endpoints.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    /// Pre-sigmoid intra-scale scores, `P×1` level-major.
    pub intra: Var,
    /// Pre-sigmoid inter-scale scores, absent when refinement is disabled.
    pub inter: Option<Var>,
    /// Pre-sigmoid final scores.
    pub logits: Var,
    /// `sigmoid(logits)`, the confidence of every pyramid position.
    pub confidence: Var,
    /// Mixing weight used for this pass.
    pub mix: Option<f64>,
}

/// Adaptive score refinement: per-level scores mixed with scores computed
/// over the time-concatenated levels.
#[derive(Debug, Clone)]
pub struct ScoreRefinement {
    pub intra: ScoreHead,
    pub inter: Option<ScoreHead>,
    pub mix_logit: Option<ParamId>,
}

impl ScoreRefinement {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        width: usize,
        enabled: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if enabled {
            Ok(Self {
                intra: ScoreHead::new(store, "asr.intra", d, width, rng)?,
                inter: Some(ScoreHead::new(store, "asr.inter", d, width, rng)?),
                mix_logit: Some(store.add("asr.mix_logit", Tensor::scalar(0.0))?),
            })
        } else {
            Ok(Self {
                intra: ScoreHead::new(store, "asr.intra", d, 1, rng)?,
                inter: None,
                mix_logit: None,
            })
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        pyramid: &FeaturePyramid,
        mix: MixWeight,
    ) -> Result<ScoreOutput> {
        if pyramid.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "asr_scores",
                detail: "empty pyramid".into(),
            });
        }
        let mut masked = Vec::with_capacity(pyramid.len());
        let mut per_level = Vec::with_capacity(pyramid.len());
        for (&f, m) in pyramid.levels.iter().zip(&pyramid.masks) {
            let x = tape.mask_rows(f, m)?;
            per_level.push(self.intra.forward(tape, vars, x)?);
            masked.push(x);
        }
        let intra = concat_rows(tape, &per_level)?;
        let Some(inter_head) = &self.inter else {
            let confidence = tape.sigmoid(intra)?;
            return Ok(ScoreOutput {
                intra,
                inter: None,
                logits: intra,
                confidence,
                mix: None,
            });
        };
        let joined = concat_rows(tape, &masked)?;
        let inter = inter_head.forward(tape, vars, joined)?;
        let (w, x) = match mix {
            MixWeight::Learned => {
                let xi = vars[self.mix_logit.expect("present with inter head").index()];
                let w = tape.sigmoid(xi)?;
                let x = tape.value(w).data()[0];
                (w, x)
            }
            MixWeight::Fixed(x) => (tape.constant(Tensor::scalar(x))?, x),
        };
        let logits = tape.lerp(intra, inter, w)?;
        let confidence = tape.sigmoid(logits)?;
        Ok(ScoreOutput {
            intra,
            inter: Some(inter),
            logits,
            confidence,
            mix: Some(x),
        })
    }
}

fn concat_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(parts)
    }
}
