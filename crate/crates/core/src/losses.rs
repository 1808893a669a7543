//! Training objectives: positive assignment, focal classification, offset
//! regression, the clip-aware score loss, sampled contrastive saliency and a
//! pairwise saliency hinge.
//!
//! Every loss exists as a plain value function (used directly by tests) and
//! is recorded on the tape through [`Tape::scalar_fn`] with its analytic
//! gradient.

use log::warn;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::model::ModelOutput;
use crate::pyramid::{anchor_center, level_stride};
use crate::tensor::{kernels, min_max_values, Mask, Result, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub cas: f64,
    pub snce: f64,
    pub sal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            cls: 1.0,
            cas: 1.0,
            snce: 0.3,
            sal: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.reg, self.cls, self.cas, self.snce, self.sal];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub nce_temperature: f64,
    pub nce_negatives: usize,
    pub margin: f64,
    pub margin_pairs: usize,
    /// Level `k` (1-based) admits windows shorter than `2^k · clip_len · r`.
    pub range_ratio: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            nce_temperature: 0.07,
            nce_negatives: 8,
            margin: 0.2,
            margin_pairs: 32,
            range_ratio: 4.0,
        }
    }
}

/// Per-position training targets, level-major like the score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTargets {
    pub lengths: Vec<usize>,
    pub labels: Vec<bool>,
    /// Left/right distances in seconds for positive positions.
    pub offsets: Vec<Option<[f64; 2]>>,
    /// Index of the window each positive regresses to.
    pub window_of: Vec<Option<usize>>,
    /// Clip saliency target, when the annotation carries one.
    pub saliency: Option<Vec<f64>>,
    pub positive_clips: Vec<usize>,
    pub negative_clips: Vec<usize>,
}

impl MatchTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Whether window `w` received at least one positive position.
    pub fn covers(&self, w: usize) -> bool {
        self.window_of.contains(&Some(w))
    }
}

/// Positive assignment over a pyramid with the given per-level masks.
///
/// A valid position is positive for a window when its anchor centre lies
/// inside the window and the window's length falls inside the level's range.
/// Among several admitting windows the shortest wins. A window left without
/// any positive forces its nearest valid level-1 anchor positive, unless
/// every such anchor is the last positive of another window.
pub fn assign_targets(ann: &Annotation, masks: &[Mask], params: &LossParams) -> MatchTargets {
    let levels = masks.len();
    let lengths: Vec<usize> = masks.iter().map(Mask::len).collect();
    let total: usize = lengths.iter().sum();
    let mut labels = vec![false; total];
    let mut offsets = vec![None; total];
    let mut window_of = vec![None; total];
    let clip_len = ann.clip_len;

    let mut base = 0;
    for (k, mask) in masks.iter().enumerate() {
        let upper = if k + 1 == levels {
            f64::INFINITY
        } else {
            level_stride(k + 1, clip_len) * params.range_ratio
        };
        for i in 0..mask.len() {
            if !mask.is_valid(i) {
                continue;
            }
            let t = anchor_center(k, i, clip_len);
            let mut best: Option<(usize, f64)> = None;
            for (w, win) in ann.relevant_windows.iter().enumerate() {
                let len = win[1] - win[0];
                let admits = t >= win[0] && t <= win[1] && len < upper;
                if admits && best.is_none_or(|(_, l)| len < l) {
                    best = Some((w, len));
                }
            }
            if let Some((w, _)) = best {
                let win = ann.relevant_windows[w];
                labels[base + i] = true;
                offsets[base + i] = Some([t - win[0], win[1] - t]);
                window_of[base + i] = Some(w);
            }
        }
        base += mask.len();
    }

    if let Some(level0) = masks.first() {
        let mut count = vec![0usize; ann.relevant_windows.len()];
        for w in window_of.iter().flatten() {
            count[*w] += 1;
        }
        for (w, win) in ann.relevant_windows.iter().enumerate() {
            if count[w] > 0 {
                continue;
            }
            let mid = 0.5 * (win[0] + win[1]);
            // Unclaimed anchors first; a claimed one is taken only from a
            // window that keeps another positive.
            let nearest = (0..level0.len())
                .filter(|&i| level0.is_valid(i) && window_of[i].is_none_or(|o| count[o] > 1))
                .min_by(|&a, &b| {
                    let da = (anchor_center(0, a, clip_len) - mid).abs();
                    let db = (anchor_center(0, b, clip_len) - mid).abs();
                    let (ca, cb) = (window_of[a].is_some(), window_of[b].is_some());
                    ca.cmp(&cb).then(da.total_cmp(&db))
                });
            if let Some(i) = nearest {
                if let Some(o) = window_of[i] {
                    count[o] -= 1;
                }
                count[w] += 1;
                let t = anchor_center(0, i, clip_len);
                labels[i] = true;
                offsets[i] = Some([(t - win[0]).max(0.0), (win[1] - t).max(0.0)]);
                window_of[i] = Some(w);
            }
        }
    }

    let n_clips = lengths.first().copied().unwrap_or(0);
    let valid = |i: &usize| masks.first().is_some_and(|m| m.is_valid(*i));
    let inside = clips_inside(ann, n_clips);
    let positive_clips: Vec<usize> = (0..n_clips).filter(|i| inside[*i] && valid(i)).collect();
    let negative_clips: Vec<usize> = (0..n_clips).filter(|i| !inside[*i] && valid(i)).collect();
    let saliency = ann
        .saliency
        .as_ref()
        .filter(|s| s.len() == n_clips)
        .cloned();

    MatchTargets {
        lengths,
        labels,
        offsets,
        window_of,
        saliency,
        positive_clips,
        negative_clips,
    }
}

fn clips_inside(ann: &Annotation, n_clips: usize) -> Vec<bool> {
    let mut inside = vec![false; n_clips];
    if !ann.relevant_clip_ids.is_empty() {
        for &i in &ann.relevant_clip_ids {
            if i < n_clips {
                inside[i] = true;
            }
        }
        return inside;
    }
    for (i, flag) in inside.iter_mut().enumerate() {
        let t = anchor_center(0, i, ann.clip_len);
        *flag = ann.relevant_windows.iter().any(|w| t >= w[0] && t <= w[1]);
    }
    inside
}

/// Clip-level saliency expanded to the pyramid by stride-2 max pooling,
/// level-major.
pub fn expand_saliency(s: &[f64], lengths: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(lengths.iter().sum());
    let mut cur = s.to_vec();
    for (k, &len) in lengths.iter().enumerate() {
        if k > 0 {
            cur = cur
                .chunks(2)
                .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
        }
        debug_assert_eq!(cur.len(), len);
        out.extend_from_slice(&cur);
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean focal loss over valid positions of pre-sigmoid `logits`, with its
/// gradient.
pub fn focal_loss(
    logits: &[f64],
    labels: &[bool],
    valid: &[bool],
    alpha: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let n = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..logits.len() {
        if !valid[i] {
            continue;
        }
        let (u, a_t, sign) = if labels[i] {
            (logits[i], alpha, 1.0)
        } else {
            (-logits[i], 1.0 - alpha, -1.0)
        };
        let p_t = kernels::sigmoid(u);
        let q = kernels::sigmoid(-u);
        let log_p = -softplus(-u);
        let mod_factor = q.powf(gamma);
        total += -a_t * mod_factor * log_p;
        let d_u = -a_t * (q.powf(gamma + 1.0) - gamma * mod_factor * p_t * log_p);
        grad[i] = sign * d_u / n as f64;
    }
    (total / n as f64, grad)
}

/// Mean absolute error over every coordinate of the positive rows.
pub fn l1_loss(pred: &[[f64; 2]], target: &[Option<[f64; 2]>]) -> (f64, Vec<f64>) {
    let n = target.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![0.0; pred.len() * 2];
    if n == 0 {
        return (0.0, grad);
    }
    let denom = (2 * n) as f64;
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let Some(t) = t else { continue };
        for c in 0..2 {
            let diff = p[c] - t[c];
            total += diff.abs();
            grad[2 * i + c] = if diff > 0.0 {
                1.0 / denom
            } else if diff < 0.0 {
                -1.0 / denom
            } else {
                0.0
            };
        }
    }
    (total / denom, grad)
}

/// Mean squared error between min-max normalised `pred` and `target` over
/// valid positions.
pub fn cas_loss(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<f64> {
    let (p, _) = min_max_values(pred, valid)?;
    let (t, _) = min_max_values(target, valid)?;
    Ok(mse(&p, &t, valid).0)
}

/// Mean squared error over valid positions and its gradient wrt `pred`.
pub fn mse(pred: &[f64], target: &[f64], valid: &[bool]) -> (f64, Vec<f64>) {
    let n = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![0.0; pred.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        if valid[i] {
            let diff = pred[i] - target[i];
            total += diff * diff;
            grad[i] = 2.0 * diff / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// InfoNCE over clip scores: each positive competes against its own sampled
/// negatives. `negatives[j]` belongs to `positives[j]`.
pub fn sampled_nce_loss(
    s: &[f64],
    positives: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; s.len()];
    let pairs: Vec<_> = positives
        .iter()
        .zip(negatives)
        .filter(|(_, n)| !n.is_empty())
        .collect();
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let m = pairs.len() as f64;
    let mut total = 0.0;
    for (&p, negs) in pairs {
        let mut logits = Vec::with_capacity(negs.len() + 1);
        logits.push(s[p] / tau);
        logits.extend(negs.iter().map(|&n| s[n] / tau));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - logits[0];
        let soft: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        grad[p] += (soft[0] - 1.0) / (tau * m);
        for (j, &n) in negs.iter().enumerate() {
            grad[n] += soft[j + 1] / (tau * m);
        }
    }
    (total / m, grad)
}

/// Mean hinge `max(0, margin - (s_hi - s_lo))` over ordered pairs.
pub fn saliency_margin_loss(s: &[f64], pairs: &[(usize, usize)], margin: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; s.len()];
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let m = pairs.len() as f64;
    let mut total = 0.0;
    for &(hi, lo) in pairs {
        let h = margin - (s[hi] - s[lo]);
        if h > 0.0 {
            total += h;
            grad[hi] -= 1.0 / m;
            grad[lo] += 1.0 / m;
        }
    }
    (total / m, grad)
}

/// Up to `per_positive` distinct negatives drawn for every positive.
pub fn sample_negatives(
    positives: &[usize],
    negatives: &[usize],
    per_positive: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    positives
        .iter()
        .map(|_| {
            if negatives.len() <= per_positive {
                negatives.to_vec()
            } else {
                sample(rng, negatives.len(), per_positive)
                    .into_iter()
                    .map(|j| negatives[j])
                    .collect()
            }
        })
        .collect()
}

/// Up to `max_pairs` ordered `(hi, lo)` clip pairs with `gt[hi] > gt[lo]`.
pub fn sample_pairs(
    gt: &[f64],
    valid: &[bool],
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| valid[i]).collect();
    let mut all = Vec::new();
    for &a in &idx {
        for &b in &idx {
            if gt[a] > gt[b] {
                all.push((a, b));
            }
        }
    }
    if all.len() <= max_pairs {
        return all;
    }
    let mut chosen: Vec<usize> = sample(rng, all.len(), max_pairs).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|j| all[j]).collect()
}

/// Weighted sum of the five components.
pub fn overall_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.reg * c.reg + w.cls * c.cls + w.cas * c.cas + w.snce * c.snce + w.sal * c.sal
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reg: f64,
    pub cls: f64,
    pub cas: f64,
    pub snce: f64,
    pub sal: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub components: LossComponents,
}

/// Records every objective for one sample on the tape.
///
/// `rng` drives the contrastive and pair sampling; freezing its seed makes
/// the loss a deterministic function of the parameters.
pub fn model_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    targets: &MatchTargets,
    weights: &LossWeights,
    params: &LossParams,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    let joint = out.pyramid.joint_mask();
    let valid = joint.as_slice();
    let mut terms = Vec::with_capacity(5);
    let mut comps = LossComponents::default();

    let logits = tape.value(out.scores.logits).data().to_vec();
    let (v, g) = focal_loss(
        &logits,
        &targets.labels,
        valid,
        params.focal_alpha,
        params.focal_gamma,
    );
    comps.cls = v;
    terms.push((tape.scalar_fn(out.scores.logits, v, g)?, weights.cls));

    let offsets = if out.offsets.len() == 1 {
        out.offsets[0]
    } else {
        tape.concat_rows(&out.offsets)?
    };
    let pred: Vec<[f64; 2]> = tape
        .value(offsets)
        .data()
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let (v, g) = l1_loss(&pred, &targets.offsets);
    comps.reg = v;
    terms.push((tape.scalar_fn(offsets, v, g)?, weights.reg));

    let clip_mask = &out.fused.mask;
    let s_pred = tape.value(out.saliency).data().to_vec();
    match &targets.saliency {
        Some(s_gt) => {
            if weights.cas > 0.0 {
                let expanded = expand_saliency(s_gt, &targets.lengths);
                let (t, _) = min_max_values(&expanded, valid)?;
                let normed = tape.min_max_normalize(out.scores.confidence, &joint)?;
                let p = tape.value(normed).data().to_vec();
                let (v, g) = mse(&p, &t, valid);
                comps.cas = v;
                terms.push((tape.scalar_fn(normed, v, g)?, weights.cas));
            }
            let pairs = sample_pairs(s_gt, clip_mask.as_slice(), params.margin_pairs, rng);
            let (v, g) = saliency_margin_loss(&s_pred, &pairs, params.margin);
            comps.sal = v;
            terms.push((tape.scalar_fn(out.saliency, v, g)?, weights.sal));
        }
        None => {
            if weights.cas > 0.0 {
                warn!("no saliency targets; clip-aware score loss skipped");
            }
            let binary: Vec<f64> = (0..s_pred.len())
                .map(|i| f64::from(u8::from(targets.positive_clips.contains(&i))))
                .collect();
            let pairs = sample_pairs(&binary, clip_mask.as_slice(), params.margin_pairs, rng);
            let (v, g) = saliency_margin_loss(&s_pred, &pairs, params.margin);
            comps.sal = v;
            terms.push((tape.scalar_fn(out.saliency, v, g)?, weights.sal));
        }
    }

    if targets.positive_clips.is_empty() || targets.negative_clips.is_empty() {
        warn!("empty positive or negative clip set; contrastive loss is zero");
    } else {
        let negs = sample_negatives(
            &targets.positive_clips,
            &targets.negative_clips,
            params.nce_negatives,
            rng,
        );
        let (v, g) = sampled_nce_loss(
            &s_pred,
            &targets.positive_clips,
            &negs,
            params.nce_temperature,
        );
        comps.snce = v;
        terms.push((tape.scalar_fn(out.saliency, v, g)?, weights.snce));
    }

    let total = tape.weighted_sum(&terms)?;
    Ok(LossOutput {
        total,
        components: comps,
    })
}
