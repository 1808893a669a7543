//! Temporal feature pyramid and its anchor geometry.

use rand_chacha::ChaCha8Rng;

use crate::layers::Conv1d;
use crate::tensor::{kernels::conv_out_len, Mask, ParamStore, Result, Tape, TensorError, Var};

/// Length of every level for a video of `len` clips: `ceil(len / 2^k)`.
pub fn level_lengths(len: usize, levels: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = len;
    for k in 0..levels {
        if k > 0 {
            cur = conv_out_len(cur, 2);
        }
        out.push(cur);
    }
    out
}

/// Seconds between neighbouring anchors at 0-based `level`.
pub fn level_stride(level: usize, clip_len: f64) -> f64 {
    (1u64 << level) as f64 * clip_len
}

/// Anchor centre of position `i` at 0-based `level`, in seconds.
pub fn anchor_center(level: usize, i: usize, clip_len: f64) -> f64 {
    (i as f64 + 0.5) * level_stride(level, clip_len)
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub masks: Vec<Mask>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.masks.iter().map(Mask::len).collect()
    }

    pub fn total_positions(&self) -> usize {
        self.masks.iter().map(Mask::len).sum()
    }

    /// Masks of all levels joined level-major.
    pub fn joint_mask(&self) -> Mask {
        Mask::concat(&self.masks.iter().collect::<Vec<_>>())
    }
}

/// The `K-1` stride-2 convolutions that build levels `2..=K` from level 1.
#[derive(Debug, Clone)]
pub struct PyramidBuilder {
    pub convs: Vec<Conv1d>,
}

impl PyramidBuilder {
    pub fn new(
        store: &mut ParamStore,
        levels: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if levels < 1 {
            return Err(TensorError::InvalidArgument {
                op: "build_pyramid",
                detail: "K must be at least 1".into(),
            });
        }
        let convs = (1..levels)
            .map(|k| Conv1d::new(store, &format!("pyramid.down.{k}"), 3, d, d, 2, 0.0, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn levels(&self) -> usize {
        self.convs.len() + 1
    }

    /// Level 1 is `features` unchanged; each further level convolves the
    /// previous one (invalid rows zeroed first) with stride 2.
    pub fn build(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        features: Var,
        mask: &Mask,
    ) -> Result<FeaturePyramid> {
        let mut levels = vec![features];
        let mut masks = vec![mask.clone()];
        for conv in &self.convs {
            let prev = *levels.last().expect("level 1 present");
            let prev_mask = masks.last().expect("level 1 present");
            let x = tape.mask_rows(prev, prev_mask)?;
            let next = conv.forward(tape, vars, x)?;
            let next_mask = prev_mask.downsample2();
            levels.push(next);
            masks.push(next_mask);
        }
        Ok(FeaturePyramid { levels, masks })
    }
}

/// Turns nonnegative left/right offsets at 0-based `level` into spans.
///
/// Returns `(position, b_s, b_e)` for every row whose clamped span has
/// positive length.
pub fn decode_boundaries(
    offsets: &[[f64; 2]],
    level: usize,
    clip_len: f64,
    duration: f64,
) -> Vec<(usize, f64, f64)> {
    offsets
        .iter()
        .enumerate()
        .filter_map(|(i, off)| {
            let t = anchor_center(level, i, clip_len);
            let start = (t - off[0]).clamp(0.0, duration);
            let end = (t + off[1]).clamp(0.0, duration);
            (end > start).then_some((i, start, end))
        })
        .collect()
}
