use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Annotation, DataError, Dataset, Sample};
use crate::seeds::derived_rng;
use crate::tensor::Tensor;

/// Windows shorter than this many seconds count as short moments.
pub const SHORT_MOMENT_SECS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Training videos (one query each).
    pub n_videos: usize,
    /// Held-out videos.
    pub n_val: usize,
    pub min_clips: usize,
    pub max_clips: usize,
    pub clip_len: f64,
    pub d_video: usize,
    pub d_query: usize,
    /// Width of the hidden semantic vector shared by a query and its moment.
    pub latent_dim: usize,
    pub min_query_len: usize,
    pub max_query_len: usize,
    /// Fraction of windows shorter than 10 s.
    pub short_fraction: f64,
    pub signal_strength: f64,
    pub noise_std: f64,
    /// Segments carrying an unrelated semantic vector, per video.
    pub n_distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_val: 50,
            min_clips: 16,
            max_clips: 48,
            clip_len: 2.0,
            d_video: 32,
            d_query: 32,
            latent_dim: 16,
            min_query_len: 4,
            max_query_len: 8,
            short_fraction: 0.5,
            signal_strength: 3.0,
            noise_std: 1.0,
            n_distractors: 0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad("signal_strength must be non-negative");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative");
        }
        if self.min_clips < 1 || self.max_clips < self.min_clips {
            return bad("clip range must satisfy 1 <= min_clips <= max_clips");
        }
        if !(self.clip_len > 0.0) {
            return bad("clip_len must be positive");
        }
        if self.d_video == 0 || self.d_query == 0 || self.latent_dim == 0 {
            return bad("feature widths must be positive");
        }
        if self.min_query_len < 1 || self.max_query_len < self.min_query_len {
            return bad("query length range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.short_fraction) {
            return bad("short_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Random `rows×cols` projection.
fn projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| normal(rng)).collect()
}

/// `P·u` rescaled so that its RMS entry is 1.
fn embed(p: &[f64], u: &[f64], rows: usize) -> Vec<f64> {
    let cols = u.len();
    let mut out: Vec<f64> = (0..rows)
        .map(|r| (0..cols).map(|c| p[r * cols + c] * u[c]).sum())
        .collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let scale = (rows as f64).sqrt() / norm;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Samples `(start_clip, len_clips)` for one moment.
fn sample_window(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, n_clips: usize) -> (usize, usize) {
    let max_short = (((SHORT_MOMENT_SECS - 1e-9) / cfg.clip_len).floor() as usize).max(1);
    let min_long = (SHORT_MOMENT_SECS / cfg.clip_len).ceil() as usize;
    let max_long = ((0.8 * n_clips as f64).floor() as usize).max(min_long);
    let long_possible = min_long <= n_clips;
    let short = !long_possible || rng.random_bool(cfg.short_fraction);
    let len = if short {
        rng.random_range(1..=max_short.min(n_clips))
    } else {
        rng.random_range(min_long..=max_long.min(n_clips))
    };
    let start = rng.random_range(0..=n_clips - len);
    (start, len)
}

fn generate_sample(
    cfg: &SyntheticConfig,
    video_proj: &[f64],
    query_proj: &[f64],
    split: &str,
    index: usize,
) -> Sample {
    let stream = if split == "train" { 1 } else { 2 };
    let mut rng = derived_rng(cfg.seed, stream, index as u64);
    let n_clips = rng.random_range(cfg.min_clips..=cfg.max_clips);
    let duration = n_clips as f64 * cfg.clip_len;

    // Windows are clip aligned and always inside the video by construction.
    let (start, len) = sample_window(&mut rng, cfg, n_clips);
    let u = unit_vector(&mut rng, cfg.latent_dim);
    let signal = embed(video_proj, &u, cfg.d_video);

    let mut per_clip_signal = vec![0.0; n_clips];
    for s in per_clip_signal.iter_mut().skip(start).take(len) {
        *s = rng.random_range(0.5..=1.0);
    }

    // Distractors occupy free clips with an unrelated semantic vector.
    let mut distractor = vec![None; n_clips];
    for _ in 0..cfg.n_distractors {
        let (ds, dl) = sample_window(&mut rng, cfg, n_clips);
        if (ds..ds + dl).any(|c| per_clip_signal[c] > 0.0 || distractor[c].is_some()) {
            continue;
        }
        let w = embed(
            video_proj,
            &unit_vector(&mut rng, cfg.latent_dim),
            cfg.d_video,
        );
        for d in distractor.iter_mut().skip(ds).take(dl) {
            *d = Some(w.clone());
        }
    }

    let mut video = Vec::with_capacity(n_clips * cfg.d_video);
    for c in 0..n_clips {
        let a = per_clip_signal[c];
        for k in 0..cfg.d_video {
            let mut v = cfg.noise_std * normal(&mut rng) + cfg.signal_strength * a * signal[k];
            if let Some(w) = &distractor[c] {
                v += cfg.signal_strength * 0.75 * w[k];
            }
            video.push(round_f32(v));
        }
    }

    let q_len = rng.random_range(cfg.min_query_len..=cfg.max_query_len);
    let q_signal = embed(query_proj, &u, cfg.d_query);
    let query: Vec<f64> = (0..q_len)
        .flat_map(|_| {
            q_signal
                .iter()
                .map(|&s| round_f32(s + cfg.noise_std * normal(&mut rng)))
                .collect::<Vec<_>>()
        })
        .collect();

    let qid = format!("{split}-q{index:05}");
    let annotation = Annotation {
        vid: format!("{split}-v{index:05}"),
        query_text: format!("synthetic query {index}"),
        duration,
        clip_len: cfg.clip_len,
        relevant_windows: vec![[
            start as f64 * cfg.clip_len,
            (start + len) as f64 * cfg.clip_len,
        ]],
        saliency: Some(per_clip_signal.iter().map(|&a| round_f32(a)).collect()),
        relevant_clip_ids: (start..start + len).collect(),
        qid,
    };
    Sample {
        annotation,
        video: Tensor::new(vec![n_clips, cfg.d_video], video).expect("sized above"),
        query: Tensor::new(vec![q_len, cfg.d_query], query).expect("sized above"),
    }
}

/// Generates a dataset whose relevant clips carry a query-matched signal.
///
/// Every video draws from its own seed derived from `(seed, split, index)`,
/// so output does not depend on generation order or thread count.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = derived_rng(cfg.seed, 0, 0);
    let video_proj = projection(&mut rng, cfg.d_video, cfg.latent_dim);
    let query_proj = projection(&mut rng, cfg.d_query, cfg.latent_dim);
    let make = |split: &str, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| generate_sample(cfg, &video_proj, &query_proj, split, i))
            .collect()
    };
    Ok(Dataset {
        train: make("train", cfg.n_videos),
        val: make("val", cfg.n_val),
    })
}
