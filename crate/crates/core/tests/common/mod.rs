#![allow(dead_code)]

pub mod metric_oracles;

use flashvtg_core::data::{Annotation, Sample};
use flashvtg_core::tensor::ParamStore;
use flashvtg_core::{Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// The gradient-gate sized model: d=8, H=2, K=3, L_d=2.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_video: 5,
        d_query: 4,
        d_model: 8,
        heads: 2,
        n_dummies: 2,
        encoder_layers: 1,
        ffn_mult: 2,
        levels: 3,
        clip_len: 2.0,
        score_kernel: 3,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_model_config(seed)).unwrap()
}

/// One random sample with a single window `[start, end)` in clips.
pub fn random_sample(
    rng: &mut ChaCha8Rng,
    clips: usize,
    query_len: usize,
    d_video: usize,
    d_query: usize,
    window: (usize, usize),
) -> Sample {
    let clip_len = 2.0;
    let (s, e) = window;
    let saliency = (0..clips)
        .map(|c| {
            if (s..e).contains(&c) {
                rng.random_range(0.5..1.0)
            } else {
                0.0
            }
        })
        .collect();
    Sample {
        annotation: Annotation {
            qid: format!("q{}", rng.random::<u32>()),
            vid: "v".into(),
            query_text: "q".into(),
            duration: clips as f64 * clip_len,
            clip_len,
            relevant_windows: vec![[s as f64 * clip_len, e as f64 * clip_len]],
            relevant_clip_ids: (s..e).collect(),
            saliency: Some(saliency),
        },
        video: random_tensor(rng, &[clips, d_video]),
        query: random_tensor(rng, &[query_len, d_query]),
    }
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("no param {name}")))
}

pub struct OracleInputs {
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub dummies: Vec<Vec<f64>>,
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn project(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            (0..w.cols())
                .map(|o| r.iter().enumerate().map(|(i, v)| v * w.at(i, o)).sum())
                .collect()
        })
        .collect()
}

/// Direct per-head loop evaluation of the attention with dummy keys:
/// keys over `[Q'; D̃]`, values over `Q'` alone, softmax over all keys.
pub fn aca_oracle(
    inp: &OracleInputs,
    store: &ParamStore,
    heads: usize,
    use_dummies: bool,
    q_valid: &[bool],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let wq = param(store, "fusion.aca.p_q.weight");
    let wk = param(store, "fusion.aca.p_k.weight");
    let wv = param(store, "fusion.aca.p_v.weight");
    let qs = project(&inp.v, wq);
    let mut key_src = inp.q.clone();
    if use_dummies {
        key_src.extend(inp.dummies.iter().cloned());
    }
    let ks = project(&key_src, wk);
    let vs = project(&inp.q, wv);
    let d = wq.cols();
    let dh = d / heads;
    let lq = inp.q.len();
    let mut out = vec![vec![0.0; d]; qs.len()];
    let mut mass = vec![0.0; qs.len()];
    for (i, qi) in qs.iter().enumerate() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut logits = Vec::new();
            for (j, kj) in ks.iter().enumerate() {
                if j < lq && !q_valid[j] {
                    continue;
                }
                let dot: f64 = cols.clone().map(|c| qi[c] * kj[c]).sum();
                logits.push((j, dot / (dh as f64).sqrt()));
            }
            let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l.1 - max).exp()).sum();
            for &(j, l) in &logits {
                let w = (l - max).exp() / denom;
                if j < lq {
                    mass[i] += w / heads as f64;
                    for c in cols.clone() {
                        out[i][c] += w * vs[j][c];
                    }
                }
            }
        }
    }
    (out, mass)
}
