//! Projection of both modalities to a shared width, adaptive cross attention
//! with learnable dummy tokens, and the transformer encoder over clips.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, QueryTokens};
use crate::layers::{self, EncoderBlock, LayerNorm, Linear};
use crate::tensor::{Mask, ParamId, ParamStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d_video: usize,
    pub d_query: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Number of dummy tokens `L_d`; zero gives plain cross attention.
    pub n_dummies: usize,
    pub encoder_layers: usize,
    pub ffn_mult: usize,
    /// Residual connection from the projected clips plus layer norm around
    /// the cross-attention output.
    pub aca_residual: bool,
    /// Add a sinusoidal position signal before the encoder.
    pub pos_enc: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::InvalidArgument {
            op: "FusionConfig",
            detail,
        };
        if self.d_model == 0 || self.heads == 0 {
            return Err(bad("d_model and heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(bad("ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Linear, ReLU, Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), d_in, d_out, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), d_out, d_out, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.first.forward(tape, vars, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, vars, h)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AcaOptions {
    /// Test hook: drive every dummy key to weight zero.
    pub mask_dummies: bool,
}

#[derive(Debug, Clone)]
pub struct AcaOutput {
    /// Concatenated per-head attention outputs, before the merge projection.
    pub attended: Var,
    /// Output after the merge projection (and the residual block when enabled).
    pub fused: Var,
    /// Softmax weights of every head over the `L_q + L_d` keys.
    pub weights: Vec<Var>,
    /// Per clip, head-averaged weight landing on real query tokens.
    pub attention_mass: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub features: Var,
    pub mask: Mask,
    pub attention_mass: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub config: FusionConfig,
    pub video_mlp: Mlp,
    pub text_mlp: Mlp,
    pub dummies: Option<ParamId>,
    pub dummy_encoder: Option<EncoderBlock>,
    pub p_q: Linear,
    pub p_k: Linear,
    pub p_v: Linear,
    pub merge: Linear,
    pub aca_norm: Option<LayerNorm>,
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: Option<LayerNorm>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, config: FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let video_mlp = Mlp::new(store, "fusion.video_mlp", config.d_video, d, rng)?;
        let text_mlp = Mlp::new(store, "fusion.text_mlp", config.d_query, d, rng)?;
        let (dummies, dummy_encoder) = if config.n_dummies > 0 {
            let tokens = layers::init_uniform(rng, &[config.n_dummies, d], 1.0);
            let id = store.add("fusion.dummies", tokens)?;
            let enc = EncoderBlock::new(
                store,
                "fusion.dummy_encoder",
                d,
                config.heads,
                d * config.ffn_mult,
                rng,
            )?;
            (Some(id), Some(enc))
        } else {
            (None, None)
        };
        let p_q = Linear::new(store, "fusion.aca.p_q", d, d, false, rng)?;
        let p_k = Linear::new(store, "fusion.aca.p_k", d, d, false, rng)?;
        let p_v = Linear::new(store, "fusion.aca.p_v", d, d, false, rng)?;
        let merge = Linear::new(store, "fusion.aca.merge", d, d, true, rng)?;
        let aca_norm = if config.aca_residual {
            Some(LayerNorm::new(store, "fusion.aca.norm", d)?)
        } else {
            None
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("fusion.encoder.{i}"),
                    d,
                    config.heads,
                    d * config.ffn_mult,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = if config.encoder_layers > 0 {
            Some(LayerNorm::new(store, "fusion.encoder.norm", d)?)
        } else {
            None
        };
        Ok(Self {
            config,
            video_mlp,
            text_mlp,
            dummies,
            dummy_encoder,
            p_q,
            p_k,
            p_v,
            merge,
            aca_norm,
            encoder,
            encoder_norm,
        })
    }

    /// Maps clips to `V'` (`L_v×d`) and words to `Q'` (`L_q×d`).
    pub fn project_inputs(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        video: &FeatureSequence,
        query: &QueryTokens,
    ) -> Result<(Var, Var)> {
        if query.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "project_inputs",
                detail: "zero-length query".into(),
            });
        }
        let v = tape.constant(video.features.clone())?;
        let q = tape.constant(query.tokens.clone())?;
        let v = self.video_mlp.forward(tape, vars, v)?;
        let q = self.text_mlp.forward(tape, vars, q)?;
        Ok((v, q))
    }

    /// Dummy tokens after their self-attention block, or `None` when `L_d = 0`.
    pub fn encoded_dummies(&self, tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
        match (self.dummies, &self.dummy_encoder) {
            (Some(id), Some(enc)) => {
                let mask = Mask::all_valid(self.config.n_dummies);
                Ok(Some(enc.forward(tape, vars, vars[id.index()], &mask)?))
            }
            _ => Ok(None),
        }
    }

    pub fn adaptive_cross_attention(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        v: Var,
        q: Var,
        query_mask: &Mask,
        opts: AcaOptions,
    ) -> Result<AcaOutput> {
        let l_q = tape.value(q).rows();
        if l_q == 0 {
            return Err(TensorError::InvalidArgument {
                op: "adaptive_cross_attention",
                detail: "zero-length query".into(),
            });
        }
        if query_mask.len() != l_q {
            return Err(TensorError::ShapeMismatch {
                op: "adaptive_cross_attention",
                detail: format!("query mask {} for {l_q} tokens", query_mask.len()),
            });
        }
        if !query_mask.any_valid() {
            return Err(TensorError::AllMasked {
                op: "adaptive_cross_attention",
            });
        }
        let dummies = self.encoded_dummies(tape, vars)?;
        let (key_src, key_mask) = match dummies {
            Some(dt) => {
                let dummy_mask = Mask::new(vec![!opts.mask_dummies; self.config.n_dummies]);
                (
                    tape.concat_rows(&[q, dt])?,
                    Mask::concat(&[query_mask, &dummy_mask]),
                )
            }
            None => (q, query_mask.clone()),
        };
        let queries = self.p_q.forward(tape, vars, v)?;
        let keys = self.p_k.forward(tape, vars, key_src)?;
        let values = self.p_v.forward(tape, vars, q)?;
        let (attended, weights) = layers::multi_head_attention(
            tape,
            queries,
            keys,
            values,
            &key_mask,
            self.config.heads,
            l_q,
        )?;
        let attention_mass = attention_mass(tape, &weights, l_q);
        let merged = self.merge.forward(tape, vars, attended)?;
        let fused = match &self.aca_norm {
            Some(norm) => {
                let r = tape.add(v, merged)?;
                norm.forward(tape, vars, r)?
            }
            None => merged,
        };
        Ok(AcaOutput {
            attended,
            fused,
            weights,
            attention_mass,
        })
    }

    /// Transformer encoder over clips. Invalid clips never act as keys.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var, mask: &Mask) -> Result<Var> {
        if self.encoder.is_empty() {
            return Ok(x);
        }
        let (len, d) = tape.value(x).matrix_dims();
        let mut h = if self.config.pos_enc {
            let pe = tape.constant(layers::sinusoidal_positions(len, d))?;
            tape.add(x, pe)?
        } else {
            x
        };
        for block in &self.encoder {
            h = block.forward(tape, vars, h, mask)?;
        }
        match &self.encoder_norm {
            Some(norm) => norm.forward(tape, vars, h),
            None => Ok(h),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        video: &FeatureSequence,
        query: &QueryTokens,
        opts: AcaOptions,
    ) -> Result<FusedFeatures> {
        let (v, q) = self.project_inputs(tape, vars, video, query)?;
        let aca = self.adaptive_cross_attention(tape, vars, v, q, &query.mask, opts)?;
        let features = self.encode(tape, vars, aca.fused, &video.mask)?;
        Ok(FusedFeatures {
            features,
            mask: video.mask.clone(),
            attention_mass: aca.attention_mass,
        })
    }
}

fn attention_mass(tape: &Tape, weights: &[Var], l_q: usize) -> Vec<f64> {
    let rows = tape.value(weights[0]).rows();
    let mut mass = vec![0.0; rows];
    for &w in weights {
        let w = tape.value(w);
        for (i, m) in mass.iter_mut().enumerate() {
            *m += w.row(i)[..l_q].iter().sum::<f64>();
        }
    }
    let heads = weights.len() as f64;
    mass.iter_mut().for_each(|m| *m /= heads);
    mass
}
