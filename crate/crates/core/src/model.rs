//! Full network: fusion, pyramid and heads assembled over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, QueryTokens};
use crate::fusion::{AcaOptions, FusedFeatures, Fusion, FusionConfig};
use crate::heads::{HdHead, MixWeight, MomentHead, ScoreOutput, ScoreRefinement};
use crate::pyramid::{FeaturePyramid, PyramidBuilder};
use crate::tensor::{ParamStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_video: usize,
    pub d_query: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_dummies: usize,
    pub encoder_layers: usize,
    pub ffn_mult: usize,
    /// Pyramid depth `K`.
    pub levels: usize,
    pub clip_len: f64,
    pub aca_residual: bool,
    pub pos_enc: bool,
    /// Adaptive score refinement; when off, confidences come from a
    /// width-1 per-level head alone.
    pub asr_enabled: bool,
    pub score_kernel: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_video: 32,
            d_query: 32,
            d_model: 256,
            heads: 8,
            n_dummies: 10,
            encoder_layers: 3,
            ffn_mult: 2,
            levels: 4,
            clip_len: 2.0,
            aca_residual: true,
            pos_enc: true,
            asr_enabled: true,
            score_kernel: 5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            d_video: self.d_video,
            d_query: self.d_query,
            d_model: self.d_model,
            heads: self.heads,
            n_dummies: self.n_dummies,
            encoder_layers: self.encoder_layers,
            ffn_mult: self.ffn_mult,
            aca_residual: self.aca_residual,
            pos_enc: self.pos_enc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        let bad = |detail: &str| {
            Err(TensorError::InvalidArgument {
                op: "ModelConfig",
                detail: detail.into(),
            })
        };
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if self.levels > 16 {
            return bad("levels must be at most 16");
        }
        if !(self.clip_len > 0.0 && self.clip_len.is_finite()) {
            return bad("clip_len must be positive");
        }
        if self.score_kernel.is_multiple_of(2) {
            return bad("score_kernel must be odd");
        }
        if self.d_video == 0 || self.d_query == 0 {
            return bad("input widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub aca: AcaOptions,
    pub mix: MixWeight,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub fused: FusedFeatures,
    pub pyramid: FeaturePyramid,
    /// Per level, `L_k×2` nonnegative left/right offsets in seconds.
    pub offsets: Vec<Var>,
    pub scores: ScoreOutput,
    /// `L_v×1` clip saliency.
    pub saliency: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub fusion: Fusion,
    pub pyramid: PyramidBuilder,
    pub moment: MomentHead,
    pub scores: ScoreRefinement,
    pub hd: HdHead,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let fusion = Fusion::new(&mut params, config.fusion(), &mut rng)?;
        let pyramid = PyramidBuilder::new(&mut params, config.levels, d, &mut rng)?;
        let moment = MomentHead::new(&mut params, d, config.levels, config.clip_len, &mut rng)?;
        let scores = ScoreRefinement::new(
            &mut params,
            d,
            config.score_kernel,
            config.asr_enabled,
            &mut rng,
        )?;
        let hd = HdHead::new(&mut params, d, &mut rng)?;
        Ok(Self {
            config,
            params,
            fusion,
            pyramid,
            moment,
            scores,
            hd,
        })
    }

    /// Records a forward pass on `tape`. `vars` are the parameter variables
    /// from [`ParamStore::register`], in store order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        video: &FeatureSequence,
        query: &QueryTokens,
        opts: ForwardOptions,
    ) -> Result<ModelOutput> {
        if video.is_empty() || !video.mask.any_valid() {
            return Err(TensorError::AllMasked { op: "forward" });
        }
        let fused = self.fusion.forward(tape, vars, video, query, opts.aca)?;
        let pyramid = self
            .pyramid
            .build(tape, vars, fused.features, &fused.mask)?;
        let mut offsets = Vec::with_capacity(pyramid.len());
        for (k, (&f, m)) in pyramid.levels.iter().zip(&pyramid.masks).enumerate() {
            let scale = self.moment.scale(tape, vars, k)?;
            offsets.push(self.moment.forward(tape, vars, f, m, scale)?);
        }
        let scores = self.scores.forward(tape, vars, &pyramid, opts.mix)?;
        let saliency = self.hd.forward(tape, vars, fused.features, &fused.mask)?;
        Ok(ModelOutput {
            fused,
            pyramid,
            offsets,
            scores,
            saliency,
        })
    }

    /// Forward pass on a fresh tape with frozen parameters.
    pub fn infer(
        &self,
        video: &FeatureSequence,
        query: &QueryTokens,
    ) -> Result<(Tape, ModelOutput)> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape)?;
        let out = self.forward(&mut tape, &vars, video, query, ForwardOptions::default())?;
        Ok((tape, out))
    }
}
