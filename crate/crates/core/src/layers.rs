//! Parameterised building blocks shared by the fusion module and the heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Mask, ParamId, ParamStore, Result, Tape, Tensor, Var};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// `y = x·W (+ b)` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier(rng, &[d_in, d_out], d_in, d_out),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight.index()])?;
        match self.bias {
            Some(b) => tape.add_bias(y, vars[b.index()]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain.index()], vars[self.shift.index()])
    }
}

/// Same-padded 1-D convolution with a `width×d_in×d_out` kernel.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        d_in: usize,
        d_out: usize,
        stride: usize,
        bias_init: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.kernel"),
            xavier(rng, &[width, d_in, d_out], width * d_in, width * d_out),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[d_out], bias_init))?;
        Ok(Self {
            kernel,
            bias,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv1d(
            x,
            vars[self.kernel.index()],
            Some(vars[self.bias.index()]),
            self.stride,
        )
    }
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// Returns the concatenated per-head outputs (before any output projection)
/// and the softmax weights of each head as tape variables.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    key_mask: &Mask,
    heads: usize,
    value_keys: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(queries).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(queries, h * dh, dh)?;
        let k = tape.slice_cols(keys, h * dh, dh)?;
        let v = tape.slice_cols(values, h * dh, dh)?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, scale)?;
        let w = tape.masked_softmax(logits, key_mask)?;
        // Only the first `value_keys` keys carry values; the rest only absorb mass.
        let wv = if value_keys == tape.value(w).cols() {
            w
        } else {
            tape.slice_cols(w, 0, value_keys)?
        };
        outs.push(tape.matmul(wv, v)?);
        weights.push(w);
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, weights))
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mask: &Mask) -> Result<Var> {
        let q = self.q.forward(tape, vars, x)?;
        let k = self.k.forward(tape, vars, x)?;
        let v = self.v.forward(tape, vars, x)?;
        let n = tape.value(x).rows();
        let (h, _) = multi_head_attention(tape, q, k, v, mask, self.heads, n)?;
        self.out.forward(tape, vars, h)
    }
}

/// Pre-norm transformer block: self-attention then a ReLU feed-forward,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, d_ff, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), d_ff, d, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mask: &Mask) -> Result<Var> {
        let h = self.norm_attn.forward(tape, vars, x)?;
        let h = self.attn.forward(tape, vars, h, mask)?;
        let x = tape.add(x, h)?;
        let h = self.norm_ff.forward(tape, vars, x)?;
        let h = self.ff_in.forward(tape, vars, h)?;
        let h = tape.relu(h)?;
        let h = self.ff_out.forward(tape, vars, h)?;
        tape.add(x, h)
    }
}

pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("sized above")
}

pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    uniform(rng, shape, bound)
}
