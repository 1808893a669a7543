use super::kernels::{self, conv_out_len, gemm};
use super::{shape_err, Mask, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Lerp {
        a: Var,
        b: Var,
        w: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        width: usize,
        cols: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskRows {
        x: Var,
        mask: Vec<bool>,
    },
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    MinMaxNormalize {
        x: Var,
        mask: Vec<bool>,
        extrema: Option<(usize, usize)>,
    },
    Reshape(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    ScalarFn {
        x: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::AddBias { x, bias } => {
                f(*x);
                f(*bias);
            }
            Op::ScaleBy { x, s } => {
                f(*x);
                f(*s);
            }
            Op::Lerp { a, b, w } => {
                f(*a);
                f(*b);
                f(*w);
            }
            Op::Conv1d {
                x, kernel, bias, ..
            } => {
                f(*x);
                f(*kernel);
                if let Some(b) = bias {
                    f(*b);
                }
            }
            Op::LayerNorm { x, gain, shift, .. } => {
                f(*x);
                f(*gain);
                f(*shift);
            }
            Op::Scale { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::MaskedSoftmax { x }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::MaskRows { x, .. }
            | Op::MaskedMeanRows { x, .. }
            | Op::MinMaxNormalize { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::ScalarFn { x, .. } => f(*x),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().copied().for_each(f),
            Op::WeightedSum(terms) => terms.iter().for_each(|(v, _)| f(*v)),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is built fresh for every forward pass. Leaves created with
/// [`Tape::param`] receive gradients; [`Tape::constant`] leaves do not.
/// Every operation validates shapes and rejects non-finite results.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    broken_backward: bool,
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected 2-D, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose layer-norm gain gradient is deliberately wrong. Used to
    /// prove that the gradient checker catches a faulty backward pass.
    pub fn with_broken_backward() -> Self {
        Self {
            nodes: Vec::new(),
            broken_backward: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut needs_grad = false;
        op.for_each_parent(|p| needs_grad |= self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (br, bc) = require_2d("matmul", self.value(b))?;
        let (kb, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner dims {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_trans,
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b, b_trans })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).matrix_dims();
        if self.value(bias).len() != c {
            return Err(shape_err(
                "add_bias",
                format!("bias of {} for {c} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        self.push("scale", t, Op::Scale { x, factor })
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", "scale must hold one value"));
        }
        let f = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * f);
        self.push("scale_by", t, Op::ScaleBy { x, s })
    }

    /// `w·a + (1-w)·b` with `w` a one-element variable.
    pub fn lerp(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        check_same_shape("lerp", self.value(a), self.value(b))?;
        if self.value(w).len() != 1 {
            return Err(shape_err("lerp", "weight must hold one value"));
        }
        let wv = self.value(w).data()[0];
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| wv * x + (1.0 - wv) * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("lerp", t, Op::Lerp { a, b, w })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push("exp", t, Op::Exp(x))
    }

    /// Same-padded 1-D convolution over the rows of `x` (`len×d_in`) with a
    /// `width×d_in×d_out` kernel. Output length is `ceil(len/stride)`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (len, d_in) = require_2d("conv1d", self.value(x))?;
        let ks = self.value(kernel).shape();
        if ks.len() != 3 || ks[1] != d_in {
            return Err(shape_err(
                "conv1d",
                format!("kernel {ks:?} for input width {d_in}"),
            ));
        }
        let (width, d_out) = (ks[0], ks[2]);
        validate_conv_args(width, stride)?;
        if let Some(b) = bias {
            if self.value(b).len() != d_out {
                return Err(shape_err("conv1d", "bias length must equal d_out"));
            }
        }
        let cols = kernels::im2col(self.value(x).data(), len, d_in, width, stride);
        let out_len = conv_out_len(len, stride);
        let mut out = vec![0.0; out_len * d_out];
        gemm(
            out_len,
            width * d_in,
            d_out,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let t = Tensor::new(vec![out_len, d_out], out)?;
        self.push(
            "conv1d",
            t,
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
                width,
                cols,
            },
        )
    }

    /// Row-wise softmax over the last axis. `mask` either covers one row
    /// (applied to every row) or the full tensor.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims();
        let full = if mask.len() == c {
            None
        } else if mask.len() == r * c {
            Some(mask.as_slice())
        } else {
            return Err(shape_err(
                "masked_softmax",
                format!("mask of {} for {r}×{c}", mask.len()),
            ));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let valid = match full {
                Some(m) => &m[i * c..(i + 1) * c],
                None => mask.as_slice(),
            };
            if !kernels::softmax_row(vx.row(i), valid, &mut out[i * c..(i + 1) * c]) {
                return Err(TensorError::AllMasked {
                    op: "masked_softmax",
                });
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("masked_softmax", t, Op::MaskedSoftmax { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims();
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(shape_err("layer_norm", "gain/shift must match width"));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            inv_std[i] = kernels::normalize_row(vx.row(i), &mut xhat[i * c..(i + 1) * c]);
        }
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let out = xhat
            .chunks(c.max(1))
            .flat_map(|row| {
                row.iter()
                    .zip(g.iter().zip(s))
                    .map(|(h, (gg, ss))| h * gg + ss)
            })
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = require_2d("slice_cols", self.value(x))?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let vx = self.value(x);
        let data = (0..r)
            .flat_map(|i| vx.row(i)[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", t, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = require_2d("slice_rows", self.value(x))?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {r}")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        self.push("slice_rows", t, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => require_2d("concat_cols", self.value(p))?.0,
            None => return Err(shape_err("concat_cols", "no inputs")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => require_2d("concat_rows", self.value(p))?.1,
            None => return Err(shape_err("concat_rows", "no inputs")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = require_2d("concat_rows", self.value(p))?;
            if pc != c {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()))
    }

    /// Zeroes every row whose mask entry is invalid.
    pub fn mask_rows(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims();
        if mask.len() != r {
            return Err(shape_err(
                "mask_rows",
                format!("mask {} for {r} rows", mask.len()),
            ));
        }
        let mut t = self.value(x).clone();
        for (i, &ok) in mask.as_slice().iter().enumerate() {
            if !ok {
                t.data_mut()[i * c..(i + 1) * c].fill(0.0);
            }
        }
        self.push(
            "mask_rows",
            t,
            Op::MaskRows {
                x,
                mask: mask.as_slice().to_vec(),
            },
        )
    }

    /// Mean over valid rows, producing a `1×cols` tensor.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims();
        if mask.len() != r {
            return Err(shape_err("masked_mean_rows", "mask length must equal rows"));
        }
        let count = mask.count_valid();
        if count == 0 {
            return Err(TensorError::AllMasked {
                op: "masked_mean_rows",
            });
        }
        let vx = self.value(x);
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| mask.is_valid(i)) {
            out.iter_mut().zip(vx.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let t = Tensor::new(vec![1, c], out)?;
        self.push(
            "masked_mean_rows",
            t,
            Op::MaskedMeanRows {
                x,
                mask: mask.as_slice().to_vec(),
                count,
            },
        )
    }

    /// Min-max normalisation over all elements with a mask spanning them.
    pub fn min_max_normalize(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(shape_err(
                "min_max_normalize",
                "mask length must equal numel",
            ));
        }
        let (out, extrema) = super::ops::min_max_values(vx.data(), mask.as_slice())?;
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "min_max_normalize",
            t,
            Op::MinMaxNormalize {
                x,
                mask: mask.as_slice().to_vec(),
                extrema,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ wᵢ·xᵢ` over one-element variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err("weighted_sum", "terms must be scalars"));
            }
            total += w * self.value(v).data()[0];
        }
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
        )
    }

    /// Records a scalar function of `x` whose value and gradient were
    /// computed outside the tape.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(shape_err("scalar_fn", "gradient length must equal numel"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "scalar_fn" });
        }
        self.push("scalar_fn", Tensor::scalar(value), Op::ScalarFn { x, grad })
    }

    /// Reverse sweep from a one-element `loss`. Gradients are retained for
    /// parameter leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must hold one value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Tensor::new(n.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_trans } => {
                let (m, k) = val(a).matrix_dims();
                let n = node.value.cols();
                if let Some(da) = acc(grads, nodes, a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, val(b).data(), !b_trans, da, 1.0);
                }
                if let Some(db) = acc(grads, nodes, b) {
                    if b_trans {
                        gemm(n, m, k, g, true, val(a).data(), false, db, 1.0);
                    } else {
                        gemm(k, m, n, val(a).data(), true, g, false, db, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(d) = acc(grads, nodes, p) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = acc(grads, nodes, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(val(b).data()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = acc(grads, nodes, b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(val(a).data()) {
                        *d += g * x;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = acc(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc(grads, nodes, bias) {
                    let c = db.len();
                    for row in g.chunks(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = acc(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
                }
            }
            &Op::ScaleBy { x, s } => {
                let f = val(s).data()[0];
                if let Some(dx) = acc(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
                }
                if let Some(ds) = acc(grads, nodes, s) {
                    ds[0] += g.iter().zip(val(x).data()).map(|(g, x)| g * x).sum::<f64>();
                }
            }
            &Op::Lerp { a, b, w } => {
                let wv = val(w).data()[0];
                if let Some(da) = acc(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g * wv);
                }
                if let Some(db) = acc(grads, nodes, b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d += g * (1.0 - wv));
                }
                if let Some(dw) = acc(grads, nodes, w) {
                    dw[0] += g
                        .iter()
                        .zip(val(a).data().iter().zip(val(b).data()))
                        .map(|(g, (x, y))| g * (x - y))
                        .sum::<f64>();
                }
            }
            &Op::Relu(x) => {
                if let Some(dx) = acc(grads, nodes, x) {
                    for ((d, g), xv) in dx.iter_mut().zip(g).zip(val(x).data()) {
                        if *xv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(dx) = acc(grads, nodes, x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            &Op::Exp(x) => {
                if let Some(dx) = acc(grads, nodes, x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += g * y;
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
                width,
                cols,
            } => {
                let (len, d_in) = val(*x).matrix_dims();
                let d_out = node.value.cols();
                let out_len = node.value.rows();
                let patch = width * d_in;
                if let Some(dk) = acc(grads, nodes, *kernel) {
                    gemm(patch, out_len, d_out, cols, true, g, false, dk, 1.0);
                }
                if let Some(b) = bias {
                    if let Some(db) = acc(grads, nodes, *b) {
                        for row in g.chunks(d_out) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                if let Some(dx) = acc(grads, nodes, *x) {
                    let mut dcols = vec![0.0; out_len * patch];
                    gemm(
                        out_len,
                        d_out,
                        patch,
                        g,
                        false,
                        val(*kernel).data(),
                        true,
                        &mut dcols,
                        0.0,
                    );
                    kernels::col2im_add(&dcols, dx, len, d_in, *width, *stride);
                }
            }
            &Op::MaskedSoftmax { x } => {
                if let Some(dx) = acc(grads, nodes, x) {
                    let c = node.value.cols();
                    for ((dxr, gr), yr) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(node.value.data().chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = val(*gain).data();
                if let Some(dg) = acc(grads, nodes, *gain) {
                    let factor = if self.broken_backward { 2.0 } else { 1.0 };
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, g), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += factor * g * h;
                        }
                    }
                }
                if let Some(ds) = acc(grads, nodes, *shift) {
                    for gr in g.chunks(c) {
                        ds.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = acc(grads, nodes, *x) {
                    let cf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for ((dh, g), gg) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *dh = g * gg;
                        }
                        let mean_dh = dxhat.iter().sum::<f64>() / cf;
                        let mean_dh_h = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cf;
                        let row = &mut dx[i * c..(i + 1) * c];
                        for ((d, dh), h) in row.iter_mut().zip(&dxhat).zip(hr) {
                            *d += inv_std[i] * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(dx) = acc(grads, nodes, x) {
                    let c = val(x).cols();
                    let w = node.value.cols();
                    for (i, gr) in g.chunks(w.max(1)).enumerate() {
                        let dst = &mut dx[i * c + start..i * c + start + w];
                        dst.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(dx) = acc(grads, nodes, x) {
                    let c = val(x).cols();
                    let dst = &mut dx[start * c..start * c + g.len()];
                    dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(dp) = acc(grads, nodes, p) {
                        for (i, dr) in dp.chunks_mut(w.max(1)).enumerate() {
                            let src = &g[i * total + offset..i * total + offset + w];
                            dr.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if let Some(dp) = acc(grads, nodes, p) {
                        let src = &g[offset..offset + n];
                        dp.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::MaskRows { x, mask } => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    let c = node.value.cols();
                    for (i, &ok) in mask.iter().enumerate() {
                        if ok {
                            let dst = &mut dx[i * c..(i + 1) * c];
                            dst.iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::MaskedMeanRows { x, mask, count } => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    let c = g.len();
                    let inv = 1.0 / *count as f64;
                    for (i, &ok) in mask.iter().enumerate() {
                        if ok {
                            for (d, g) in dx[i * c..(i + 1) * c].iter_mut().zip(g) {
                                *d += g * inv;
                            }
                        }
                    }
                }
            }
            Op::MinMaxNormalize { x, mask, extrema } => {
                let Some((lo, hi)) = *extrema else { return };
                let xv = val(*x).data();
                let (min, max) = (xv[lo], xv[hi]);
                let range = max - min;
                if range <= 0.0 {
                    return;
                }
                if let Some(dx) = acc(grads, nodes, *x) {
                    let mut dmin = 0.0;
                    let mut dmax = 0.0;
                    for (i, &ok) in mask.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        dx[i] += g[i] / range;
                        dmin += g[i] * (xv[i] - max) / (range * range);
                        dmax -= g[i] * (xv[i] - min) / (range * range);
                    }
                    dx[lo] += dmin;
                    dx[hi] += dmax;
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = acc(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = acc(grads, nodes, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(dv) = acc(grads, nodes, v) {
                        dv[0] += g[0] * w;
                    }
                }
            }
            Op::ScalarFn { x, grad } => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().zip(grad).for_each(|(d, gr)| *d += g[0] * gr);
                }
            }
        }
    }
}

/// Lazily allocated gradient buffer for `v`, or `None` when `v` does not
/// participate in differentiation.
fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

pub(crate) fn validate_conv_args(width: usize, stride: usize) -> Result<()> {
    if stride < 1 {
        return Err(TensorError::InvalidArgument {
            op: "conv1d",
            detail: "stride must be at least 1".into(),
        });
    }
    if width.is_multiple_of(2) {
        return Err(TensorError::InvalidArgument {
            op: "conv1d",
            detail: format!("same padding needs an odd kernel width, got {width}"),
        });
    }
    Ok(())
}

/// Parameter-leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` if `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
