//! Value-level versions of the tape operations, for callers that need a
//! result without recording a graph.

use super::kernels::{self, conv_out_len, gemm};
use super::tape::validate_conv_args;
use super::{shape_err, Mask, Result, Tensor, TensorError};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(shape_err("matmul", "operands must be 2-D"));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(shape_err("matmul", format!("inner dims {k} vs {kb}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Same-padded strided convolution of `input` (`len×d_in`) with a
/// `width×d_in×d_out` kernel.
pub fn conv1d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    if input.shape().len() != 2 {
        return Err(shape_err("conv1d", "input must be 2-D"));
    }
    let (len, d_in) = (input.shape()[0], input.shape()[1]);
    let ks = kernel.shape();
    if ks.len() != 3 || ks[1] != d_in {
        return Err(shape_err(
            "conv1d",
            format!("kernel {ks:?} for width {d_in}"),
        ));
    }
    let (width, d_out) = (ks[0], ks[2]);
    validate_conv_args(width, stride)?;
    let cols = kernels::im2col(input.data(), len, d_in, width, stride);
    let out_len = conv_out_len(len, stride);
    let mut out = vec![0.0; out_len * d_out];
    gemm(
        out_len,
        width * d_in,
        d_out,
        &cols,
        false,
        kernel.data(),
        false,
        &mut out,
        0.0,
    );
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(shape_err("conv1d", "bias length must equal d_out"));
        }
        for row in out.chunks_mut(d_out) {
            row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
        }
    }
    Tensor::new(vec![out_len, d_out], out)
}

/// Softmax over the valid entries of a vector; invalid entries are zero.
pub fn masked_softmax(logits: &Tensor, mask: &Mask) -> Result<Tensor> {
    if mask.len() != logits.len() {
        return Err(shape_err("masked_softmax", "mask length must equal numel"));
    }
    let mut out = vec![0.0; logits.len()];
    if !kernels::softmax_row(logits.data(), mask.as_slice(), &mut out) {
        return Err(TensorError::AllMasked {
            op: "masked_softmax",
        });
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (r, c) = x.matrix_dims();
    if gain.len() != c || shift.len() != c {
        return Err(shape_err("layer_norm", "gain/shift must match width"));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        kernels::normalize_row(x.row(i), row);
        for ((o, g), s) in row.iter_mut().zip(gain.data()).zip(shift.data()) {
            *o = *o * g + s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

/// Maps valid entries to `(x-min)/(max-min)`. A constant valid set maps to
/// all zeros; invalid entries are zero.
pub fn min_max_normalize(v: &Tensor, mask: &Mask) -> Result<Tensor> {
    if mask.len() != v.len() {
        return Err(shape_err(
            "min_max_normalize",
            "mask length must equal numel",
        ));
    }
    let (out, _) = min_max_values(v.data(), mask.as_slice())?;
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn min_max_values(
    x: &[f64],
    valid: &[bool],
) -> Result<(Vec<f64>, Option<(usize, usize)>)> {
    let (lo, hi) = kernels::masked_argmin_argmax(x, valid).ok_or(TensorError::AllMasked {
        op: "min_max_normalize",
    })?;
    let (min, max) = (x[lo], x[hi]);
    let range = max - min;
    let out = x
        .iter()
        .zip(valid)
        .map(|(&v, &ok)| {
            if ok && range > 0.0 {
                (v - min) / range
            } else {
                0.0
            }
        })
        .collect();
    Ok((out, Some((lo, hi))))
}
