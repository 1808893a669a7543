//! Raw slice kernels shared by the value-level ops and the tape.

/// `c = a·b + beta·c` for logical `a: m×k`, `b: k×n`, with optional
/// transposed storage of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above describe exactly the `m×k`, `k×n` and `m×n`
    // buffers whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Unfolds a `len×d_in` input into `out_len×(width·d_in)` patches with
/// symmetric zero padding of `(width-1)/2`; output `j` is centred on input
/// `j·stride`.
pub(crate) fn im2col(
    input: &[f64],
    len: usize,
    d_in: usize,
    width: usize,
    stride: usize,
) -> Vec<f64> {
    let out_len = conv_out_len(len, stride);
    let pad = (width - 1) / 2;
    let patch = width * d_in;
    let mut cols = vec![0.0; out_len * patch];
    for j in 0..out_len {
        let centre = j * stride;
        for t in 0..width {
            let src = centre as isize + t as isize - pad as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let src = src as usize;
            let dst = j * patch + t * d_in;
            cols[dst..dst + d_in].copy_from_slice(&input[src * d_in..(src + 1) * d_in]);
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto input rows.
pub(crate) fn col2im_add(
    dcols: &[f64],
    dinput: &mut [f64],
    len: usize,
    d_in: usize,
    width: usize,
    stride: usize,
) {
    let out_len = conv_out_len(len, stride);
    let pad = (width - 1) / 2;
    let patch = width * d_in;
    for j in 0..out_len {
        let centre = j * stride;
        for t in 0..width {
            let src = centre as isize + t as isize - pad as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let src = src as usize;
            let from = &dcols[j * patch + t * d_in..j * patch + (t + 1) * d_in];
            for (d, s) in dinput[src * d_in..(src + 1) * d_in].iter_mut().zip(from) {
                *d += s;
            }
        }
    }
}

/// Stabilised softmax of one row restricted to `valid` entries; invalid
/// entries are written as exactly zero. Returns `false` when nothing is valid.
pub(crate) fn softmax_row(logits: &[f64], valid: &[bool], out: &mut [f64]) -> bool {
    let max = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for ((o, &x), &v) in out.iter_mut().zip(logits).zip(valid) {
        *o = if v { (x - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    true
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalises one row in place into `xhat`, returning `1/sqrt(var+eps)`.
pub(crate) fn normalize_row(row: &[f64], xhat: &mut [f64]) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (h, &x) in xhat.iter_mut().zip(row) {
        *h = (x - mean) * inv_std;
    }
    inv_std
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the minimum and maximum among valid entries.
pub(crate) fn masked_argmin_argmax(x: &[f64], valid: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for (i, (&v, &ok)) in x.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        best = Some(match best {
            None => (i, i),
            Some((lo, hi)) => (
                if v < x[lo] { i } else { lo },
                if v > x[hi] { i } else { hi },
            ),
        });
    }
    best
}
