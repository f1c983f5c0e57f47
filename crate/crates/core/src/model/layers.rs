//! Layer kernels on channel-major `[C][H][W]` buffers.
//!
//! Convolutions go through im2col and a single GEMM; the column buffer is kept
//! for the backward pass.

use matrixmultiply::dgemm;

use super::Shape;

/// Output length of a valid sliding window, floor division.
pub const fn window_out(n: usize, k: usize, s: usize) -> usize {
    if n < k {
        0
    } else {
        (n - k) / s + 1
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of the given slices, checked by callers' shapes.
    unsafe {
        dgemm(
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
            rsc,
            csc,
        );
    }
}

/// Column matrix `[cin*kh*kw][oh*ow]` for a valid convolution.
pub fn im2col(input: &[f64], s: Shape, kernel: (usize, usize), stride: (usize, usize)) -> Vec<f64> {
    let (kh, kw) = kernel;
    let oh = window_out(s.rows, kh, stride.0);
    let ow = window_out(s.cols, kw, stride.1);
    let n = oh * ow;
    let mut cols = vec![0.0; s.channels * kh * kw * n];
    for ci in 0..s.channels {
        let plane = &input[ci * s.rows * s.cols..(ci + 1) * s.rows * s.cols];
        for di in 0..kh {
            for dj in 0..kw {
                let k = (ci * kh + di) * kw + dj;
                let row = &mut cols[k * n..(k + 1) * n];
                for y in 0..oh {
                    let src = (y * stride.0 + di) * s.cols + dj;
                    for x in 0..ow {
                        row[y * ow + x] = plane[src + x * stride.1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], s: Shape, kernel: (usize, usize), stride: (usize, usize), din: &mut [f64]) {
    let (kh, kw) = kernel;
    let oh = window_out(s.rows, kh, stride.0);
    let ow = window_out(s.cols, kw, stride.1);
    let n = oh * ow;
    for ci in 0..s.channels {
        let plane = &mut din[ci * s.rows * s.cols..(ci + 1) * s.rows * s.cols];
        for di in 0..kh {
            for dj in 0..kw {
                let k = (ci * kh + di) * kw + dj;
                let row = &dcols[k * n..(k + 1) * n];
                for y in 0..oh {
                    let dst = (y * stride.0 + di) * s.cols + dj;
                    for x in 0..ow {
                        plane[dst + x * stride.1] += row[y * ow + x];
                    }
                }
            }
        }
    }
}

/// Valid convolution. `w` is `[cout][cin][kh][kw]`. Returns the output and the column buffer.
pub fn conv_forward(
    input: &[f64],
    s: Shape,
    w: &[f64],
    b: &[f64],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let cout = b.len();
    let kk = s.channels * kernel.0 * kernel.1;
    debug_assert_eq!(w.len(), cout * kk);
    let cols = im2col(input, s, kernel, stride);
    let n = cols.len() / kk.max(1);
    let mut out = Vec::with_capacity(cout * n);
    for &bias in b {
        out.extend(std::iter::repeat_n(bias, n));
    }
    gemm(cout, kk, n, w, kk as isize, 1, &cols, n as isize, 1, 1.0, &mut out, n as isize, 1);
    (out, cols)
}

/// Accumulates weight and bias gradients and, if requested, returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    dout: &[f64],
    cols: &[f64],
    s: Shape,
    w: &[f64],
    kernel: (usize, usize),
    stride: (usize, usize),
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let cout = db.len();
    let kk = s.channels * kernel.0 * kernel.1;
    let n = dout.len() / cout;
    for (co, g) in db.iter_mut().enumerate() {
        *g += dout[co * n..(co + 1) * n].iter().sum::<f64>();
    }
    // dw[co][k] += sum_n dout[co][n] * cols[k][n]
    gemm(cout, n, kk, dout, n as isize, 1, cols, 1, n as isize, 1.0, dw, kk as isize, 1);
    if !need_input_grad {
        return None;
    }
    // dcols[k][n] = sum_co w[co][k] * dout[co][n]
    let mut dcols = vec![0.0; kk * n];
    gemm(kk, cout, n, w, 1, kk as isize, dout, n as isize, 1, 0.0, &mut dcols, n as isize, 1);
    let mut din = vec![0.0; s.len()];
    col2im_add(&dcols, s, kernel, stride, &mut din);
    Some(din)
}

pub fn relu_forward(x: &mut [f64]) {
    for v in x {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes the gradient where the activation output was not positive.
pub fn relu_backward(dout: &mut [f64], activated: &[f64]) {
    for (g, &a) in dout.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Max pooling per channel. Returns outputs and the flat input index of each winner;
/// the first maximum in row-major window order wins ties.
pub fn maxpool_forward(
    input: &[f64],
    s: Shape,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let oh = window_out(s.rows, kernel.0, stride.0);
    let ow = window_out(s.cols, kernel.1, stride.1);
    let mut out = Vec::with_capacity(s.channels * oh * ow);
    let mut arg = Vec::with_capacity(s.channels * oh * ow);
    for c in 0..s.channels {
        let base = c * s.rows * s.cols;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = base + (y * stride.0) * s.cols + x * stride.1;
                let mut best = input[best_i];
                for di in 0..kernel.0 {
                    for dj in 0..kernel.1 {
                        let i = base + (y * stride.0 + di) * s.cols + x * stride.1 + dj;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dout: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut din = vec![0.0; input_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        din[i] += g;
    }
    din
}

/// `w` is `[outputs][inputs]`.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn dense_backward(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let n = x.len();
    for (o, &g) in dout.iter().enumerate() {
        db[o] += g;
        if g != 0.0 {
            for (d, &xi) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dx = vec![0.0; n];
    for (o, &g) in dout.iter().enumerate() {
        if g != 0.0 {
            for (d, &wi) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *d += g * wi;
            }
        }
    }
    Some(dx)
}
