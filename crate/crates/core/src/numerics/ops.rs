//! Forward and backward primitives for the dense layers: matrix products,
//! 2-D cross-correlation (via im2col + GEMM) and non-overlapping average
//! pooling. Batched tensors are laid out `[batch, channels, height, width]`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `C = alpha * A * B + beta * C` on strided row/column-major views.
///
/// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`; a transpose is a swap of
/// the two strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa), "gemm: A view out of bounds");
    assert!(b.len() >= last(k, n, rsb, csb), "gemm: B view out of bounds");
    assert!(c.len() >= last(m, n, rsc, csc), "gemm: C view out of bounds");
    // SAFETY: the asserts above guarantee every strided access lies inside
    // the provided slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        1.0,
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        0.0,
        out.data_mut(),
        (n, 1),
    );
    Ok(out)
}

/// Matrix-vector product `A v`.
pub fn matvec(a: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    if a.ndim() != 2 || a.shape()[1] != v.len() {
        return Err(Error::shape(format!("matvec {:?} x [{}]", a.shape(), v.len())));
    }
    let cols = a.shape()[1];
    Ok(a.data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect())
}

/// Fully connected layer: `x [B, in]`, `weight [out, in]` -> `[B, out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out_f, in_f) = dims2(weight)?;
    let batch = x.dim0();
    if x.len() != batch * in_f {
        return Err(Error::shape(format!(
            "linear input {:?} against weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let mut y = Tensor::zeros(&[batch, out_f]);
    gemm(
        batch,
        in_f,
        out_f,
        1.0,
        x.data(),
        (in_f, 1),
        weight.data(),
        (1, in_f),
        0.0,
        y.data_mut(),
        (out_f, 1),
    );
    if let Some(b) = bias {
        add_bias_rows(&mut y, b)?;
    }
    Ok(y)
}

/// Gradients of [`linear`]. Accumulates into `d_weight`/`d_bias`; returns the
/// input gradient when requested.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    d_weight: &mut Tensor,
    d_bias: Option<&mut Tensor>,
    need_input_grad: bool,
) -> Result<Option<Tensor>> {
    let (out_f, in_f) = dims2(weight)?;
    let batch = x.dim0();
    if grad_out.len() != batch * out_f || x.len() != batch * in_f {
        return Err(Error::shape("linear backward operand sizes"));
    }
    // dW[out, in] += g^T x
    gemm(
        out_f,
        batch,
        in_f,
        1.0,
        grad_out.data(),
        (1, out_f),
        x.data(),
        (in_f, 1),
        1.0,
        d_weight.data_mut(),
        (in_f, 1),
    );
    if let Some(db) = d_bias {
        let db = db.data_mut();
        for row in grad_out.data().chunks_exact(out_f) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
    }
    if !need_input_grad {
        return Ok(None);
    }
    let mut dx = Tensor::zeros(&[batch, in_f]);
    gemm(
        batch,
        out_f,
        in_f,
        1.0,
        grad_out.data(),
        (out_f, 1),
        weight.data(),
        (in_f, 1),
        0.0,
        dx.data_mut(),
        (in_f, 1),
    );
    Ok(Some(dx.reshape(x.shape())?))
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn from_tensors(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        if input.ndim() != 4 || weight.ndim() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-D input and weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            )));
        }
        let (o, c, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if kh != kw || c != input.shape()[1] || stride == 0 {
            return Err(Error::shape(format!(
                "conv2d input {:?} incompatible with weight {:?} (stride {stride})",
                input.shape(),
                weight.shape()
            )));
        }
        let g = ConvGeometry {
            in_channels: c,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            in_h: input.shape()[2],
            in_w: input.shape()[3],
        };
        if g.in_h + 2 * padding < kh || g.in_w + 2 * padding < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        Ok(g)
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * p..((c * k + ki) * k + kj + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= g.in_h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix as usize >= g.in_w {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * p..((c * k + ki) * k + kj + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `input [N, C, H, W]`, `weight [O, C, k, k]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::from_tensors(input, weight, stride, padding)?;
    let n = input.shape()[0];
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let mut out = Tensor::zeros(&[n, g.out_channels, g.out_h(), g.out_w()]);
    let mut col = vec![0.0; patch * p];
    for s in 0..n {
        im2col(&g, &input.data()[s * in_len..(s + 1) * in_len], &mut col);
        let dst = &mut out.data_mut()[s * g.out_channels * p..(s + 1) * g.out_channels * p];
        gemm(
            g.out_channels,
            patch,
            p,
            1.0,
            weight.data(),
            (patch, 1),
            &col,
            (p, 1),
            0.0,
            dst,
            (p, 1),
        );
    }
    if let Some(b) = bias {
        add_bias_channels(&mut out, b)?;
    }
    Ok(out)
}

/// Gradients of [`conv2d`]; accumulates into `d_weight`/`d_bias` and returns
/// the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    d_weight: &mut Tensor,
    d_bias: Option<&mut Tensor>,
    need_input_grad: bool,
) -> Result<Option<Tensor>> {
    let g = ConvGeometry::from_tensors(input, weight, stride, padding)?;
    let n = input.shape()[0];
    let (patch, p, o) = (g.patch(), g.positions(), g.out_channels);
    if grad_out.len() != n * o * p {
        return Err(Error::shape(format!(
            "conv2d backward: grad {:?} vs expected [{n}, {o}, {}, {}]",
            grad_out.shape(),
            g.out_h(),
            g.out_w()
        )));
    }
    let in_len = g.in_channels * g.in_h * g.in_w;
    let mut col = vec![0.0; patch * p];
    let mut dcol = vec![0.0; patch * p];
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    for s in 0..n {
        im2col(&g, &input.data()[s * in_len..(s + 1) * in_len], &mut col);
        let go = &grad_out.data()[s * o * p..(s + 1) * o * p];
        // dW[o, patch] += g[o, p] col^T[p, patch]
        gemm(
            o,
            p,
            patch,
            1.0,
            go,
            (p, 1),
            &col,
            (1, p),
            1.0,
            d_weight.data_mut(),
            (patch, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcol[patch, p] = W^T[patch, o] g[o, p]
            gemm(
                patch,
                o,
                p,
                1.0,
                weight.data(),
                (1, patch),
                go,
                (p, 1),
                0.0,
                &mut dcol,
                (p, 1),
            );
            col2im_add(&g, &dcol, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
        }
    }
    if let Some(db) = d_bias {
        let db = db.data_mut();
        for s in 0..n {
            for (oc, d) in db.iter_mut().enumerate() {
                let base = (s * o + oc) * p;
                *d += grad_out.data()[base..base + p].iter().sum::<f64>();
            }
        }
    }
    Ok(dx)
}

/// Non-overlapping `window x window` average pooling (stride = window).
pub fn avgpool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input)?;
    if window == 0 || h < window || w < window {
        return Err(Error::shape(format!("avgpool window {window} on {:?}", input.shape())));
    }
    let (oh, ow) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f64;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    let row = &sp[(oy * window + ky) * w + ox * window..][..window];
                    acc += row.iter().sum::<f64>();
                }
                dp[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avgpool2d`] with respect to its input of shape `input_shape`.
pub fn avgpool2d_backward(grad_out: &Tensor, input_shape: &[usize], window: usize) -> Result<Tensor> {
    if input_shape.len() != 4 {
        return Err(Error::shape("avgpool backward expects a 4-D input shape"));
    }
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / window, w / window);
    if grad_out.len() != n * c * oh * ow {
        return Err(Error::shape("avgpool backward gradient size"));
    }
    let inv = 1.0 / (window * window) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[plane * oh * ow + oy * ow + ox] * inv;
                for ky in 0..window {
                    let base = plane * h * w + (oy * window + ky) * w + ox * window;
                    d[base..base + window].iter_mut().for_each(|x| *x += v);
                }
            }
        }
    }
    Ok(dx)
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(format!("expected 2-D tensor, got {s:?}"))),
    }
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::shape(format!("expected 4-D tensor, got {s:?}"))),
    }
}

fn add_bias_rows(y: &mut Tensor, bias: &Tensor) -> Result<()> {
    let cols = y.shape()[1];
    if bias.len() != cols {
        return Err(Error::shape("bias length"));
    }
    for row in y.data_mut().chunks_exact_mut(cols) {
        row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    }
    Ok(())
}

fn add_bias_channels(y: &mut Tensor, bias: &Tensor) -> Result<()> {
    let (n, c, h, w) = dims4(y)?;
    if bias.len() != c {
        return Err(Error::shape("bias length"));
    }
    let p = h * w;
    let b = bias.data().to_vec();
    for s in 0..n {
        for (ch, bv) in b.iter().enumerate() {
            let base = (s * c + ch) * p;
            y.data_mut()[base..base + p].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_reference(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
        let [o, _, k, _] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += input.data()[((s * c + ic) * h + iy as usize) * w + ix as usize]
                                        * weight.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut state = seed;
        let data = (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![3.5, -2.0]).unwrap();
        assert_eq!(matmul(&eye, &v).unwrap(), v);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn avgpool_constant_input() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = avgpool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 1.0);
    }

    #[test]
    fn conv_window_sums() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        // windows: [1,2,4,5] [2,3,5,6] [4,5,7,8] [5,6,8,9]
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_matches_quadruple_loop_exactly() {
        for (k, stride, pad, h) in [(3, 1, 1, 8), (2, 2, 0, 8), (3, 2, 1, 7), (1, 1, 0, 5)] {
            let x = ramp(&[2, 3, h, h], 11 + k as u64);
            let w = ramp(&[4, 3, k, k], 5 + h as u64);
            let fast = conv2d(&x, &w, None, stride, pad).unwrap();
            let slow = conv_reference(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                // same products, possibly different summation order
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_exact_on_integer_inputs() {
        // integer operands make every summation order exact
        for (k, stride, pad, h) in [(3, 1, 1, 8), (2, 2, 0, 8), (3, 1, 0, 6)] {
            let x = ramp(&[1, 2, h, h], 21).map(|v| (v * 8.0).round());
            let w = ramp(&[3, 2, k, k], 22).map(|v| (v * 4.0).round());
            let fast = conv2d(&x, &w, None, stride, pad).unwrap();
            assert_eq!(fast, conv_reference(&x, &w, stride, pad));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = ramp(&[2, 2, 5, 5], 3);
        let w = ramp(&[3, 2, 3, 3], 4);
        let gout = ramp(&[2, 3, 3, 3], 9);
        let objective = |x: &Tensor, w: &Tensor| -> f64 {
            let y = conv2d(x, w, None, 2, 1).unwrap();
            y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum()
        };
        let mut dw = Tensor::zeros(w.shape());
        let dx = conv2d_backward(&x, &w, &gout, 2, 1, &mut dw, None, true)
            .unwrap()
            .unwrap();
        let h = 1e-6;
        for idx in [0, 7, 17, 30, 53] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h);
            assert!((fd - dw.data()[idx]).abs() < 1e-7);
        }
        for idx in [0, 12, 24, 49, 99] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn avgpool_backward_spreads_evenly() {
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]).unwrap();
        let dx = avgpool2d_backward(&g, &[1, 1, 2, 2], 2).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_backward_shapes_and_values() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], vec![0.5, -1.0]).unwrap();
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[-1.5]);
        let g = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let mut dw = Tensor::zeros(&[1, 2]);
        let dx = linear_backward(&x, &w, &g, &mut dw, None, true).unwrap().unwrap();
        assert_eq!(dw.data(), &[2.0, 4.0]);
        assert_eq!(dx.data(), &[1.0, -2.0]);
    }
}
