//! Standard and deformable 2D convolution via im2col + GEMM.
//!
//! Both convolutions lower to the same column matrix layout
//! `cols[(ci * k*k + n), q]` with `n = ky*k + kx` and `q = oy*W' + ox`, and share
//! the same GEMM call. With all offsets zero the deformable path therefore
//! produces bit-identical output to the standard one.

use crate::error::{invalid, Result, TensorError};
use crate::sample::{bilinear_grad, bilinear_read, bilinear_scatter, Corners};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, with arbitrary strides on a and b.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by conv2d and deform_conv2d.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        input.expect_rank(op, 3)?;
        weight.expect_rank(op, 4)?;
        let [c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
        let ws = weight.shape();
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in || ws[3] != k {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![c_out, c_in, k, k],
                got: ws.to_vec(),
            });
        }
        bias.expect_shape(op, &[c_out])?;
        if k % 2 == 0 {
            return Err(invalid(op, format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(invalid(
                op,
                format!("input {h}x{w} with pad {pad} is smaller than kernel {k}"),
            ));
        }
        Ok(ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn out_shape(&self) -> [usize; 3] {
        [self.c_out, self.h_out, self.w_out]
    }

    /// Top-left input coordinate of tap `(ky, kx)` for output `(oy, ox)`.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (isize, isize) {
        (
            (oy * self.stride + ky) as isize - self.pad as isize,
            (ox * self.stride + kx) as isize - self.pad as isize,
        )
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
#[inline]
fn ox_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let reach = g.w + g.pad;
    let hi = if reach > kx {
        ((reach - kx - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Input row of tap `ky` for output row `oy`, if inside the image.
#[inline]
fn tap_row(g: &ConvGeom, oy: usize, ky: usize) -> Option<usize> {
    let iy = (oy * g.stride + ky).checked_sub(g.pad)?;
    (iy < g.h).then_some(iy)
}

fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (q_len, kk) = (g.cols(), g.k * g.k);
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        return x.to_vec();
    }
    let mut cols = vec![0.0; g.rows() * q_len];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[(ci * kk + ky * g.k + kx) * q_len..][..q_len];
                let (lo, hi) = ox_span(g, kx);
                for oy in 0..g.h_out {
                    let Some(iy) = tap_row(g, oy, ky) else { continue };
                    let dst = &mut row[oy * g.w_out + lo..oy * g.w_out + hi];
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = src[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, dcols: &[f64], dx: &mut [f64]) {
    let (q_len, kk) = (g.cols(), g.k * g.k);
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &dcols[(ci * kk + ky * g.k + kx) * q_len..][..q_len];
                let (lo, hi) = ox_span(g, kx);
                for oy in 0..g.h_out {
                    let Some(iy) = tap_row(g, oy, ky) else { continue };
                    let src = &row[oy * g.w_out + lo..oy * g.w_out + hi];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (i, s) in src.iter().enumerate() {
                            dst[ix0 + i * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `out = weight · cols + bias` with weight viewed as `[c_out, rows]`.
fn gemm_forward(g: &ConvGeom, weight: &[f64], bias: &[f64], cols: &[f64]) -> Vec<f64> {
    let (r, q) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.c_out * q];
    gemm(g.c_out, r, q, weight, r, 1, cols, q, 1, 0.0, &mut out);
    for (co, row) in out.chunks_mut(q).enumerate() {
        let b = bias[co];
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// dW = dY · colsᵀ
fn grad_weight(g: &ConvGeom, dy: &[f64], cols: &[f64]) -> Vec<f64> {
    let (r, q) = (g.rows(), g.cols());
    let mut dw = vec![0.0; g.c_out * r];
    gemm(g.c_out, q, r, dy, q, 1, cols, 1, q, 0.0, &mut dw);
    dw
}

/// dcols = Wᵀ · dY
fn grad_cols(g: &ConvGeom, weight: &[f64], dy: &[f64]) -> Vec<f64> {
    let (r, q) = (g.rows(), g.cols());
    let mut dcols = vec![0.0; r * q];
    gemm(r, g.c_out, q, weight, 1, r, dy, q, 1, 0.0, &mut dcols);
    dcols
}

fn grad_bias(g: &ConvGeom, dy: &[f64]) -> Vec<f64> {
    dy.chunks(g.cols()).map(|row| row.iter().sum()).collect()
}

/// 2D cross-correlation with zero padding.
///
/// `input: [C_in, H, W]`, `weight: [C_out, C_in, k, k]`, `bias: [C_out]`.
pub fn conv2d<'t>(input: Var<'t>, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
    input.same_tape(weight)?;
    input.same_tape(bias)?;
    let (x, w, b) = (input.value(), weight.value(), bias.value());
    let g = ConvGeom::new("conv2d", &x, &w, &b, stride, pad)?;
    let cols = im2col(&g, x.data());
    let out = gemm_forward(&g, w.data(), b.data(), &cols);
    let needs = [input.requires_grad(), weight.requires_grad(), bias.requires_grad()];
    let ids = [input.id, weight.id, bias.id];
    let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
    Ok(input.tape.push(
        Tensor::new(&g.out_shape(), out)?,
        needs.iter().any(|&n| n),
        Some(Box::new(move |dy, sink| {
            let dy = dy.data();
            if needs[0] {
                let dcols = grad_cols(&g, w.data(), dy);
                sink.accumulate_with(ids[0], &x_shape, |dx| col2im(&g, &dcols, dx));
            }
            if needs[1] {
                let dw = grad_weight(&g, dy, &cols);
                sink.accumulate(ids[1], Tensor::new(&w_shape, dw).expect("shape"));
            }
            if needs[2] {
                sink.accumulate(ids[2], Tensor::new(&[g.c_out], grad_bias(&g, dy)).expect("shape"));
            }
        })),
    ))
}

/// Sampling position of tap `n` at output `q` under `offsets`.
#[inline]
fn deform_pos(g: &ConvGeom, offsets: &[f64], n: usize, oy: usize, ox: usize) -> (f64, f64) {
    let q_len = g.cols();
    let q = oy * g.w_out + ox;
    let (ky, kx) = (n / g.k, n % g.k);
    let (ty, tx) = g.tap(oy, ox, ky, kx);
    (
        ty as f64 + offsets[(2 * n) * q_len + q],
        tx as f64 + offsets[(2 * n + 1) * q_len + q],
    )
}

/// Deformable convolution: every tap `p_n` of the regular grid is displaced by
/// a per-output-pixel offset and read through bilinear interpolation.
///
/// `offsets: [2k², H', W']`, channel `2n` holding Δy and `2n+1` Δx for tap
/// `n = ky*k + kx`.
pub fn deform_conv2d<'t>(
    input: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    offsets: Var<'t>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    input.same_tape(weight)?;
    input.same_tape(bias)?;
    input.same_tape(offsets)?;
    let (x, w, b, off) = (input.value(), weight.value(), bias.value(), offsets.value());
    let g = ConvGeom::new("deform_conv2d", &x, &w, &b, stride, pad)?;
    let kk = g.k * g.k;
    if off.rank() != 3 || off.shape()[0] != 2 * kk {
        return Err(invalid(
            "deform_conv2d",
            format!("offsets need {} channels (2k²), got shape {:?}", 2 * kk, off.shape()),
        ));
    }
    off.expect_shape("deform_conv2d", &[2 * kk, g.h_out, g.w_out])?;

    let q_len = g.cols();
    let plane = g.h * g.w;
    // Bilinear corners are shared across input channels.
    let mut corners = Vec::with_capacity(kk * q_len);
    for n in 0..kk {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let (py, px) = deform_pos(&g, off.data(), n, oy, ox);
                corners.push(Corners::new(py, px, g.h, g.w));
            }
        }
    }
    let mut cols = vec![0.0; g.rows() * q_len];
    for ci in 0..g.c_in {
        let src = &x.data()[ci * plane..(ci + 1) * plane];
        for n in 0..kk {
            let row = &mut cols[(ci * kk + n) * q_len..][..q_len];
            for (q, c) in corners[n * q_len..(n + 1) * q_len].iter().enumerate() {
                row[q] = bilinear_read(src, g.w, c);
            }
        }
    }
    let out = gemm_forward(&g, w.data(), b.data(), &cols);

    let needs = [
        input.requires_grad(),
        weight.requires_grad(),
        bias.requires_grad(),
        offsets.requires_grad(),
    ];
    let ids = [input.id, weight.id, bias.id, offsets.id];
    let (x_shape, w_shape, off_shape) = (x.shape().to_vec(), w.shape().to_vec(), off.shape().to_vec());
    Ok(input.tape.push(
        Tensor::new(&g.out_shape(), out)?,
        needs.iter().any(|&n| n),
        Some(Box::new(move |dy, sink| {
            let dy = dy.data();
            if needs[0] || needs[3] {
                let dcols = grad_cols(&g, w.data(), dy);
                if needs[0] {
                    sink.accumulate_with(ids[0], &x_shape, |dx| {
                        for ci in 0..g.c_in {
                            let dst = &mut dx[ci * plane..(ci + 1) * plane];
                            for n in 0..kk {
                                let row = &dcols[(ci * kk + n) * q_len..][..q_len];
                                for (q, c) in corners[n * q_len..(n + 1) * q_len].iter().enumerate() {
                                    bilinear_scatter(dst, g.w, c, row[q]);
                                }
                            }
                        }
                    });
                }
                if needs[3] {
                    sink.accumulate_with(ids[3], &off_shape, |doff| {
                        for ci in 0..g.c_in {
                            let src = &x.data()[ci * plane..(ci + 1) * plane];
                            for n in 0..kk {
                                let row = &dcols[(ci * kk + n) * q_len..][..q_len];
                                for (q, c) in corners[n * q_len..(n + 1) * q_len].iter().enumerate() {
                                    let (gy, gx) = bilinear_grad(src, g.w, c);
                                    doff[(2 * n) * q_len + q] += row[q] * gy;
                                    doff[(2 * n + 1) * q_len + q] += row[q] * gx;
                                }
                            }
                        }
                    });
                }
            }
            if needs[1] {
                let dw = grad_weight(&g, dy, &cols);
                sink.accumulate(ids[1], Tensor::new(&w_shape, dw).expect("shape"));
            }
            if needs[2] {
                sink.accumulate(ids[2], Tensor::new(&[g.c_out], grad_bias(&g, dy)).expect("shape"));
            }
        })),
    ))
}
