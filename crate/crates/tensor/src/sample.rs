//! Bilinear interpolation and the ops built on it.

use crate::conv::gemm;
use crate::error::{invalid, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// The four integer neighbours of a fractional position inside an `h×w`
/// plane. Neighbours outside the plane read as zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners {
    /// Flat indices of (y0,x0), (y0,x1), (y1,x0), (y1,x1); 0 when outside
    /// the plane, with `inside` set to 0.
    idx: [usize; 4],
    inside: [f64; 4],
    k: [f64; 4],
    ly: f64,
    lx: f64,
}

impl Corners {
    #[inline]
    pub(crate) fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (fy, fx) = (y.floor(), x.floor());
        let (y0, x0) = (fy as isize, fx as isize);
        let at = |yy: isize, xx: isize| {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                (yy as usize * w + xx as usize, 1.0)
            } else {
                (0, 0.0)
            }
        };
        let c = [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)];
        let (ly, lx) = (y - fy, x - fx);
        Corners {
            idx: c.map(|(i, _)| i),
            inside: c.map(|(_, m)| m),
            k: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
            ly,
            lx,
        }
    }

    #[inline]
    fn values(&self, plane: &[f64]) -> [f64; 4] {
        [
            plane[self.idx[0]] * self.inside[0],
            plane[self.idx[1]] * self.inside[1],
            plane[self.idx[2]] * self.inside[2],
            plane[self.idx[3]] * self.inside[3],
        ]
    }
}

#[inline]
pub(crate) fn bilinear_read(plane: &[f64], _w: usize, c: &Corners) -> f64 {
    let v = c.values(plane);
    let k = &c.k;
    k[0] * v[0] + k[1] * v[1] + k[2] * v[2] + k[3] * v[3]
}

#[inline]
pub(crate) fn bilinear_scatter(plane: &mut [f64], _w: usize, c: &Corners, g: f64) {
    for j in 0..4 {
        if c.inside[j] != 0.0 {
            plane[c.idx[j]] += g * c.k[j];
        }
    }
}

/// Partial derivatives of the interpolated value w.r.t. (y, x).
#[inline]
pub(crate) fn bilinear_grad(plane: &[f64], _w: usize, c: &Corners) -> (f64, f64) {
    let v = c.values(plane);
    let (ly, lx) = (c.ly, c.lx);
    (
        (1.0 - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]),
        (1.0 - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]),
    )
}

/// Reads every channel of `input: [C, H, W]` at the fractional position
/// `(y, x)`. `y` and `x` are single-element vars.
pub fn bilinear_sample<'t>(input: Var<'t>, y: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    input.same_tape(y)?;
    input.same_tape(x)?;
    let v = input.value();
    v.expect_rank("bilinear_sample", 3)?;
    let (yv, xv) = (y.value(), x.value());
    if yv.numel() != 1 || xv.numel() != 1 {
        return Err(invalid("bilinear_sample", "coordinates must be single values"));
    }
    let [c, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2]];
    let corners = Corners::new(yv.item(), xv.item(), h, w);
    let plane = h * w;
    let out: Vec<f64> = (0..c)
        .map(|ci| bilinear_read(&v.data()[ci * plane..(ci + 1) * plane], w, &corners))
        .collect();
    let needs = [input.requires_grad(), y.requires_grad(), x.requires_grad()];
    let ids = [input.id, y.id, x.id];
    let (in_shape, y_shape, x_shape) = (v.shape().to_vec(), yv.shape().to_vec(), xv.shape().to_vec());
    Ok(input.tape.push(
        Tensor::new(&[c], out)?,
        needs.iter().any(|&n| n),
        Some(Box::new(move |g, sink| {
            if needs[0] {
                sink.accumulate_with(ids[0], &in_shape, |d| {
                    for ci in 0..c {
                        bilinear_scatter(&mut d[ci * plane..(ci + 1) * plane], w, &corners, g.data()[ci]);
                    }
                });
            }
            if needs[1] || needs[2] {
                let (mut gy, mut gx) = (0.0, 0.0);
                for ci in 0..c {
                    let (dy, dx) = bilinear_grad(&v.data()[ci * plane..(ci + 1) * plane], w, &corners);
                    gy += g.data()[ci] * dy;
                    gx += g.data()[ci] * dx;
                }
                if needs[1] {
                    sink.accumulate(ids[1], Tensor::full(&y_shape, gy));
                }
                if needs[2] {
                    sink.accumulate(ids[2], Tensor::full(&x_shape, gx));
                }
            }
        })),
    ))
}

/// Per-axis interpolation table for half-pixel-centred upsampling.
fn upsample_axis(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of `[C, h, w]` by an integer factor (half-pixel
/// centres, edge-clamped). Every output is a convex combination of inputs.
pub fn upsample_bilinear(input: Var<'_>, factor: usize) -> Result<Var<'_>> {
    let v = input.value();
    v.expect_rank("upsample_bilinear", 3)?;
    if factor == 0 {
        return Err(invalid("upsample_bilinear", "factor must be >= 1"));
    }
    let [c, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2]];
    let (ho, wo) = (h * factor, w * factor);
    let rows = upsample_axis(h, factor);
    let cols = upsample_axis(w, factor);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let src = &v.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                dst[oy * wo + ox] = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * ((1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
    let in_shape = v.shape().to_vec();
    let ia = input.id;
    Ok(input.tape.push(
        Tensor::new(&[c, ho, wo], out)?,
        input.requires_grad(),
        Some(Box::new(move |g, sink| {
            sink.accumulate_with(ia, &in_shape, |d| {
                for ci in 0..c {
                    let gsrc = &g.data()[ci * ho * wo..(ci + 1) * ho * wo];
                    let dst = &mut d[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                            let gv = gsrc[oy * wo + ox];
                            dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                            dst[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
            });
        })),
    ))
}

/// Adaptive cost aggregation over each disparity slice:
/// `out(d, p) = Σ_n w_n · cost(d, p + p_n + Δp_n(p))`.
///
/// `cost: [D, h, w]`, `weights: [K²]`, `offsets: [2K², h, w]` (Δy, Δx per tap,
/// shared by all slices). Taps form a centred K×K grid.
pub fn isa_aggregate<'t>(cost: Var<'t>, weights: Var<'t>, offsets: Var<'t>) -> Result<Var<'t>> {
    cost.same_tape(weights)?;
    cost.same_tape(offsets)?;
    let (cv, wv, ov) = (cost.value(), weights.value(), offsets.value());
    cv.expect_rank("isa_aggregate", 3)?;
    let kk = wv.numel();
    let k = (kk as f64).sqrt().round() as usize;
    if k * k != kk || k.is_multiple_of(2) {
        return Err(invalid(
            "isa_aggregate",
            format!("weights must hold K² entries for odd K, got {kk}"),
        ));
    }
    let [d_len, h, w] = [cv.shape()[0], cv.shape()[1], cv.shape()[2]];
    ov.expect_shape("isa_aggregate", &[2 * kk, h, w])?;
    let plane = h * w;
    let half = (k / 2) as isize;
    let mut corners = Vec::with_capacity(kk * plane);
    for n in 0..kk {
        let (ky, kx) = ((n / k) as isize - half, (n % k) as isize - half);
        for i in 0..h {
            for j in 0..w {
                let q = i * w + j;
                let py = (i as isize + ky) as f64 + ov.data()[2 * n * plane + q];
                let px = (j as isize + kx) as f64 + ov.data()[(2 * n + 1) * plane + q];
                corners.push(Corners::new(py, px, h, w));
            }
        }
    }
    // cols[n, d*plane + q]
    let span = d_len * plane;
    let mut cols = vec![0.0; kk * span];
    for n in 0..kk {
        for d in 0..d_len {
            let src = &cv.data()[d * plane..(d + 1) * plane];
            let row = &mut cols[n * span + d * plane..][..plane];
            for (q, c) in corners[n * plane..(n + 1) * plane].iter().enumerate() {
                row[q] = bilinear_read(src, w, c);
            }
        }
    }
    let mut out = vec![0.0; span];
    gemm(1, kk, span, wv.data(), kk, 1, &cols, span, 1, 0.0, &mut out);

    let needs = [cost.requires_grad(), weights.requires_grad(), offsets.requires_grad()];
    let ids = [cost.id, weights.id, offsets.id];
    let (c_shape, w_shape, o_shape) = (cv.shape().to_vec(), wv.shape().to_vec(), ov.shape().to_vec());
    Ok(cost.tape.push(
        Tensor::new(cv.shape(), out)?,
        needs.iter().any(|&n| n),
        Some(Box::new(move |g, sink| {
            let g = g.data();
            if needs[0] {
                sink.accumulate_with(ids[0], &c_shape, |dc| {
                    for n in 0..kk {
                        let wn = wv.data()[n];
                        for d in 0..d_len {
                            let dst = &mut dc[d * plane..(d + 1) * plane];
                            let gs = &g[d * plane..(d + 1) * plane];
                            for (q, c) in corners[n * plane..(n + 1) * plane].iter().enumerate() {
                                bilinear_scatter(dst, w, c, gs[q] * wn);
                            }
                        }
                    }
                });
            }
            if needs[1] {
                let mut dw = vec![0.0; kk];
                gemm(kk, span, 1, &cols, span, 1, g, 1, 1, 0.0, &mut dw);
                sink.accumulate(ids[1], Tensor::new(&w_shape, dw).expect("shape"));
            }
            if needs[2] {
                sink.accumulate_with(ids[2], &o_shape, |doff| {
                    for n in 0..kk {
                        let wn = wv.data()[n];
                        for d in 0..d_len {
                            let src = &cv.data()[d * plane..(d + 1) * plane];
                            let gs = &g[d * plane..(d + 1) * plane];
                            for (q, c) in corners[n * plane..(n + 1) * plane].iter().enumerate() {
                                let (gy, gx) = bilinear_grad(src, w, c);
                                doff[2 * n * plane + q] += gs[q] * wn * gy;
                                doff[(2 * n + 1) * plane + q] += gs[q] * wn * gx;
                            }
                        }
                    }
                });
            }
        })),
    ))
}
