//! Stereo cost-volume construction from left/right feature maps.

use crate::conv::gemm;
use crate::error::{invalid, Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

fn check_pair(op: &'static str, left: &Tensor, right: &Tensor, disparities: usize) -> Result<[usize; 3]> {
    left.expect_rank(op, 3)?;
    if left.shape() != right.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: left.shape().to_vec(),
            got: right.shape().to_vec(),
        });
    }
    let s = [left.shape()[0], left.shape()[1], left.shape()[2]];
    if disparities == 0 || disparities >= s[2] {
        return Err(invalid(
            op,
            format!("disparity count {disparities} must lie in 1..{}", s[2]),
        ));
    }
    Ok(s)
}

/// Explicit matching: `C(d, i, j) = (1/C) Σ_c L(c, i, j) · R(c, i, j − d)` for
/// `d ∈ 0..disparities`, zero where `j − d` falls off the image.
pub fn correlation_volume<'t>(left: Var<'t>, right: Var<'t>, disparities: usize) -> Result<Var<'t>> {
    left.same_tape(right)?;
    let (lv, rv) = (left.value(), right.value());
    let [c, h, w] = check_pair("correlation_volume", &lv, &rv, disparities)?;
    let plane = h * w;
    let scale = 1.0 / c as f64;
    let mut out = vec![0.0; disparities * plane];
    for d in 0..disparities {
        let dst = &mut out[d * plane..(d + 1) * plane];
        for ci in 0..c {
            let l = &lv.data()[ci * plane..(ci + 1) * plane];
            let r = &rv.data()[ci * plane..(ci + 1) * plane];
            for i in 0..h {
                for j in d..w {
                    dst[i * w + j] += l[i * w + j] * r[i * w + j - d];
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    let needs = [left.requires_grad(), right.requires_grad()];
    let ids = [left.id, right.id];
    let shape = lv.shape().to_vec();
    Ok(left.tape.push(
        Tensor::new(&[disparities, h, w], out)?,
        needs[0] || needs[1],
        Some(Box::new(move |g, sink| {
            let g = g.data();
            for (side, other) in [(0usize, &rv), (1usize, &lv)] {
                if !needs[side] {
                    continue;
                }
                sink.accumulate_with(ids[side], &shape, |dx| {
                    for d in 0..disparities {
                        let gs = &g[d * plane..(d + 1) * plane];
                        for ci in 0..c {
                            let o = &other.data()[ci * plane..(ci + 1) * plane];
                            let dst = &mut dx[ci * plane..(ci + 1) * plane];
                            for i in 0..h {
                                for j in d..w {
                                    let gv = gs[i * w + j] * scale;
                                    if side == 0 {
                                        dst[i * w + j] += gv * o[i * w + j - d];
                                    } else {
                                        dst[i * w + j - d] += gv * o[i * w + j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        })),
    ))
}

/// Feature stacking without a similarity measure: `[2C, D, h·w]` where the
/// first `C` channels repeat `L(c, i, j)` for every `d` and the last `C` hold
/// `R(c, i, j − d)` (zero off the image).
pub fn concat_volume<'t>(left: Var<'t>, right: Var<'t>, disparities: usize) -> Result<Var<'t>> {
    left.same_tape(right)?;
    let (lv, rv) = (left.value(), right.value());
    let [c, h, w] = check_pair("concat_volume", &lv, &rv, disparities)?;
    let plane = h * w;
    let mut out = vec![0.0; 2 * c * disparities * plane];
    for ci in 0..c {
        let l = &lv.data()[ci * plane..(ci + 1) * plane];
        let r = &rv.data()[ci * plane..(ci + 1) * plane];
        for d in 0..disparities {
            out[(ci * disparities + d) * plane..][..plane].copy_from_slice(l);
            let dst = &mut out[((c + ci) * disparities + d) * plane..][..plane];
            for i in 0..h {
                for j in d..w {
                    dst[i * w + j] = r[i * w + j - d];
                }
            }
        }
    }
    let needs = [left.requires_grad(), right.requires_grad()];
    let ids = [left.id, right.id];
    let shape = lv.shape().to_vec();
    Ok(left.tape.push(
        Tensor::new(&[2 * c, disparities, plane], out)?,
        needs[0] || needs[1],
        Some(Box::new(move |g, sink| {
            let g = g.data();
            if needs[0] {
                sink.accumulate_with(ids[0], &shape, |dx| {
                    for ci in 0..c {
                        let dst = &mut dx[ci * plane..(ci + 1) * plane];
                        for d in 0..disparities {
                            let src = &g[(ci * disparities + d) * plane..][..plane];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            if needs[1] {
                sink.accumulate_with(ids[1], &shape, |dx| {
                    for ci in 0..c {
                        let dst = &mut dx[ci * plane..(ci + 1) * plane];
                        for d in 0..disparities {
                            let src = &g[((c + ci) * disparities + d) * plane..][..plane];
                            for i in 0..h {
                                for j in d..w {
                                    dst[i * w + j - d] += src[i * w + j];
                                }
                            }
                        }
                    }
                });
            }
        })),
    ))
}

/// `conv2d(concat_volume(left, right, D), weight, bias, 1, 0)` without
/// materialising the stacked volume: the 1×1 projection of each half is
/// computed once per pixel and shifted per disparity.
///
/// `weight: [F, 2C, 1, 1]`, `bias: [F]`; output `[F, D, h·w]`.
pub fn concat_fuse<'t>(
    left: Var<'t>,
    right: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    disparities: usize,
) -> Result<Var<'t>> {
    const OP: &str = "concat_fuse";
    left.same_tape(right)?;
    left.same_tape(weight)?;
    left.same_tape(bias)?;
    let (lv, rv, wv, bv) = (left.value(), right.value(), weight.value(), bias.value());
    let [c, h, w] = check_pair(OP, &lv, &rv, disparities)?;
    wv.expect_rank(OP, 4)?;
    let f = wv.shape()[0];
    wv.expect_shape(OP, &[f, 2 * c, 1, 1])?;
    bv.expect_shape(OP, &[f])?;
    let plane = h * w;
    let mut a = vec![0.0; f * plane];
    let mut b = vec![0.0; f * plane];
    gemm(f, c, plane, wv.data(), 2 * c, 1, lv.data(), plane, 1, 0.0, &mut a);
    gemm(f, c, plane, &wv.data()[c..], 2 * c, 1, rv.data(), plane, 1, 0.0, &mut b);
    let mut out = vec![0.0; f * disparities * plane];
    for fi in 0..f {
        let (af, bf) = (&a[fi * plane..(fi + 1) * plane], &b[fi * plane..(fi + 1) * plane]);
        for d in 0..disparities {
            let dst = &mut out[(fi * disparities + d) * plane..][..plane];
            for (o, av) in dst.iter_mut().zip(af) {
                *o = av + bv.data()[fi];
            }
            for i in 0..h {
                let row = i * w;
                for j in d..w {
                    dst[row + j] += bf[row + j - d];
                }
            }
        }
    }
    let needs = [
        left.requires_grad(),
        right.requires_grad(),
        weight.requires_grad(),
        bias.requires_grad(),
    ];
    let ids = [left.id, right.id, weight.id, bias.id];
    let (feat_shape, w_shape) = (lv.shape().to_vec(), wv.shape().to_vec());
    Ok(left.tape.push(
        Tensor::new(&[f, disparities, plane], out)?,
        needs.iter().any(|&n| n),
        Some(Box::new(move |g, sink| {
            let g = g.data();
            let mut ga = vec![0.0; f * plane];
            let mut gb = vec![0.0; f * plane];
            for fi in 0..f {
                let (gaf, gbf) = (
                    &mut ga[fi * plane..(fi + 1) * plane],
                    &mut gb[fi * plane..(fi + 1) * plane],
                );
                for d in 0..disparities {
                    let src = &g[(fi * disparities + d) * plane..][..plane];
                    gaf.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    for i in 0..h {
                        let row = i * w;
                        for j in d..w {
                            gbf[row + j - d] += src[row + j];
                        }
                    }
                }
            }
            if needs[0] {
                sink.accumulate_with(ids[0], &feat_shape, |dx| {
                    gemm(c, f, plane, wv.data(), 1, 2 * c, &ga, plane, 1, 1.0, dx);
                });
            }
            if needs[1] {
                sink.accumulate_with(ids[1], &feat_shape, |dx| {
                    gemm(c, f, plane, &wv.data()[c..], 1, 2 * c, &gb, plane, 1, 1.0, dx);
                });
            }
            if needs[2] {
                let mut dl = vec![0.0; f * c];
                let mut dr = vec![0.0; f * c];
                gemm(f, plane, c, &ga, plane, 1, lv.data(), 1, plane, 0.0, &mut dl);
                gemm(f, plane, c, &gb, plane, 1, rv.data(), 1, plane, 0.0, &mut dr);
                let mut dw = Vec::with_capacity(f * 2 * c);
                for fi in 0..f {
                    dw.extend_from_slice(&dl[fi * c..(fi + 1) * c]);
                    dw.extend_from_slice(&dr[fi * c..(fi + 1) * c]);
                }
                sink.accumulate(ids[2], Tensor::new(&w_shape, dw).expect("shape"));
            }
            if needs[3] {
                let db = ga.chunks(plane).map(|r| r.iter().sum()).collect();
                sink.accumulate(ids[3], Tensor::new(&[f], db).expect("shape"));
            }
        })),
    ))
}
