//! Disparity-distribution and feature-correlation probes.

use std::fmt::Write as _;

use supforge_tensor::Tensor;

use crate::attack::PerturbationPair;
use crate::error::{Error, Result};
use crate::net::StereoNet;
use crate::scene::StereoSample;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// Fraction of all pixels per bin; values outside `[lo, hi)` land in the
    /// end bins.
    pub probs: Vec<f64>,
    pub mean: f64,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.probs.len() as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.bin_width()
    }
}

pub fn disparity_histogram(preds: &[Tensor], n_bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if preds.is_empty() {
        return Err(Error::Invalid("histogram of no maps".into()));
    }
    if n_bins == 0 || !(hi > lo) {
        return Err(Error::Invalid(format!(
            "bad histogram range [{lo}, {hi}) with {n_bins} bins"
        )));
    }
    let mut counts = vec![0usize; n_bins];
    let mut total = 0usize;
    let mut sum = 0.0;
    let width = (hi - lo) / n_bins as f64;
    for p in preds {
        for &v in p.data() {
            let k = ((v - lo) / width).floor();
            let k = if k < 0.0 { 0 } else { (k as usize).min(n_bins - 1) };
            counts[k] += 1;
            total += 1;
            sum += v;
        }
    }
    Ok(Histogram {
        lo,
        hi,
        probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        mean: sum / total as f64,
    })
}

/// Pearson correlation of two equally shaped value sets.
pub fn pearson_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!(
            "pearson over {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Invalid("pearson of a constant".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!(
            "pearson of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    pearson_slices(a.data(), b.data())
}

/// One Pearson value per encoder layer, averaged over samples.
pub type CorrelationTrace = Vec<f64>;

fn mean_traces(per_sample: Vec<Vec<f64>>) -> CorrelationTrace {
    let n = per_sample.len() as f64;
    let layers = per_sample[0].len();
    (0..layers)
        .map(|l| per_sample.iter().map(|t| t[l]).sum::<f64>() / n)
        .collect()
}

fn nonempty(samples: &[StereoSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to analyse".into()));
    }
    Ok(())
}

/// Clean-versus-perturbed feature correlation per layer, for the left and
/// the right view.
pub fn layer_correlation(
    net: &StereoNet,
    samples: &[StereoSample],
    sup: &PerturbationPair,
) -> Result<(CorrelationTrace, CorrelationTrace)> {
    nonempty(samples)?;
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for s in samples {
        let (pl, pr) = sup.apply(s)?;
        for (clean, pert, out) in [(&s.left, &pl, &mut left), (&s.right, &pr, &mut right)] {
            let (fc, fp) = (net.features(clean)?, net.features(pert)?);
            out.push(
                fc.iter()
                    .zip(&fp)
                    .map(|(a, b)| pearson(a, b))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    Ok((mean_traces(left), mean_traces(right)))
}

/// Linear interpolation along a feature row; `None` when out of bounds.
fn sample_row(row: &[f64], x: f64) -> Option<f64> {
    if x < 0.0 || x > (row.len() - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as usize;
    let t = x - x0 as f64;
    if t == 0.0 {
        return Some(row[x0]);
    }
    Some(row[x0] * (1.0 - t) + row[x0 + 1] * t)
}

/// Left features paired with right features warped by ground truth, over
/// visible in-bounds positions. Returns the two flattened value lists and
/// the number of positions kept.
pub fn registered_pairs(left: &Tensor, right: &Tensor, sample: &StereoSample) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (c, h, w) = (left.shape()[0], left.shape()[1], left.shape()[2]);
    let (hh, ww) = (sample.height(), sample.width());
    if hh % h != 0 || ww % w != 0 || hh / h != ww / w {
        return Err(Error::Invalid(format!(
            "feature grid {h}x{w} does not tile image {hh}x{ww}"
        )));
    }
    let scale = hh / h;
    let mut keep = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let q = (i * scale) * ww + j * scale;
            if !sample.visible[q] {
                continue;
            }
            let x = j as f64 - sample.gt_disparity.data()[q] / scale as f64;
            if x >= 0.0 && x <= (w - 1) as f64 {
                keep.push((i, j, x));
            }
        }
    }
    let (mut a, mut b) = (Vec::with_capacity(c * keep.len()), Vec::with_capacity(c * keep.len()));
    for ch in 0..c {
        for &(i, j, x) in &keep {
            let base = (ch * h + i) * w;
            a.push(left.data()[base + j]);
            b.push(sample_row(&right.data()[base..base + w], x).expect("kept positions are in bounds"));
        }
    }
    Ok((a, b, keep.len()))
}

/// Registered-point correlation per layer on clean and on perturbed inputs.
pub fn registered_correlation(
    net: &StereoNet,
    samples: &[StereoSample],
    sup: &PerturbationPair,
) -> Result<(CorrelationTrace, CorrelationTrace)> {
    nonempty(samples)?;
    let (mut clean, mut perturbed) = (Vec::new(), Vec::new());
    for s in samples {
        let (pl, pr) = sup.apply(s)?;
        for ((l, r), out) in [((&s.left, &s.right), &mut clean), ((&pl, &pr), &mut perturbed)] {
            let (fl, fr) = (net.features(l)?, net.features(r)?);
            let mut trace = Vec::with_capacity(fl.len());
            for (a, b) in fl.iter().zip(&fr) {
                let (va, vb, n) = registered_pairs(a, b, s)?;
                let (h, w) = (a.shape()[1], a.shape()[2]);
                if 2 * n <= h * w {
                    return Err(Error::Invalid(format!(
                        "only {n} of {} registered positions visible",
                        h * w
                    )));
                }
                trace.push(pearson_slices(&va, &vb)?);
            }
            out.push(trace);
        }
    }
    Ok((mean_traces(clean), mean_traces(perturbed)))
}

pub fn histogram_csv(named: &[(&str, &Histogram)]) -> String {
    let mut s = String::from("series,bin_lo,bin_hi,fraction\n");
    for (name, h) in named {
        for (k, p) in h.probs.iter().enumerate() {
            let lo = h.lo + k as f64 * h.bin_width();
            let _ = writeln!(s, "{name},{lo},{},{p}", lo + h.bin_width());
        }
    }
    s
}

/// gnuplot-friendly columns: bin centre then one column per series.
pub fn histogram_dat(named: &[(&str, &Histogram)]) -> String {
    let mut s = String::from("# center");
    for (name, _) in named {
        s += &format!(" {name}");
    }
    s.push('\n');
    if let Some((_, first)) = named.first() {
        for k in 0..first.probs.len() {
            s += &first.bin_center(k).to_string();
            for (_, h) in named {
                s += &format!(" {}", h.probs[k]);
            }
            s.push('\n');
        }
    }
    s
}

pub fn trace_csv(named: &[(&str, &CorrelationTrace)]) -> String {
    let mut s = String::from("series,layer,correlation\n");
    for (name, t) in named {
        for (l, v) in t.iter().enumerate() {
            let _ = writeln!(s, "{name},{l},{v}");
        }
    }
    s
}

pub fn trace_dat(named: &[(&str, &CorrelationTrace)]) -> String {
    let mut s = String::from("# layer");
    for (name, _) in named {
        s += &format!(" {name}");
    }
    s.push('\n');
    if let Some((_, first)) = named.first() {
        for l in 0..first.len() {
            s += &l.to_string();
            for (_, t) in named {
                s += &format!(" {}", t[l]);
            }
            s.push('\n');
        }
    }
    s
}
