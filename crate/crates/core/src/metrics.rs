//! KITTI-style D1-error and end-point error over valid ground-truth pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use supforge_tensor::Tensor;

use crate::error::{Error, Result};
use crate::scene::RegionLabel;

/// Absolute error above which a pixel may count as erroneous.
pub const D1_ABS_THRESHOLD: f64 = 3.0;
/// Relative error above which a pixel may count as erroneous.
pub const D1_REL_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub d1: f64,
    pub epe: f64,
    pub n_valid: usize,
}

fn check_shapes(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Invalid(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Both error conditions must hold.
pub fn is_erroneous(pred: f64, gt: f64) -> bool {
    let delta = (pred - gt).abs();
    delta > D1_ABS_THRESHOLD && delta / gt > D1_REL_THRESHOLD
}

/// Running sums; merge-able so per-sample reports can be pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    pub erroneous: usize,
    pub abs_error_sum: f64,
    pub n_valid: usize,
}

impl MetricAccumulator {
    pub fn add_map(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        check_shapes(pred, gt)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g > 0.0 {
                self.push(p, g);
            }
        }
        Ok(())
    }

    fn push(&mut self, p: f64, g: f64) {
        self.n_valid += 1;
        self.abs_error_sum += (p - g).abs();
        self.erroneous += is_erroneous(p, g) as usize;
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.erroneous += other.erroneous;
        self.abs_error_sum += other.abs_error_sum;
        self.n_valid += other.n_valid;
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.n_valid == 0 {
            return Err(Error::NoValidPixels);
        }
        Ok(MetricReport {
            d1: self.erroneous as f64 / self.n_valid as f64,
            epe: self.abs_error_sum / self.n_valid as f64,
            n_valid: self.n_valid,
        })
    }
}

pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add_map(pred, gt)?;
    acc.report()
}

/// Pooled metrics over many maps (pixel-weighted, not a mean of per-map values).
pub fn evaluate_many<'a>(pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for (p, g) in pairs {
        acc.add_map(p, g)?;
    }
    acc.report()
}

pub fn d1_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(evaluate(pred, gt)?.d1)
}

pub fn epe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(evaluate(pred, gt)?.epe)
}

/// Per-region accumulators; regions without valid pixels are absent.
pub fn region_accumulators(
    pred: &Tensor,
    gt: &Tensor,
    labels: &[RegionLabel],
) -> Result<BTreeMap<RegionLabel, MetricAccumulator>> {
    check_shapes(pred, gt)?;
    if labels.len() != gt.numel() {
        return Err(Error::Invalid(format!(
            "{} labels for {} pixels",
            labels.len(),
            gt.numel()
        )));
    }
    let mut out: BTreeMap<RegionLabel, MetricAccumulator> = BTreeMap::new();
    for ((&p, &g), &l) in pred.data().iter().zip(gt.data()).zip(labels) {
        if g > 0.0 {
            out.entry(l).or_default().push(p, g);
        }
    }
    Ok(out)
}

/// D1-error restricted to each region's valid pixels.
pub fn region_error(pred: &Tensor, gt: &Tensor, labels: &[RegionLabel]) -> Result<BTreeMap<RegionLabel, f64>> {
    region_accumulators(pred, gt, labels)?
        .into_iter()
        .map(|(k, a)| Ok((k, a.report()?.d1)))
        .collect()
}

/// One row of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub experiment_id: String,
    pub net_id: String,
    pub attack_id: String,
    pub epsilon: f64,
    pub report: MetricReport,
}

pub const METRIC_CSV_HEADER: &str = "experiment_id,net_id,attack_id,epsilon,d1,epe,n_valid";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRIC_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.experiment_id, r.net_id, r.attack_id, r.epsilon, r.report.d1, r.report.epe, r.report.n_valid
        );
    }
    s
}
