//! Clean and attacked evaluation of a network over a sample set.

use std::collections::BTreeMap;
use std::thread;

use supforge_tensor::Tensor;

use crate::attack::{fgsm_image_specific, noise_attack, FgsmConfig, NoiseKind, PerturbationPair};
use crate::error::{Error, Result};
use crate::metrics::{region_accumulators, MetricAccumulator, MetricReport};
use crate::net::StereoNet;
use crate::scene::{RegionLabel, StereoSample};

/// What is done to each sample before prediction. Seeds of per-sample
/// attacks are offset by the sample index.
#[derive(Clone, Copy, Debug)]
pub enum Attack<'a> {
    Clean,
    Sup(&'a PerturbationPair),
    Noise { kind: NoiseKind, epsilon: f64, seed: u64 },
    Fgsm(&'a FgsmConfig),
}

impl Attack<'_> {
    pub fn inputs(&self, net: &StereoNet, index: usize, sample: &StereoSample) -> Result<(Tensor, Tensor)> {
        match *self {
            Attack::Clean => Ok((sample.left.clone(), sample.right.clone())),
            Attack::Sup(sup) => sup.apply(sample),
            Attack::Noise { kind, epsilon, seed } => noise_attack(
                &sample.left,
                &sample.right,
                kind,
                epsilon,
                seed.wrapping_add(index as u64),
            ),
            Attack::Fgsm(cfg) => {
                let cfg = FgsmConfig {
                    seed: cfg.seed.wrapping_add(index as u64),
                    ..cfg.clone()
                };
                fgsm_image_specific(net, sample, &cfg)
            }
        }
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            Attack::Clean => 0.0,
            Attack::Sup(s) => s.epsilon,
            Attack::Noise { epsilon, .. } => epsilon,
            Attack::Fgsm(c) => c.epsilon,
        }
    }
}

/// Maps `f` over `0..n` on up to `threads` scoped workers. Output order is
/// the index order whatever the thread count.
pub fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub regions: BTreeMap<RegionLabel, MetricReport>,
    /// Mean predicted disparity over all pixels.
    pub mean_disparity: f64,
    pub predictions: Vec<Tensor>,
}

/// Pooled metrics of `net` on `samples` under `attack`.
pub fn evaluate_attack(
    net: &StereoNet,
    samples: &[StereoSample],
    attack: Attack<'_>,
    threads: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let predictions = par_map(samples.len(), threads, |i| {
        let (l, r) = attack.inputs(net, i, &samples[i])?;
        net.predict(&l, &r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut total = MetricAccumulator::default();
    let mut regions: BTreeMap<RegionLabel, MetricAccumulator> = BTreeMap::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, s) in predictions.iter().zip(samples) {
        total.add_map(p, &s.gt_disparity)?;
        for (k, a) in region_accumulators(p, &s.gt_disparity, &s.region_labels)? {
            regions.entry(k).or_default().merge(&a);
        }
        sum += p.data().iter().sum::<f64>();
        count += p.numel();
    }
    Ok(Evaluation {
        report: total.report()?,
        regions: regions
            .into_iter()
            .map(|(k, a)| Ok((k, a.report()?)))
            .collect::<Result<_>>()?,
        mean_disparity: sum / count as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        for threads in [1, 2, 3, 8] {
            assert_eq!(par_map(7, threads, |i| i * i), vec![0, 1, 4, 9, 16, 25, 36]);
        }
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
