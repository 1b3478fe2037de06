//! Adversarial fine-tuning, architecture variants and black-box transfer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::PerturbationPair;
use crate::error::{Error, Result};
use crate::eval::{evaluate_attack, par_map, Attack};
use crate::metrics::{metrics_csv, MetricReport, MetricRow};
use crate::net::{ConvMode, CostMode, LossSpec, Sgd, StereoNet, StereoNetConfig, TrainConfig, TrainReport};
use crate::scene::StereoSample;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Base rate; see [`scheduled_lr`].
    pub lr: f64,
    /// Chance that a step sees a perturbed pair.
    pub probability: f64,
    pub max_grad_norm: Option<f64>,
    pub offset_lr_scale: f64,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 9,
            lr: 0.1,
            probability: 0.5,
            max_grad_norm: Some(1.0),
            offset_lr_scale: 0.01,
            loss: LossSpec::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Defaults with the offset-branch rate used to train `net`.
    pub fn for_net(net: &StereoNetConfig) -> Self {
        FinetuneConfig {
            offset_lr_scale: TrainConfig::for_net(net).offset_lr_scale,
            seed: net.seed,
            ..Default::default()
        }
    }
}

/// `lr` for the first third of the epochs, `lr/2` for the second, `lr/5`
/// for the rest.
pub fn scheduled_lr(lr: f64, epoch: usize, epochs: usize) -> f64 {
    if 3 * epoch < epochs {
        lr
    } else if 3 * epoch < 2 * epochs {
        lr / 2.0
    } else {
        lr / 5.0
    }
}

/// Fine-tunes against ground truth, perturbing each step's pair with a
/// uniformly chosen SUP with probability `cfg.probability`.
pub fn finetune_adversarial(
    net: &StereoNet,
    data: &[StereoSample],
    sups: &[PerturbationPair],
    cfg: &FinetuneConfig,
) -> Result<(StereoNet, TrainReport)> {
    if sups.is_empty() {
        return Err(Error::Invalid("fine-tuning needs at least one perturbation".into()));
    }
    if data.is_empty() {
        return Err(Error::Invalid("fine-tuning set is empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.probability) {
        return Err(Error::Config(format!(
            "probability must lie in [0, 1], got {}",
            cfg.probability
        )));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let opt = Sgd {
            lr: scheduled_lr(cfg.lr, epoch, cfg.epochs),
            max_grad_norm: cfg.max_grad_norm,
            offset_lr_scale: cfg.offset_lr_scale,
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &data[i];
            let perturb = rng.random_bool(cfg.probability);
            let pick = rng.random_range(0..sups.len());
            let (l, r) = if perturb {
                sups[pick].apply(s)?
            } else {
                (s.left.clone(), s.right.clone())
            };
            total += net.sgd_step(&l, &r, &s.gt_disparity, &cfg.loss, &opt)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok((net, TrainReport { epoch_losses }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub id: String,
    pub config: StereoNetConfig,
}

/// Encoder layers made deformable in the grid's deformable cells.
pub fn default_deformable_layers(encoder_layers: usize) -> Vec<usize> {
    (encoder_layers.saturating_sub(2)..encoder_layers).collect()
}

/// The {concat, correlation} × {standard, deformable} grid followed by a
/// concat sweep over the number of deformable layers (none, the last two,
/// all). Sweep entries may repeat grid configs; use [`unique_variants`] to
/// train each config once.
pub fn variant_matrix(base: &StereoNetConfig) -> Vec<Variant> {
    let n = base.encoder_layers;
    let make = |cost_mode, layers: Vec<usize>| {
        let cfg = StereoNetConfig {
            cost_mode,
            conv_mode: ConvMode::Standard,
            deformable_layers: Default::default(),
            ..base.clone()
        };
        cfg.with_deformable(layers)
    };
    let mut out = Vec::new();
    for cost in [CostMode::Concat, CostMode::Correlation] {
        for (tag, layers) in [("std", vec![]), ("def", default_deformable_layers(n))] {
            out.push(Variant {
                id: format!("{}-{tag}", cost.as_str()),
                config: make(cost, layers),
            });
        }
    }
    let mut counts = vec![0, default_deformable_layers(n).len(), n];
    counts.dedup();
    for k in counts {
        out.push(Variant {
            id: format!("sweep-dc{k}"),
            config: make(CostMode::Concat, (n - k..n).collect()),
        });
    }
    out
}

/// First occurrence of every distinct config, keeping its id.
pub fn unique_variants(variants: &[Variant]) -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    for v in variants {
        if !out.iter().any(|u| u.config == v.config) {
            out.push(v.clone());
        }
    }
    out
}

/// A perturbation labelled with the network it was crafted on.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSup {
    pub id: String,
    pub source_net: String,
    pub sup: PerturbationPair,
}

/// Rows are networks; column 0 is clean, column `k + 1` is `sups[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub net_ids: Vec<String>,
    pub sup_ids: Vec<String>,
    pub sup_sources: Vec<String>,
    pub sup_epsilons: Vec<f64>,
    pub cells: Vec<Vec<MetricReport>>,
}

pub const TRANSFER_CSV_HEADER: &str = "net_id,attack_id,source_net,epsilon,d1,epe,n_valid";

impl TransferMatrix {
    pub fn clean(&self, row: usize) -> &MetricReport {
        &self.cells[row][0]
    }

    /// Mean attacked D1 of one network over all SUP columns.
    pub fn mean_attacked_d1(&self, row: usize) -> f64 {
        let cols = &self.cells[row][1..];
        cols.iter().map(|r| r.d1).sum::<f64>() / cols.len() as f64
    }

    pub fn row_of(&self, net_id: &str) -> Option<usize> {
        self.net_ids.iter().position(|n| n == net_id)
    }

    /// Number of rows whose self-attack entries are at least every
    /// cross-network entry, over rows that have both.
    pub fn self_attack_dominance(&self) -> (usize, usize) {
        let (mut hits, mut rows) = (0, 0);
        for (r, net) in self.net_ids.iter().enumerate() {
            let (mut own, mut other) = (Vec::new(), Vec::new());
            for (k, src) in self.sup_sources.iter().enumerate() {
                let d1 = self.cells[r][k + 1].d1;
                if src == net {
                    own.push(d1)
                } else {
                    other.push(d1)
                }
            }
            if own.is_empty() || other.is_empty() {
                continue;
            }
            rows += 1;
            let best_other = other.iter().cloned().fold(f64::MIN, f64::max);
            hits += (own.iter().cloned().fold(f64::MIN, f64::max) >= best_other) as usize;
        }
        (hits, rows)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(TRANSFER_CSV_HEADER);
        s.push('\n');
        for (r, net) in self.net_ids.iter().enumerate() {
            for (c, m) in self.cells[r].iter().enumerate() {
                let (id, src, eps) = if c == 0 {
                    ("clean", "", 0.0)
                } else {
                    (
                        self.sup_ids[c - 1].as_str(),
                        self.sup_sources[c - 1].as_str(),
                        self.sup_epsilons[c - 1],
                    )
                };
                let _ = writeln!(s, "{net},{id},{src},{eps},{},{},{}", m.d1, m.epe, m.n_valid);
            }
        }
        s
    }

    pub fn rows(&self, experiment_id: &str) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for (r, net) in self.net_ids.iter().enumerate() {
            for (c, m) in self.cells[r].iter().enumerate() {
                let (attack_id, epsilon) = if c == 0 {
                    ("clean".to_string(), 0.0)
                } else {
                    (self.sup_ids[c - 1].clone(), self.sup_epsilons[c - 1])
                };
                out.push(MetricRow {
                    experiment_id: experiment_id.into(),
                    net_id: net.clone(),
                    attack_id,
                    epsilon,
                    report: *m,
                });
            }
        }
        out
    }
}

/// Every network against the clean set and every SUP. Cells are evaluated
/// on up to `threads` workers; the result does not depend on that count.
pub fn transfer_eval(
    nets: &[(String, StereoNet)],
    sups: &[TaggedSup],
    data: &[StereoSample],
    threads: usize,
) -> Result<TransferMatrix> {
    let cols = sups.len() + 1;
    let cells = par_map(nets.len() * cols, threads, |k| {
        let (r, c) = (k / cols, k % cols);
        let attack = if c == 0 {
            Attack::Clean
        } else {
            Attack::Sup(&sups[c - 1].sup)
        };
        evaluate_attack(&nets[r].1, data, attack, 1).map(|e| e.report)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TransferMatrix {
        net_ids: nets.iter().map(|(id, _)| id.clone()).collect(),
        sup_ids: sups.iter().map(|s| s.id.clone()).collect(),
        sup_sources: sups.iter().map(|s| s.source_net.clone()).collect(),
        sup_epsilons: sups.iter().map(|s| s.sup.epsilon).collect(),
        cells: cells.chunks(cols).map(|c| c.to_vec()).collect(),
    })
}

/// Metric rows of one experiment with the metadata needed to rerun them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackReport {
    pub experiment_id: String,
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<MetricRow>,
}

impl AttackReport {
    pub fn csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("experiment {}\n", self.experiment_id);
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "  {k} = {v}");
        }
        let clean: BTreeMap<&str, f64> = self
            .rows
            .iter()
            .filter(|r| r.attack_id == "clean")
            .map(|r| (r.net_id.as_str(), r.report.d1))
            .collect();
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<16} {:<24} eps {:<7} D1 {:6.2}%  EPE {:6.3}",
                r.net_id,
                r.attack_id,
                r.epsilon,
                100.0 * r.report.d1,
                r.report.epe
            );
            match clean.get(r.net_id.as_str()) {
                Some(c) if r.attack_id != "clean" => {
                    let _ = writeln!(s, "  ({:+.2} pp)", 100.0 * (r.report.d1 - c));
                }
                _ => s.push('\n'),
            }
        }
        s
    }
}
