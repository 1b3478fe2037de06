//! One function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use supforge::analysis::{
    disparity_histogram, histogram_csv, histogram_dat, layer_correlation, registered_correlation, trace_csv, trace_dat,
};
use supforge::attack::{craft_sup, CraftConfig, CraftInit, CraftTarget, FgsmConfig, NoiseKind, PerturbationPair};
use supforge::defense::{
    finetune_adversarial, transfer_eval, unique_variants, variant_matrix, AttackReport, FinetuneConfig, TaggedSup,
};
use supforge::eval::{evaluate_attack, Attack, Evaluation};
use supforge::metrics::{metrics_csv, MetricReport, MetricRow, METRIC_CSV_HEADER};
use supforge::net::{train, TrainConfig};
use supforge::netpbm::save_split;
use supforge::scene::{generate_dataset, SceneConfig};
use supforge::{CostMode, StereoNet, StereoNetConfig};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::experiment::{Experiment, CSV_DIR, DATA_DIR, IMAGE_DIR, REPORT_DIR};

/// Offset between the training and validation base seeds.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "SUPFORGE_THREADS";

pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

pub fn scene_config(cfg: &Config) -> Result<SceneConfig> {
    let scene = SceneConfig {
        height: cfg.get("data.height")?,
        width: cfg.get("data.width")?,
        d_max: cfg.get("data.d_max")?,
        min_sprites: cfg.get("data.min_sprites")?,
        max_sprites: cfg.get("data.max_sprites")?,
        ..SceneConfig::default()
    };
    scene.validate()?;
    Ok(scene)
}

pub fn net_config(cfg: &Config, seed: u64) -> Result<StereoNetConfig> {
    let cost_mode =
        CostMode::parse(cfg.raw("net.cost_mode")).ok_or_else(|| cfg.bad("net.cost_mode", "concat or correlation"))?;
    let net = StereoNetConfig {
        encoder_layers: cfg.get("net.encoder_layers")?,
        channels: cfg.get("net.channels")?,
        downsample: cfg.get("net.downsample")?,
        d_max: cfg.get("net.d_max")?,
        cost_mode,
        use_isa: cfg.get("net.use_isa")?,
        seed,
        ..StereoNetConfig::default()
    }
    .with_deformable(cfg.list::<usize>("net.deformable_layers")?);
    net.validate()?;
    Ok(net)
}

pub fn train_config(cfg: &Config, net: &StereoNetConfig, seed: u64) -> Result<TrainConfig> {
    let base = TrainConfig::for_net(net);
    Ok(TrainConfig {
        epochs: cfg.get("train.epochs")?,
        lr: cfg.get("train.lr")?,
        max_grad_norm: cfg.optional("train.max_grad_norm")?,
        offset_lr_scale: cfg.optional("train.offset_lr_scale")?.unwrap_or(base.offset_lr_scale),
        seed,
        ..base
    })
}

pub fn craft_config(cfg: &Config, epsilon: f64, seed: u64) -> Result<CraftConfig> {
    let alpha = cfg.get::<f64>("craft.alpha_ratio")? * epsilon;
    let target = match cfg.raw("craft.target") {
        "pseudo_gt" => CraftTarget::PseudoGroundTruth,
        "gt" => CraftTarget::GroundTruth,
        _ => return Err(cfg.bad("craft.target", "pseudo_gt or gt")),
    };
    let init = match cfg.raw("craft.init") {
        "zero" => CraftInit::Zero,
        "uniform" => CraftInit::Uniform { scale: alpha },
        _ => return Err(cfg.bad("craft.init", "zero or uniform")),
    };
    let craft = CraftConfig {
        epsilon,
        alpha,
        tile_h: cfg.get("craft.tile_h")?,
        tile_w: cfg.get("craft.tile_w")?,
        passes: cfg.get("craft.passes")?,
        seed,
        target,
        init,
        ..CraftConfig::default()
    };
    craft.validate()?;
    Ok(craft)
}

pub fn finetune_config(cfg: &Config, net: &StereoNetConfig, seed: u64) -> Result<FinetuneConfig> {
    Ok(FinetuneConfig {
        epochs: cfg.get("finetune.epochs")?,
        lr: cfg.get("finetune.lr")?,
        probability: cfg.get("finetune.probability")?,
        max_grad_norm: cfg.optional("train.max_grad_norm")?,
        seed,
        ..FinetuneConfig::for_net(net)
    })
}

fn finite(what: &str, r: &MetricReport) -> Result<()> {
    if r.d1.is_finite() && r.epe.is_finite() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{what} produced non-finite metrics")))
    }
}

fn evaluate(net: &StereoNet, data: &[supforge::StereoSample], attack: Attack<'_>, what: &str) -> Result<Evaluation> {
    let e = evaluate_attack(net, data, attack, threads()?)?;
    finite(what, &e.report)?;
    Ok(e)
}

fn row(cfg: &Config, net_id: &str, attack_id: &str, epsilon: f64, report: MetricReport) -> MetricRow {
    MetricRow {
        experiment_id: cfg.raw("experiment.id").to_string(),
        net_id: net_id.to_string(),
        attack_id: attack_id.to_string(),
        epsilon,
        report,
    }
}

fn sup_meta(net_name: &str, net_hash: &str, c: &CraftConfig) -> BTreeMap<String, String> {
    [
        ("source_net", net_name.to_string()),
        ("source_net_sha256", net_hash.to_string()),
        ("seed", c.seed.to_string()),
        ("alpha", c.alpha.to_string()),
        ("passes", c.passes.to_string()),
        ("target", format!("{:?}", c.target)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn gen_data(exp: &mut Experiment, cfg: &Config, seed: u64) -> Result<()> {
    let scene = scene_config(cfg)?;
    let data_dir = exp.path(DATA_DIR);
    if data_dir.exists() {
        fs::remove_dir_all(&data_dir).map_err(|e| CliError::io(&data_dir, e))?;
    }
    let mut stats = String::from("split,count,mean_occluded_fraction,mean_disparity\n");
    for (split, count, base) in [
        ("train", cfg.get::<usize>("data.train_count")?, seed),
        ("val", cfg.get("data.val_count")?, seed.wrapping_add(VAL_SEED_OFFSET)),
    ] {
        let samples = generate_dataset(&scene, count, base)?;
        for f in save_split(&data_dir, split, &samples)? {
            exp.note_written(&f)?;
        }
        let n = samples.len().max(1) as f64;
        let occ = samples.iter().map(|s| s.occluded_fraction()).sum::<f64>() / n;
        let disp = samples.iter().map(|s| s.gt_disparity.mean()).sum::<f64>() / n;
        let _ = writeln!(stats, "{split},{count},{occ},{disp}");
    }
    exp.write(&format!("{CSV_DIR}/data-stats.csv"), stats.as_bytes())
}

fn train_one(
    cfg: &Config,
    net_cfg: &StereoNetConfig,
    seed: u64,
    data: &[supforge::StereoSample],
) -> Result<(StereoNet, Vec<f64>)> {
    let tc = train_config(cfg, net_cfg, seed)?;
    let (net, report) = train(&StereoNet::init(net_cfg)?, data, &tc)?;
    if report.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numeric("training loss".into()));
    }
    Ok((net, report.epoch_losses))
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}

pub fn train_net(exp: &mut Experiment, cfg: &Config, seed: u64, name: &str) -> Result<()> {
    let net_cfg = net_config(cfg, seed)?;
    let train_set = exp.load_split("train")?;
    let val = exp.load_split("val")?;
    let (net, losses) = train_one(cfg, &net_cfg, seed, &train_set)?;
    exp.save_net(name, &net)?;
    exp.write(
        &format!("{CSV_DIR}/train-{name}-loss.csv"),
        losses_csv(&losses).as_bytes(),
    )?;
    let e = evaluate(&net, &val, Attack::Clean, "validation")?;
    let rows = [row(cfg, name, "clean", 0.0, e.report)];
    exp.write(
        &format!("{CSV_DIR}/train-{name}-val.csv"),
        metrics_csv(&rows).as_bytes(),
    )
}

pub fn eval_net(exp: &mut Experiment, cfg: &Config, name: &str, split: &str) -> Result<()> {
    let (net, _) = exp.load_net(name)?;
    let data = exp.load_split(split)?;
    let e = evaluate(&net, &data, Attack::Clean, "evaluation")?;
    let rows = [row(cfg, name, "clean", 0.0, e.report)];
    exp.write(
        &format!("{CSV_DIR}/eval-{name}-{split}.csv"),
        metrics_csv(&rows).as_bytes(),
    )
}

fn save_sup_images(exp: &mut Experiment, name: &str, sup: &PerturbationPair) -> Result<()> {
    let (l, r) = sup.render_ppm();
    exp.write(&format!("{IMAGE_DIR}/{name}_left.ppm"), &l)?;
    exp.write(&format!("{IMAGE_DIR}/{name}_right.ppm"), &r)
}

pub fn craft(exp: &mut Experiment, cfg: &Config, seed: u64, net_name: &str, sup_name: &str) -> Result<()> {
    let (net, net_hash) = exp.load_net(net_name)?;
    let data = exp.load_split("train")?;
    let cc = craft_config(cfg, cfg.get("craft.epsilon")?, seed)?;
    let (sup, log) = craft_sup(&net, &data, &cc)?;
    if log.losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numeric("crafting loss".into()));
    }
    exp.save_sup(sup_name, &sup, &sup_meta(net_name, &net_hash, &cc))?;
    save_sup_images(exp, sup_name, &sup)?;
    let mut s = String::from("step,loss,linf_left,linf_right\n");
    for (k, (loss, (l, r))) in log.losses.iter().zip(&log.linf).enumerate() {
        let _ = writeln!(s, "{k},{loss},{l},{r}");
    }
    exp.write(&format!("{CSV_DIR}/craft-{sup_name}.csv"), s.as_bytes())
}

pub fn attack(exp: &mut Experiment, cfg: &Config, seed: u64, net_name: &str) -> Result<()> {
    let (net, net_hash) = exp.load_net(net_name)?;
    let train_set = exp.load_split("train")?;
    let val = exp.load_split("val")?;
    let epsilons: Vec<f64> = cfg.list("attack.epsilons")?;
    if epsilons.is_empty() {
        return Err(CliError::Config("attack.epsilons is empty".into()));
    }
    let fgsm_steps: usize = cfg.get("attack.fgsm_steps")?;
    let mut rows = Vec::new();
    let mut regions = String::from("attack_id,epsilon,region,d1,n_valid\n");
    let mut shift = String::from("attack_id,epsilon,mean_disparity\n");
    let mut record = |id: &str, eps: f64, e: &Evaluation, rows: &mut Vec<MetricRow>| {
        rows.push(row(cfg, net_name, id, eps, e.report));
        for (label, r) in &e.regions {
            let _ = writeln!(regions, "{id},{eps},{},{},{}", label.name(), r.d1, r.n_valid);
        }
        let _ = writeln!(shift, "{id},{eps},{}", e.mean_disparity);
    };
    let clean = evaluate(&net, &val, Attack::Clean, "clean evaluation")?;
    record("clean", 0.0, &clean, &mut rows);
    for &eps in &epsilons {
        let cc = craft_config(cfg, eps, seed)?;
        let (sup, _) = craft_sup(&net, &train_set, &cc)?;
        let sup_name = format!("attack-{net_name}-eps{eps}");
        exp.save_sup(&sup_name, &sup, &sup_meta(net_name, &net_hash, &cc))?;
        save_sup_images(exp, &sup_name, &sup)?;
        let e = evaluate(&net, &val, Attack::Sup(&sup), "SUP attack")?;
        record("sup", eps, &e, &mut rows);
        for kind in [NoiseKind::Uniform, NoiseKind::Gaussian] {
            let e = evaluate(
                &net,
                &val,
                Attack::Noise {
                    kind,
                    epsilon: eps,
                    seed,
                },
                "noise attack",
            )?;
            record(kind.as_str(), eps, &e, &mut rows);
        }
        if fgsm_steps > 0 {
            let fc = FgsmConfig::new(eps, fgsm_steps, seed);
            let e = evaluate(&net, &val, Attack::Fgsm(&fc), "fgsm attack")?;
            record("fgsm", eps, &e, &mut rows);
        }
    }
    exp.write(
        &format!("{CSV_DIR}/attack-{net_name}.csv"),
        metrics_csv(&rows).as_bytes(),
    )?;
    exp.write(&format!("{CSV_DIR}/attack-{net_name}-regions.csv"), regions.as_bytes())?;
    exp.write(&format!("{CSV_DIR}/attack-{net_name}-disparity.csv"), shift.as_bytes())
}

pub fn analyze(exp: &mut Experiment, cfg: &Config, net_name: &str, sup_name: &str) -> Result<()> {
    let (net, _) = exp.load_net(net_name)?;
    let (sup, _) = exp.load_sup(sup_name)?;
    let val = exp.load_split("val")?;
    let clean = evaluate(&net, &val, Attack::Clean, "clean evaluation")?;
    let attacked = evaluate(&net, &val, Attack::Sup(&sup), "SUP attack")?;
    let bins: usize = cfg.get("analyze.bins")?;
    let hi = net.config.d_max as f64;
    let hc = disparity_histogram(&clean.predictions, bins, 0.0, hi)?;
    let ha = disparity_histogram(&attacked.predictions, bins, 0.0, hi)?;
    let named = [("clean", &hc), ("attacked", &ha)];
    exp.write(
        &format!("{CSV_DIR}/analyze-{sup_name}-histogram.csv"),
        histogram_csv(&named).as_bytes(),
    )?;
    exp.write(
        &format!("{CSV_DIR}/analyze-{sup_name}-histogram.dat"),
        histogram_dat(&named).as_bytes(),
    )?;
    let n: usize = cfg.get("analyze.samples")?;
    let subset = &val[..n.clamp(1, val.len())];
    let (left, right) = layer_correlation(&net, subset, &sup)?;
    let (reg_clean, reg_pert) = registered_correlation(&net, subset, &sup)?;
    if left
        .iter()
        .chain(&right)
        .chain(&reg_clean)
        .chain(&reg_pert)
        .any(|v| !v.is_finite())
    {
        return Err(CliError::Numeric("correlation trace".into()));
    }
    let traces = [
        ("left", &left),
        ("right", &right),
        ("registered_clean", &reg_clean),
        ("registered_perturbed", &reg_pert),
    ];
    exp.write(
        &format!("{CSV_DIR}/analyze-{sup_name}-traces.csv"),
        trace_csv(&traces).as_bytes(),
    )?;
    exp.write(
        &format!("{CSV_DIR}/analyze-{sup_name}-traces.dat"),
        trace_dat(&traces).as_bytes(),
    )?;
    let mut s = String::from("series,mean_disparity\n");
    let _ = writeln!(s, "clean,{}\nattacked,{}", hc.mean, ha.mean);
    exp.write(&format!("{CSV_DIR}/analyze-{sup_name}-shift.csv"), s.as_bytes())
}

pub fn finetune(exp: &mut Experiment, cfg: &Config, seed: u64, net_name: &str, out: &str) -> Result<()> {
    let (net, _) = exp.load_net(net_name)?;
    let names: Vec<String> = cfg.list("finetune.sups")?;
    if names.is_empty() {
        return Err(CliError::Config("finetune.sups is empty".into()));
    }
    let sups = names
        .iter()
        .map(|n| exp.load_sup(n).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    let train_set = exp.load_split("train")?;
    let val = exp.load_split("val")?;
    let fc = finetune_config(cfg, &net.config, seed)?;
    let (tuned, report) = finetune_adversarial(&net, &train_set, &sups, &fc)?;
    if report.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numeric("fine-tuning loss".into()));
    }
    exp.save_net(out, &tuned)?;
    exp.write(
        &format!("{CSV_DIR}/finetune-{out}-loss.csv"),
        losses_csv(&report.epoch_losses).as_bytes(),
    )?;
    let mut rows = Vec::new();
    for (id, n) in [(net_name, &net), (out, &tuned)] {
        rows.push(row(
            cfg,
            id,
            "clean",
            0.0,
            evaluate(n, &val, Attack::Clean, "clean evaluation")?.report,
        ));
        for (sname, sup) in names.iter().zip(&sups) {
            let e = evaluate(n, &val, Attack::Sup(sup), "SUP attack")?;
            rows.push(row(cfg, id, sname, sup.epsilon, e.report));
        }
    }
    exp.write(&format!("{CSV_DIR}/finetune-{out}.csv"), metrics_csv(&rows).as_bytes())
}

pub fn matrix(exp: &mut Experiment, cfg: &Config, seed: u64) -> Result<()> {
    let base = net_config(cfg, seed)?;
    let mut variants = unique_variants(&variant_matrix(&base));
    let wanted: Vec<String> = cfg.list("matrix.variants")?;
    if wanted != ["all"] {
        for w in &wanted {
            if !variants.iter().any(|v| &v.id == w) {
                let known: Vec<&str> = variants.iter().map(|v| v.id.as_str()).collect();
                return Err(CliError::Config(format!(
                    "matrix.variants: unknown variant {w:?}, known {known:?}"
                )));
            }
        }
        variants.retain(|v| wanted.contains(&v.id));
    }
    let train_set = exp.load_split("train")?;
    let val = exp.load_split("val")?;
    let cc = craft_config(cfg, cfg.get("craft.epsilon")?, seed)?;
    let mut nets = Vec::new();
    let mut sups = Vec::new();
    for v in &variants {
        let (net, losses) = train_one(cfg, &v.config, seed, &train_set)?;
        let name = format!("matrix-{}", v.id);
        let hash = exp.save_net(&name, &net)?;
        exp.write(&format!("{CSV_DIR}/{name}-loss.csv"), losses_csv(&losses).as_bytes())?;
        let (sup, _) = craft_sup(&net, &train_set, &cc)?;
        exp.save_sup(&name, &sup, &sup_meta(&name, &hash, &cc))?;
        sups.push(TaggedSup {
            id: format!("sup-{}", v.id),
            source_net: v.id.clone(),
            sup,
        });
        nets.push((v.id.clone(), net));
    }
    let m = transfer_eval(&nets, &sups, &val, threads()?)?;
    for row in &m.cells {
        for r in row {
            finite("transfer matrix", r)?;
        }
    }
    exp.write(&format!("{CSV_DIR}/matrix.csv"), m.csv().as_bytes())?;
    exp.write(
        &format!("{CSV_DIR}/matrix-metrics.csv"),
        metrics_csv(&m.rows(cfg.raw("experiment.id"))).as_bytes(),
    )?;
    let mut s = String::from("net_id,clean_d1,mean_attacked_d1\n");
    for (r, id) in m.net_ids.iter().enumerate() {
        let _ = writeln!(s, "{id},{},{}", m.clean(r).d1, m.mean_attacked_d1(r));
    }
    exp.write(&format!("{CSV_DIR}/matrix-summary.csv"), s.as_bytes())
}

fn parse_metric_row(path: &str, line: &str) -> Result<MetricRow> {
    let f: Vec<&str> = line.split(',').collect();
    let bad = || CliError::Config(format!("{path}: malformed metrics row {line:?}"));
    if f.len() != 7 {
        return Err(bad());
    }
    Ok(MetricRow {
        experiment_id: f[0].to_string(),
        net_id: f[1].to_string(),
        attack_id: f[2].to_string(),
        epsilon: f[3].parse().map_err(|_| bad())?,
        report: MetricReport {
            d1: f[4].parse().map_err(|_| bad())?,
            epe: f[5].parse().map_err(|_| bad())?,
            n_valid: f[6].parse().map_err(|_| bad())?,
        },
    })
}

pub fn report(exp: &mut Experiment, cfg: &Config, seed: u64) -> Result<()> {
    let dir = exp.path(CSV_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for name in names {
        let rel = format!("{CSV_DIR}/{name}");
        let bytes = exp.read(&rel)?;
        let text = String::from_utf8_lossy(&bytes);
        let mut lines = text.lines();
        if lines.next() != Some(METRIC_CSV_HEADER) {
            continue;
        }
        for line in lines.filter(|l| !l.is_empty()) {
            rows.push(parse_metric_row(&rel, line)?);
        }
        sources.push(rel);
    }
    let report = AttackReport {
        experiment_id: cfg.raw("experiment.id").to_string(),
        metadata: [
            ("seed".to_string(), seed.to_string()),
            ("sources".to_string(), sources.join(" ")),
        ]
        .into(),
        rows,
    };
    exp.write(&format!("{REPORT_DIR}/metrics.csv"), report.csv().as_bytes())?;
    exp.write(&format!("{REPORT_DIR}/summary.txt"), report.summary().as_bytes())
}
