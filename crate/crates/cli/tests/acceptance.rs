//! Acceptance suite: one line per criterion, run at the stated tolerances.
//!
//! Criteria 4 to 10 share one trained default network, one crafted SUP and
//! the architecture matrix, which reuses the default network as its
//! `correlation-std` cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supforge::analysis::registered_correlation;
use supforge::attack::{
    apply_tiled, average_tile_gradients, craft_sup, project_linf, tile_origins, CraftConfig, NoiseKind,
    PerturbationPair,
};
use supforge::defense::{
    finetune_adversarial, transfer_eval, unique_variants, variant_matrix, FinetuneConfig, TaggedSup,
};
use supforge::eval::{evaluate_attack, Attack, Evaluation};
use supforge::metrics::{d1_error, epe, evaluate, region_accumulators};
use supforge::net::{soft_argmin, train};
use supforge::scene::{generate_dataset, RegionLabel, SceneConfig, StereoSample};
use supforge::{StereoNet, StereoNetConfig, TrainConfig};
use supforge_tensor::gradcheck::{central_difference, max_relative_error, op_suite};
use supforge_tensor::{conv2d, deform_conv2d, isa_aggregate, Tape, Tensor};

const NET_SEED: u64 = 11;
const CRAFT_SEED: u64 = 5;
const FINETUNE_SEED: u64 = 3;
const NOISE_SEED: u64 = 100;
const TRAIN_BASE: u64 = 1000;
const VAL_BASE: u64 = 9000;
const EPSILON: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn autodiff_soundness() -> Outcome {
    let checks = op_suite(20);
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| c.instances < 20 || !(c.worst < 1e-4))
        .map(|c| format!("{} ({} instances, {:.2e})", c.op, c.instances, c.worst))
        .collect();
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    let covered = ["deform_conv2d", "isa_aggregate"]
        .iter()
        .all(|op| checks.iter().any(|c| c.op == *op));
    outcome(
        failing.is_empty() && covered,
        format!("{} ops, worst rel err {worst:.2e}, failing {failing:?}", checks.len()),
    )
}

fn algebraic_invariants() -> Outcome {
    let mut notes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut proj_ok = true;
    for _ in 0..50 {
        let v = Tensor::from_fn(&[3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let xi = rng.random_range(0.001..0.5);
        let p = project_linf(&v, xi);
        proj_ok &= p.data().iter().zip(v.data()).all(|(a, b)| *a == b.clamp(-xi, xi));
        proj_ok &= project_linf(&p, xi) == p;
    }
    notes.push(format!("projection {proj_ok}"));

    let tiles_ok = [(64, 128, 32, 32), (64, 128, 16, 8), (4, 4, 2, 2)]
        .iter()
        .all(|&(hh, ww, h, w)| tile_origins(hh, ww, h, w).unwrap().len() == (hh * ww) / (h * w));
    notes.push(format!("tile count {tiles_ok}"));

    let x = random(&mut rng, &[3, 4, 4]);
    let wgt = random(&mut rng, &[3, 4, 4]);
    let v = random(&mut rng, &[3, 2, 2]);
    let loss = |v: &Tensor| {
        let y = apply_tiled(&x, v).unwrap();
        y.data().iter().zip(wgt.data()).map(|(a, b)| a.sin() * b).sum::<f64>()
    };
    let g = apply_tiled(&x, &v).unwrap().zip_map(&wgt, |a, b| a.cos() * b).unwrap();
    let n_tiles = tile_origins(4, 4, 2, 2).unwrap().len() as f64;
    let analytic = average_tile_gradients(&g, 2, 2).unwrap().map(|a| a * n_tiles);
    let chain_err = max_relative_error(&analytic, &central_difference(loss, &v, 1e-6));
    notes.push(format!("tile chain rule {chain_err:.1e}"));

    let tape = Tape::new();
    let mut deform_ok = true;
    for (stride, pad, h, w) in [(1, 1, 7, 9), (2, 1, 8, 10), (1, 0, 5, 5)] {
        let x = tape.constant(random(&mut rng, &[3, h, w]));
        let wt = tape.constant(random(&mut rng, &[4, 3, 3, 3]));
        let b = tape.constant(random(&mut rng, &[4]));
        let plain = conv2d(x, wt, b, stride, pad).unwrap();
        let s = plain.shape();
        let off = tape.constant(Tensor::zeros(&[18, s[1], s[2]]));
        deform_ok &= *plain.value() == *deform_conv2d(x, wt, b, off, stride, pad).unwrap().value();
    }
    notes.push(format!("zero-offset deform {deform_ok}"));

    let (d, h, w) = (4, 5, 6);
    let cost = random(&mut rng, &[d, h, w]);
    let kernel = random(&mut rng, &[9]);
    let agg = isa_aggregate(
        tape.constant(cost.clone()),
        tape.constant(kernel.clone()),
        tape.constant(Tensor::zeros(&[18, h, w])),
    )
    .unwrap()
    .value();
    let wt = tape.constant(kernel.reshape(&[1, 1, 3, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let isa_ok = (0..d).all(|s| {
        let slice = Tensor::new(&[1, h, w], cost.data()[s * h * w..(s + 1) * h * w].to_vec()).unwrap();
        let conv = conv2d(tape.constant(slice), wt, b, 1, 1).unwrap().value();
        conv.data() == &agg.data()[s * h * w..(s + 1) * h * w]
    });
    notes.push(format!("zero-offset ISA {isa_ok}"));

    let cost = Tensor::from_fn(&[6, 3, 5], |_| rng.random_range(-3.0..3.0));
    let head = |c: &Tensor| {
        let tape = Tape::new();
        let v = soft_argmin(tape.constant(c.clone())).unwrap().value();
        (*v).clone()
    };
    let base = head(&cost);
    let shift_err = [-50.0, 0.3, 120.0]
        .iter()
        .map(|s| {
            base.zip_map(&head(&cost.map(|x| x + s)), |a, b| a - b)
                .unwrap()
                .max_abs()
        })
        .fold(0.0, f64::max);
    notes.push(format!("softmax shift {shift_err:.1e}"));

    let pass = proj_ok && tiles_ok && chain_err < 1e-4 && deform_ok && isa_ok && shift_err < 1e-10;
    outcome(pass, notes.join(", "))
}

fn naive_metrics(pred: &Tensor, gt: &Tensor) -> (f64, f64) {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let (mut bad, mut abs, mut n) = (0usize, 0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let g = gt.get(&[i, j]);
            if g <= 0.0 {
                continue;
            }
            let delta = (pred.get(&[i, j]) - g).abs();
            n += 1;
            abs += delta;
            if delta > 3.0 && delta / g > 0.05 {
                bad += 1;
            }
        }
    }
    (bad as f64 / n as f64, abs / n as f64)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut exact, mut cases, mut recombine_err) = (true, 0, 0.0f64);
    while cases < 50 {
        let gt = Tensor::from_fn(&[4, 4], |_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.5..40.0)
            }
        });
        let pred = Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..48.0));
        if gt.data().iter().all(|&g| g <= 0.0) {
            continue;
        }
        let (d1, e) = naive_metrics(&pred, &gt);
        exact &= d1_error(&pred, &gt).unwrap().to_bits() == d1.to_bits();
        exact &= epe(&pred, &gt).unwrap().to_bits() == e.to_bits();
        let labels: Vec<RegionLabel> = (0..16).map(|_| RegionLabel::ALL[rng.random_range(0..4)]).collect();
        let total = evaluate(&pred, &gt).unwrap();
        let weighted: f64 = region_accumulators(&pred, &gt, &labels)
            .unwrap()
            .values()
            .map(|a| a.report().unwrap().d1 * a.n_valid as f64 / total.n_valid as f64)
            .sum();
        recombine_err = recombine_err.max((weighted - total.d1).abs());
        cases += 1;
    }
    let gt = Tensor::full(&[2, 2], 10.0);
    let pred = Tensor::new(&[2, 2], vec![10.0, 14.0, 10.4, 20.0]).unwrap();
    let worked = evaluate(&pred, &gt).unwrap();
    let worked_ok = (worked.d1, worked.epe) == (0.5, 3.6);
    outcome(
        exact && worked_ok && recombine_err < 1e-12,
        format!(
            "{cases} oracle cases bit-exact {exact}, worked example D1 {} EPE {}, recombination {recombine_err:.1e}",
            worked.d1, worked.epe
        ),
    )
}

struct Fixture {
    train: Vec<StereoSample>,
    val: Vec<StereoSample>,
    config: StereoNetConfig,
    net: StereoNet,
    sup: PerturbationPair,
    clean: Evaluation,
    attacked: Evaluation,
}

fn craft_config() -> CraftConfig {
    CraftConfig {
        epsilon: EPSILON,
        seed: CRAFT_SEED,
        ..CraftConfig::default()
    }
}

fn fixture() -> Fixture {
    let scene = SceneConfig::default();
    let train_set = generate_dataset(&scene, 40, TRAIN_BASE).unwrap();
    let val = generate_dataset(&scene, 20, VAL_BASE).unwrap();
    let config = StereoNetConfig {
        seed: NET_SEED,
        ..StereoNetConfig::default()
    };
    let t = Instant::now();
    let (net, _) = train(
        &StereoNet::init(&config).unwrap(),
        &train_set,
        &TrainConfig::for_net(&config),
    )
    .unwrap();
    let (sup, _) = craft_sup(&net, &train_set, &craft_config()).unwrap();
    let clean = evaluate_attack(&net, &val, Attack::Clean, 1).unwrap();
    let attacked = evaluate_attack(&net, &val, Attack::Sup(&sup), 1).unwrap();
    println!(
        "fixture: default net trained and SUP crafted in {:.0}s",
        t.elapsed().as_secs_f64()
    );
    Fixture {
        train: train_set,
        val,
        config,
        net,
        sup,
        clean,
        attacked,
    }
}

fn trainability(f: &Fixture) -> Outcome {
    let epe = f.clean.report.epe;
    outcome(
        epe < 2.0,
        format!("held-out EPE {epe:.3} px after 30 epochs on 40 samples"),
    )
}

fn attack_potency(f: &Fixture) -> Outcome {
    let noise = |kind| {
        let attack = Attack::Noise {
            kind,
            epsilon: EPSILON,
            seed: NOISE_SEED,
        };
        evaluate_attack(&f.net, &f.val, attack, 1).unwrap().report.d1
    };
    let (uniform, gaussian) = (noise(NoiseKind::Uniform), noise(NoiseKind::Gaussian));
    let (clean, sup) = (f.clean.report.d1, f.attacked.report.d1);
    let pass = sup >= 3.0 * uniform && (uniform - clean) < 0.02 && (gaussian - clean) < 0.02;
    outcome(
        pass,
        format!(
            "eps {EPSILON}: clean D1 {clean:.4}, SUP {sup:.4} ({:.2}x uniform), uniform {uniform:.4}, gaussian {gaussian:.4}",
            sup / uniform
        ),
    )
}

fn geometry_shift(f: &Fixture) -> Outcome {
    let (clean, attacked) = (f.clean.mean_disparity, f.attacked.mean_disparity);
    outcome(
        attacked > clean,
        format!("mean predicted disparity {clean:.3} px clean, {attacked:.3} px attacked"),
    )
}

fn region_robustness(f: &Fixture) -> Outcome {
    let d1 = |r| f.attacked.regions.get(&r).map(|m| m.d1);
    match (d1(RegionLabel::Flat), d1(RegionLabel::Checker)) {
        (Some(flat), Some(checker)) => outcome(
            flat >= checker,
            format!("attacked D1 FLAT {flat:.4}, CHECKER {checker:.4}"),
        ),
        other => outcome(false, format!("region missing from held-out set: {other:?}")),
    }
}

fn feature_correlation(f: &Fixture) -> Outcome {
    let (clean, perturbed) = registered_correlation(&f.net, &f.val[..10], &f.sup).unwrap();
    let last = clean.len() - 1;
    let gap = clean[last] - perturbed[last];
    outcome(
        gap >= 0.05,
        format!(
            "final layer registered correlation {:.3} clean, {:.3} perturbed (gap {gap:.3})",
            clean[last], perturbed[last]
        ),
    )
}

fn finetune_defense(f: &Fixture) -> Outcome {
    let cfg = FinetuneConfig {
        seed: FINETUNE_SEED,
        ..FinetuneConfig::for_net(&f.config)
    };
    let (tuned, _) = finetune_adversarial(&f.net, &f.train, std::slice::from_ref(&f.sup), &cfg).unwrap();
    let clean = evaluate_attack(&tuned, &f.val, Attack::Clean, 1).unwrap().report.d1;
    let attacked = evaluate_attack(&tuned, &f.val, Attack::Sup(&f.sup), 1)
        .unwrap()
        .report
        .d1;
    let drop = 1.0 - attacked / f.attacked.report.d1;
    let clean_delta = clean - f.clean.report.d1;
    outcome(
        drop >= 0.5 && clean_delta < 0.05,
        format!(
            "attacked D1 {:.4} -> {attacked:.4} ({:.0}% drop), clean D1 {:.4} -> {clean:.4}",
            f.attacked.report.d1,
            drop * 100.0,
            f.clean.report.d1
        ),
    )
}

fn architecture_defense(f: &Fixture) -> Outcome {
    let mut nets = Vec::new();
    let mut sups = Vec::new();
    for v in unique_variants(&variant_matrix(&f.config)) {
        let t = Instant::now();
        let (net, sup) = if v.config == f.config {
            (f.net.clone(), f.sup.clone())
        } else {
            let (net, _) = train(
                &StereoNet::init(&v.config).unwrap(),
                &f.train,
                &TrainConfig::for_net(&v.config),
            )
            .unwrap();
            let (sup, _) = craft_sup(&net, &f.train, &craft_config()).unwrap();
            (net, sup)
        };
        println!("  matrix cell {} ready in {:.0}s", v.id, t.elapsed().as_secs_f64());
        sups.push(TaggedSup {
            id: format!("sup-{}", v.id),
            source_net: v.id.clone(),
            sup,
        });
        nets.push((v.id, net));
    }
    let m = transfer_eval(&nets, &sups, &f.val, 1).unwrap();
    let csv_path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-matrix.csv");
    fs::write(&csv_path, m.csv()).unwrap();
    let means: BTreeMap<&str, f64> = m
        .net_ids
        .iter()
        .enumerate()
        .map(|(r, id)| (id.as_str(), m.mean_attacked_d1(r)))
        .collect();
    for (id, mean) in &means {
        println!("  {id:<16} mean attacked D1 {mean:.4}");
    }
    match (means.get("correlation-def"), means.get("concat-std")) {
        (Some(&cd), Some(&cs)) => outcome(
            cd <= cs,
            format!(
                "mean attacked D1 correlation-def {cd:.4}, concat-std {cs:.4}; csv at {}",
                csv_path.display()
            ),
        ),
        _ => outcome(false, "matrix lacks a compared variant".into()),
    }
}

const REPRO_CONFIG: &str = "\
data.train_count = 4
data.val_count = 2
data.height = 32
data.width = 64
data.d_max = 6
net.channels = 4
net.d_max = 6
train.epochs = 2
craft.tile_h = 8
craft.tile_w = 8
craft.passes = 1
attack.epsilons = 0.01,0.05
attack.fgsm_steps = 2
analyze.samples = 2
finetune.epochs = 1
";

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("repro.cfg");
    fs::write(&cfg, REPRO_CONFIG).unwrap();
    let subcommands = [
        "gen-data", "train", "craft", "attack", "eval", "analyze", "finetune", "matrix", "report",
    ];
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let exp = dir.path().join(run);
        for sub in subcommands {
            let out = Command::new(env!("CARGO_BIN_EXE_supforge"))
                .args([sub, "--seed", "7", "--exp-dir"])
                .arg(&exp)
                .arg("--config")
                .arg(&cfg)
                .output()
                .unwrap();
            if !out.status.success() {
                return outcome(false, format!("{sub} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
        trees.push(tree(&exp));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let same_set = a.keys().eq(b.keys());
    outcome(
        same_set && differing.is_empty(),
        format!(
            "{} subcommands double-run, {} artifacts compared, differing {differing:?}",
            subcommands.len(),
            a.len()
        ),
    )
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {name:<24} {} | {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    record(1, "autodiff soundness", autodiff_soundness());
    record(2, "algebraic invariants", algebraic_invariants());
    record(3, "metric oracles", metric_oracles());
    let f = fixture();
    record(4, "trainability", trainability(&f));
    record(5, "attack potency", attack_potency(&f));
    record(6, "geometry shift", geometry_shift(&f));
    record(7, "region robustness", region_robustness(&f));
    record(8, "feature correlation", feature_correlation(&f));
    record(9, "fine-tuning defense", finetune_defense(&f));
    record(10, "architecture defense", architecture_defense(&f));
    record(11, "reproducibility", reproducibility());

    println!("\nsummary ({:.0}s):", started.elapsed().as_secs_f64());
    for (n, name, o) in &results {
        println!("criterion {n:>2} {name:<24} {}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
