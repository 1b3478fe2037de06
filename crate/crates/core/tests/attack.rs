mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supforge::attack::*;
use supforge::LossSpec;
use supforge_tensor::gradcheck::{central_difference, max_relative_error};
use supforge_tensor::{Reduction, Tensor};

use common::{pretend_trained, small_net_config, small_samples};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn tile_average_follows_the_chain_rule() {
    // L(v) = Σ w ⊙ sin(x + tile(v)), so dL/dv = Σ over tiles of dL/dx.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 4, 4]);
    let w = random(&mut rng, &[3, 4, 4]);
    let v = random(&mut rng, &[3, 2, 2]);
    let loss = |v: &Tensor| {
        let y = apply_tiled(&x, v).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a.sin() * b).sum::<f64>()
    };
    let y = apply_tiled(&x, &v).unwrap();
    let g = y.zip_map(&w, |a, b| a.cos() * b).unwrap();
    let n_tiles = tile_origins(4, 4, 2, 2).unwrap().len() as f64;
    let analytic = average_tile_gradients(&g, 2, 2).unwrap().map(|a| a * n_tiles);
    let fd = central_difference(loss, &v, 1e-6);
    assert!(max_relative_error(&analytic, &fd) < 1e-4);
}

#[test]
fn tile_count_is_area_ratio() {
    for (hh, ww, h, w) in [(64, 128, 32, 32), (64, 128, 16, 8), (4, 4, 2, 2), (64, 128, 64, 128)] {
        assert_eq!(tile_origins(hh, ww, h, w).unwrap().len(), (hh * ww) / (h * w));
    }
}

#[test]
fn zero_init_with_pseudo_truth_stays_at_zero() {
    let net = pretend_trained(&small_net_config(2));
    let data = small_samples(1, 40);
    let cfg = CraftConfig {
        epsilon: 0.02,
        alpha: 0.002,
        tile_h: 16,
        tile_w: 16,
        passes: 1,
        init: CraftInit::Zero,
        target: CraftTarget::PseudoGroundTruth,
        ..Default::default()
    };
    let (sup, log) = craft_sup(&net, &data, &cfg).unwrap();
    assert_eq!(sup.linf(), 0.0);
    assert_eq!(log.losses, vec![0.0]);
}

#[test]
fn one_ground_truth_step_is_a_clamped_tile_average() {
    let net = pretend_trained(&small_net_config(2));
    let data = small_samples(1, 41);
    let (eps, alpha) = (0.02, 1e-4);
    let cfg = CraftConfig {
        epsilon: eps,
        alpha,
        tile_h: 16,
        tile_w: 16,
        passes: 1,
        init: CraftInit::Zero,
        target: CraftTarget::GroundTruth,
        ..Default::default()
    };
    let (sup, _) = craft_sup(&net, &data, &cfg).unwrap();
    let s = &data[0];
    let loss = LossSpec {
        beta: 1.0,
        reduction: Reduction::Sum,
    };
    let (_, gl, gr) = input_gradients(&net, &s.left, &s.right, &s.gt_disparity, &loss).unwrap();
    for (v, g) in [(&sup.left, gl), (&sup.right, gr)] {
        let expect = project_linf(&project_linf(&average_tile_gradients(&g, 16, 16).unwrap(), alpha), eps);
        assert_eq!(v, &expect);
    }
    assert!(sup.linf() > 0.0);
}

#[test]
fn crafting_respects_the_budget() {
    let net = pretend_trained(&small_net_config(3));
    let data = small_samples(4, 50);
    let cfg = CraftConfig {
        epsilon: 0.01,
        alpha: 0.004,
        tile_h: 16,
        tile_w: 32,
        passes: 2,
        seed: 8,
        ..Default::default()
    };
    let (sup, log) = craft_sup(&net, &data, &cfg).unwrap();
    assert_eq!(log.linf.len(), 8);
    assert!(log.linf.iter().all(|&(l, r)| l <= 0.01 && r <= 0.01));
    assert_eq!(
        (sup.left.shape(), sup.right.shape()),
        (&[3, 16, 32][..], &[3, 16, 32][..])
    );
    assert_eq!(craft_sup(&net, &data, &cfg).unwrap().0, sup);
}

#[test]
fn crafting_needs_a_trained_net() {
    let mut net = pretend_trained(&small_net_config(3));
    net.trained = false;
    assert!(craft_sup(&net, &small_samples(1, 0), &CraftConfig::default()).is_err());
}

#[test]
fn indivisible_tiles_rejected() {
    let net = pretend_trained(&small_net_config(3));
    let cfg = CraftConfig {
        tile_h: 24,
        ..Default::default()
    };
    assert!(craft_sup(&net, &small_samples(1, 0), &cfg).is_err());
}

#[test]
fn fgsm_stays_in_budget() {
    let net = pretend_trained(&small_net_config(4));
    let s = &small_samples(1, 60)[0];
    let (l, r) = fgsm_image_specific(&net, s, &FgsmConfig::new(0.01, 3, 1)).unwrap();
    for (adv, clean) in [(&l, &s.left), (&r, &s.right)] {
        let diff = adv.zip_map(clean, |a, b| a - b).unwrap();
        assert!(diff.max_abs() <= 0.01 + 1e-15);
    }
}

proptest! {
    #[test]
    fn projection_is_a_clamp_and_idempotent(v in prop::collection::vec(-1.0f64..1.0, 1..64), xi in 0.001f64..0.5) {
        let t = Tensor::new(&[v.len()], v.clone()).unwrap();
        let p = project_linf(&t, xi);
        prop_assert!(p.max_abs() <= xi);
        prop_assert_eq!(&project_linf(&p, xi), &p);
        for (a, b) in v.iter().zip(p.data()) {
            if a.abs() <= xi { prop_assert_eq!(a, b); }
        }
    }

    #[test]
    fn noise_stays_in_budget(seed in any::<u64>(), eps in 0.001f64..0.1, gaussian in any::<bool>()) {
        let x = Tensor::full(&[3, 4, 8], 0.5);
        let kind = if gaussian { NoiseKind::Gaussian } else { NoiseKind::Uniform };
        let (l, r) = noise_attack(&x, &x, kind, eps, seed).unwrap();
        for t in [l, r] {
            prop_assert!(t.data().iter().all(|v| (v - 0.5).abs() <= eps + 1e-15));
        }
    }

    #[test]
    fn tiling_is_linear_in_the_tile(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 8, 8]);
        let (a, b) = (random(&mut rng, &[3, 4, 2]), random(&mut rng, &[3, 4, 2]));
        let mut ab = a.clone();
        ab.add_assign(&b);
        let lhs = apply_tiled(&x, &ab).unwrap();
        let rhs = apply_tiled(&apply_tiled(&x, &a).unwrap(), &b).unwrap();
        prop_assert!(lhs.zip_map(&rhs, |p, q| p - q).unwrap().max_abs() < 1e-12);
    }
}
