mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supforge::attack::PerturbationPair;
use supforge::defense::{finetune_adversarial, FinetuneConfig};
use supforge::net::{disparity_head, soft_argmin, train, LossSpec, TrainConfig};
use supforge::{CostMode, StereoNet, StereoNetConfig};
use supforge_tensor::gradcheck::{central_difference, max_relative_error};
use supforge_tensor::{Reduction, Tape, Tensor};

use common::{small_net_config, small_samples};

fn tiny(cost_mode: CostMode) -> StereoNetConfig {
    StereoNetConfig {
        channels: 3,
        d_max: 4,
        cost_mode,
        seed: 5,
        ..StereoNetConfig::default()
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cfg in [
        tiny(CostMode::Correlation),
        tiny(CostMode::Concat),
        StereoNetConfig {
            use_isa: true,
            ..tiny(CostMode::Correlation).with_deformable([1])
        },
    ] {
        let mut net = StereoNet::init(&cfg).unwrap();
        // Nonzero offsets so the deformable path is exercised.
        for (name, p) in net.params.iter_mut() {
            if name.contains(".offset.") {
                *p = Tensor::from_fn(p.shape(), |_| rng.random_range(-0.3..0.3));
            }
        }
        let left = Tensor::from_fn(&[3, 8, 16], |_| rng.random_range(0.0..1.0));
        let right = Tensor::from_fn(&[3, 8, 16], |_| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(&[8, 16], |_| rng.random_range(0.0..3.0));
        let loss = LossSpec {
            beta: 1.0,
            reduction: Reduction::Sum,
        };
        let (_, gl, _) = supforge::attack::input_gradients(&net, &left, &right, &target, &loss).unwrap();
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let p = net.bind(&tape, false);
            let out = net
                .forward(&p, tape.constant(x.clone()), tape.constant(right.clone()))
                .unwrap();
            loss.apply(out.disparity, &target).unwrap().value().item()
        };
        let fd = central_difference(f, &left, 1e-6);
        let err = max_relative_error(&gl, &fd);
        assert!(err < 1e-4, "{}: {err}", cfg.tag());
    }
}

#[test]
fn deformable_at_init_equals_standard_bit_exactly() {
    let data = small_samples(2, 7);
    for cost_mode in [CostMode::Correlation, CostMode::Concat] {
        let base = StereoNetConfig {
            cost_mode,
            ..small_net_config(9)
        };
        let std_net = StereoNet::init(&base).unwrap();
        let mut def_net = StereoNet::init(&base.clone().with_deformable(0..4)).unwrap();
        for (k, v) in &std_net.params {
            def_net.params.insert(k.clone(), v.clone());
        }
        for s in &data {
            let a = std_net.predict(&s.left, &s.right).unwrap();
            let b = def_net.predict(&s.left, &s.right).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn head_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cost = Tensor::from_fn(&[6, 3, 5], |_| rng.random_range(-3.0..3.0));
    let eval = |c: &Tensor| {
        let tape = Tape::new();
        let v = soft_argmin(tape.constant(c.clone())).unwrap().value();
        (*v).clone()
    };
    let base = eval(&cost);
    for shift in [-50.0, 0.3, 120.0] {
        let shifted = eval(&cost.map(|x| x + shift));
        assert!(base.zip_map(&shifted, |a, b| a - b).unwrap().max_abs() < 1e-10);
    }
    let tape = Tape::new();
    let d = disparity_head(tape.constant(Tensor::zeros(&[6, 3, 5])), 2)
        .unwrap()
        .value();
    assert!(d.data().iter().all(|&x| (x - 5.0).abs() < 1e-12));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let net = StereoNet::init(&small_net_config(1)).unwrap();
    let data = small_samples(3, 0);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let (trained, report) = train(&net, &data, &cfg).unwrap();
    assert_eq!(trained.params, net.params);
    assert_eq!(report.epoch_losses.len(), 2);
    assert!(trained.trained);
}

#[test]
fn finetune_without_augmentation_or_steps_is_identity() {
    let mut net = StereoNet::init(&small_net_config(1)).unwrap();
    net.trained = true;
    let data = small_samples(3, 0);
    let sups = vec![PerturbationPair::zeros(0.01, 16, 16)];
    let cfg = FinetuneConfig {
        epochs: 2,
        lr: 0.0,
        probability: 0.0,
        ..Default::default()
    };
    let (out, _) = finetune_adversarial(&net, &data, &sups, &cfg).unwrap();
    assert_eq!(out, net);
}

#[test]
fn zero_probability_ignores_the_perturbations() {
    let mut net = StereoNet::init(&small_net_config(1)).unwrap();
    net.trained = true;
    let data = small_samples(3, 0);
    let cfg = FinetuneConfig {
        epochs: 1,
        probability: 0.0,
        ..Default::default()
    };
    let mut loud = PerturbationPair::zeros(0.05, 16, 16);
    loud.left = loud.left.map(|_| 0.05);
    let a = finetune_adversarial(&net, &data, &[PerturbationPair::zeros(0.05, 16, 16)], &cfg).unwrap();
    let b = finetune_adversarial(&net, &data, &[loud], &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0.params, net.params);
}

#[test]
fn training_is_seeded_and_reduces_loss() {
    let data = small_samples(8, 100);
    let net = StereoNet::init(&small_net_config(3)).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let (a, ra) = train(&net, &data, &cfg).unwrap();
    let (b, rb) = train(&net, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.epoch_losses.last().unwrap() < &ra.epoch_losses[0]);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.supf");
    let net = StereoNet::init(&StereoNetConfig {
        use_isa: true,
        ..small_net_config(6).with_deformable([2])
    })
    .unwrap();
    net.save(&path).unwrap();
    assert_eq!(StereoNet::load(&path).unwrap(), net);
    std::fs::write(&path, b"SUPF").unwrap();
    assert!(StereoNet::load(&path).is_err());
}
