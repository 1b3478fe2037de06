//! Central finite differences, used as an independent oracle for autodiff,
//! and a seeded suite that checks every differentiable op against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, deform_conv2d};
use crate::error::Result;
use crate::loss::{smooth_l1, Reduction};
use crate::sample::{bilinear_sample, isa_aggregate, upsample_bilinear};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volume::{concat_fuse, concat_volume, correlation_volume};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max_i |a_i − fd_i| / max(1, |fd_i|)`.
pub fn max_relative_error(autodiff: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(autodiff.shape(), fd.shape());
    autodiff
        .data()
        .iter()
        .zip(fd.data())
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-5;

/// Worst autodiff-versus-FD error of one op over its seeded instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub worst: f64,
}

struct Recorder {
    instances: u64,
    results: Vec<OpCheck>,
}

impl Recorder {
    fn check<F>(&mut self, name: &str, inputs: &[Tensor], seed: u64, op: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let err = relative_error(inputs, seed, op);
        match self.results.iter_mut().find(|c| c.op == name) {
            Some(c) => {
                c.instances += 1;
                c.worst = c.worst.max(err);
            }
            None => self.results.push(OpCheck {
                op: name.to_string(),
                instances: 1,
                worst: err,
            }),
        }
    }
}

/// Runs every differentiable op on `instances` seeded random inputs and
/// reports the worst relative error per op. Instance counts can exceed
/// `instances` for ops checked under several settings.
pub fn op_suite(instances: u64) -> Vec<OpCheck> {
    let mut rec = Recorder {
        instances,
        results: Vec::new(),
    };
    binary_elementwise(&mut rec);
    unary_elementwise(&mut rec);
    reductions_and_softmax(&mut rec);
    conv2d_all_arguments(&mut rec);
    deform_conv2d_all_arguments_including_offsets(&mut rec);
    deform_conv2d_strided(&mut rec);
    bilinear_sample_input_and_coords(&mut rec);
    isa_aggregate_all_arguments(&mut rec);
    upsample(&mut rec);
    cost_volumes(&mut rec);
    smooth_l1_loss(&mut rec);
    composite_conv_relu_mean(&mut rec);
    rec.results
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinked ops stay differentiable under FD.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Fractional offsets whose sample positions never sit near a lattice line.
fn offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let whole = rng.random_range(-2..=1) as f64;
        whole + rng.random_range(0.1..0.9)
    })
}

/// Worst relative error of d(Σ proj ⊙ op(inputs))/d(input_i) over all inputs.
fn relative_error<F>(inputs: &[Tensor], seed: u64, op: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&tape, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let proj = random(&mut rng, out.value().shape());
    let loss = out.mul(tape.constant(proj.clone())).unwrap().sum();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let auto = vars[i].grad().unwrap();
        let fd = central_difference(
            |probe| {
                let t = Tape::new();
                let vs: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let o = op(&t, &vs).unwrap();
                o.value().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            },
            input,
            STEP,
        );
        worst = worst.max(max_relative_error(&auto, &fd));
    }
    worst
}

fn binary_elementwise(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let a = random(rng, &[3, 4]);
        let b = random(rng, &[3, 4]);
        rec.check("add", &[a.clone(), b.clone()], seed, |_, v| v[0].add(v[1]));
        rec.check("sub", &[a.clone(), b.clone()], seed, |_, v| v[0].sub(v[1]));
        rec.check("mul", &[a.clone(), b.clone()], seed, |_, v| v[0].mul(v[1]));
    }
}

fn unary_elementwise(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let a = away_from_zero(rng, &[2, 5]);
        let s = rng.random_range(-2.0..2.0);
        rec.check("scalar_mul", std::slice::from_ref(&a), seed, |_, v| {
            Ok(v[0].scalar_mul(s))
        });
        rec.check("relu", std::slice::from_ref(&a), seed, |_, v| Ok(v[0].relu()));
        rec.check("leaky_relu", std::slice::from_ref(&a), seed, |_, v| {
            Ok(v[0].leaky_relu_default())
        });
        rec.check("abs", std::slice::from_ref(&a), seed, |_, v| Ok(v[0].abs()));
        rec.check("tanh", &[a.map(|x| 3.0 * x)], seed, |_, v| Ok(v[0].tanh()));
        // bounds at ±0.5 ± 0.01 never coincide with entries closer than 1e-5
        let a2 = a.map(|x| if (x.abs() - 0.5).abs() < 0.02 { x * 1.1 } else { x });
        rec.check("clamp", &[a2], seed, |_, v| v[0].clamp(-0.5, 0.5));
    }
}

fn reductions_and_softmax(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let a = random(rng, &[3, 4, 2]);
        rec.check("sum", std::slice::from_ref(&a), seed, |_, v| Ok(v[0].sum()));
        rec.check("mean", std::slice::from_ref(&a), seed, |_, v| Ok(v[0].mean()));
        for axis in 0..3 {
            rec.check("softmax", std::slice::from_ref(&a), seed, |_, v| v[0].softmax(axis));
            rec.check("sum_axis", std::slice::from_ref(&a), seed, |_, v| v[0].sum_axis(axis));
        }
        rec.check("reshape", std::slice::from_ref(&a), seed, |_, v| v[0].reshape(&[6, 4]));
    }
}

fn conv2d_all_arguments(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let x = random(rng, &[2, 5, 5]);
        let w = random(rng, &[3, 2, 3, 3]);
        let b = random(rng, &[3]);
        let stride = 1 + (seed as usize % 2);
        let pad = seed as usize % 3 / 2 + (seed as usize % 2);
        rec.check("conv2d", &[x, w, b], seed, |_, v| conv2d(v[0], v[1], v[2], stride, pad));
    }
}

fn deform_conv2d_all_arguments_including_offsets(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let x = random(rng, &[1, 5, 5]);
        let w = random(rng, &[2, 1, 3, 3]);
        let b = random(rng, &[2]);
        let off = offsets(rng, &[18, 5, 5]);
        rec.check("deform_conv2d", &[x, w, b, off], seed, |_, v| {
            deform_conv2d(v[0], v[1], v[2], v[3], 1, 1)
        });
    }
}

fn deform_conv2d_strided(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let x = random(rng, &[2, 6, 6]);
        let w = random(rng, &[2, 2, 3, 3]);
        let b = random(rng, &[2]);
        let off = offsets(rng, &[18, 3, 3]);
        rec.check("deform_conv2d/s2", &[x, w, b, off], seed, |_, v| {
            deform_conv2d(v[0], v[1], v[2], v[3], 2, 1)
        });
    }
}

fn bilinear_sample_input_and_coords(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let x = random(rng, &[3, 4, 5]);
        let y = Tensor::scalar(rng.random_range(-1.0..4.0_f64).floor() + rng.random_range(0.1..0.9));
        let xc = Tensor::scalar(rng.random_range(-1.0..5.0_f64).floor() + rng.random_range(0.1..0.9));
        rec.check("bilinear_sample", &[x, y, xc], seed, |_, v| {
            bilinear_sample(v[0], v[1], v[2])
        });
    }
}

fn isa_aggregate_all_arguments(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let cost = random(rng, &[3, 4, 5]);
        let w = random(rng, &[9]);
        let off = offsets(rng, &[18, 4, 5]);
        rec.check("isa_aggregate", &[cost, w, off], seed, |_, v| {
            isa_aggregate(v[0], v[1], v[2])
        });
    }
}

fn upsample(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let x = random(rng, &[2, 3, 4]);
        let f = 1 + seed as usize % 3;
        rec.check("upsample_bilinear", &[x], seed, |_, v| upsample_bilinear(v[0], f));
    }
}

fn cost_volumes(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let l = random(rng, &[3, 2, 7]);
        let r = random(rng, &[3, 2, 7]);
        rec.check("correlation_volume", &[l.clone(), r.clone()], seed, |_, v| {
            correlation_volume(v[0], v[1], 4)
        });
        rec.check("concat_volume", &[l.clone(), r.clone()], seed, |_, v| {
            concat_volume(v[0], v[1], 4)
        });
        let w = random(rng, &[2, 6, 1, 1]);
        let b = random(rng, &[2]);
        rec.check("concat_fuse", &[l, r, w, b], seed, |_, v| {
            concat_fuse(v[0], v[1], v[2], v[3], 4)
        });
    }
}

fn smooth_l1_loss(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let target = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 0.0 } else { rng.random_range(1.0..5.0) });
        // residuals kept clear of the |δ| = β switch
        let pred = target
            .map(|t| t + 0.3)
            .zip_map(&random(rng, &[4, 4]), |p, r| p + 2.0 * r)
            .unwrap();
        let pred = pred
            .zip_map(&target, |p, t| {
                let d: f64 = p - t;
                if (d.abs() - 1.0).abs() < 0.01 {
                    p + 0.05
                } else {
                    p
                }
            })
            .unwrap();
        for red in [Reduction::Mean, Reduction::Sum] {
            let t = target.clone();
            rec.check("smooth_l1", std::slice::from_ref(&pred), seed, move |_, v| {
                smooth_l1(v[0], &t, 1.0, red)
            });
        }
    }
}

fn composite_conv_relu_mean(rec: &mut Recorder) {
    for seed in 0..rec.instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let x = random(rng, &[2, 6, 6]);
        let w = random(rng, &[4, 2, 3, 3]);
        let b = random(rng, &[4]);
        let w2 = random(rng, &[1, 4, 3, 3]);
        let b2 = random(rng, &[1]);
        rec.check("conv-relu-conv-mean", &[x, w, b, w2, b2], seed, |_, v| {
            let h = conv2d(v[0], v[1], v[2], 2, 1)?.leaky_relu(0.1);
            Ok(conv2d(h, v[3], v[4], 1, 1)?.relu().mean())
        });
    }
}
