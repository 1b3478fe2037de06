//! Stereoscopic universal perturbations and the baseline attacks.
//!
//! A perturbation pair holds one small `h × w` tile per view. Applying it
//! adds the tile at every cell of the regular non-overlapping grid; crafting
//! averages image gradients over those cells, takes a clamped step, and
//! projects back onto the L∞ ball of radius ε.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use supforge_tensor::{Reduction, Tape, Tensor};

use crate::error::{Error, Result};
use crate::net::{LossSpec, StereoNet};
use crate::netpbm::encode_ppm;
use crate::scene::StereoSample;

/// The four perturbation budgets studied by default, on `[0, 1]` intensities.
pub const DEFAULT_EPSILONS: [f64; 4] = [0.005, 0.0125, 0.025, 0.05];

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationPair {
    /// `[3, tile_h, tile_w]`, signed.
    pub left: Tensor,
    pub right: Tensor,
    pub epsilon: f64,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl PerturbationPair {
    pub fn zeros(epsilon: f64, tile_h: usize, tile_w: usize) -> Self {
        PerturbationPair {
            left: Tensor::zeros(&[3, tile_h, tile_w]),
            right: Tensor::zeros(&[3, tile_h, tile_w]),
            epsilon,
            tile_h,
            tile_w,
        }
    }

    /// Largest absolute entry over both views.
    pub fn linf(&self) -> f64 {
        self.left.max_abs().max(self.right.max_abs())
    }

    /// Both views of `sample` with the tiles added.
    pub fn apply(&self, sample: &StereoSample) -> Result<(Tensor, Tensor)> {
        Ok((
            apply_tiled(&sample.left, &self.left)?,
            apply_tiled(&sample.right, &self.right)?,
        ))
    }

    /// Visualisation at `0.5 + v / (2ε)`, one PPM per view.
    pub fn render_ppm(&self) -> (Vec<u8>, Vec<u8>) {
        let show = |v: &Tensor| encode_ppm(&v.map(|x| 0.5 + x / (2.0 * self.epsilon)));
        (show(&self.left), show(&self.right))
    }
}

/// Component-wise clamp into `[-xi, xi]`.
pub fn project_linf(v: &Tensor, xi: f64) -> Tensor {
    v.map(|x| x.clamp(-xi, xi))
}

fn tile_grid(shape: &[usize], h: usize, w: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Invalid(format!("expected [C, H, W], got {shape:?}")));
    }
    let (c, hh, ww) = (shape[0], shape[1], shape[2]);
    for (dim, got, by) in [("height", hh, h), ("width", ww, w)] {
        if by == 0 || got % by != 0 {
            return Err(Error::Divisibility {
                what: "tile",
                dim,
                got,
                by,
            });
        }
    }
    Ok((c, hh, ww))
}

/// Origins of the `(H·W)/(h·w)` tiles, row-major.
pub fn tile_origins(height: usize, width: usize, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    tile_grid(&[1, height, width], h, w)?;
    Ok((0..height / h)
        .flat_map(|i| (0..width / w).map(move |j| (i * h, j * w)))
        .collect())
}

/// Adds `v` at every tile of the grid over `image`.
pub fn apply_tiled(image: &Tensor, v: &Tensor) -> Result<Tensor> {
    let vs = v.shape();
    if vs.len() != 3 || vs[0] != image.shape()[0] {
        return Err(Error::Invalid(format!(
            "tile {vs:?} does not fit image {:?}",
            image.shape()
        )));
    }
    let (c, hh, ww) = tile_grid(image.shape(), vs[1], vs[2])?;
    let (h, w) = (vs[1], vs[2]);
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for i in 0..hh {
            let vrow = &v.data()[(ch * h + i % h) * w..][..w];
            let row = &mut data[(ch * hh + i) * ww..][..ww];
            for (j, x) in row.iter_mut().enumerate() {
                *x += vrow[j % w];
            }
        }
    }
    Ok(out)
}

/// Mean of the `h × w` tiles of `g`.
pub fn average_tile_gradients(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, hh, ww) = tile_grid(g.shape(), h, w)?;
    let mut out = Tensor::zeros(&[c, h, w]);
    let acc = out.data_mut();
    for ch in 0..c {
        for i in 0..hh {
            let row = &g.data()[(ch * hh + i) * ww..][..ww];
            let dst = &mut acc[(ch * h + i % h) * w..][..w];
            for (j, x) in row.iter().enumerate() {
                dst[j % w] += x;
            }
        }
    }
    let scale = (h * w) as f64 / (hh * ww) as f64;
    Ok(out.map(|x| x * scale))
}

/// Clean predictions used as crafting targets.
pub fn pseudo_ground_truth(net: &StereoNet, data: &[StereoSample]) -> Result<Vec<Tensor>> {
    data.iter().map(|s| net.predict(&s.left, &s.right)).collect()
}

/// Loss and its gradients with respect to both input views.
pub fn input_gradients(
    net: &StereoNet,
    left: &Tensor,
    right: &Tensor,
    target: &Tensor,
    loss: &LossSpec,
) -> Result<(f64, Tensor, Tensor)> {
    let tape = Tape::new();
    let p = net.bind(&tape, false);
    let (l, r) = (tape.param(left.clone()), tape.param(right.clone()));
    let out = net.forward(&p, l, r)?;
    let value = loss.apply(out.disparity, target)?;
    let v = value.value().item();
    if !v.is_finite() {
        return Err(Error::NonFinite("attack loss".into()));
    }
    tape.backward(value)?;
    let (gl, gr) = (l.grad().expect("input leaf"), r.grad().expect("input leaf"));
    if !gl.is_finite() || !gr.is_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    Ok((v, gl, gr))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CraftTarget {
    /// The network's own clean prediction.
    PseudoGroundTruth,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CraftInit {
    Zero,
    /// Seeded i.i.d. uniform in `[-scale, scale]`, then projected onto ε.
    Uniform {
        scale: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CraftConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub tile_h: usize,
    pub tile_w: usize,
    pub passes: usize,
    pub seed: u64,
    pub target: CraftTarget,
    pub init: CraftInit,
    pub loss: LossSpec,
}

impl Default for CraftConfig {
    fn default() -> Self {
        CraftConfig {
            epsilon: 0.05,
            alpha: 0.005,
            tile_h: 32,
            tile_w: 32,
            passes: 5,
            seed: 0,
            target: CraftTarget::PseudoGroundTruth,
            init: CraftInit::Uniform { scale: 0.005 },
            loss: LossSpec {
                beta: 1.0,
                reduction: Reduction::Sum,
            },
        }
    }
}

impl CraftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, epsilon], got {} with epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        if self.passes == 0 {
            return Err(Error::Config("passes must be at least 1".into()));
        }
        if self.tile_h == 0 || self.tile_w == 0 {
            return Err(Error::Config("tile dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// `‖v_L‖∞` and `‖v_R‖∞` after every update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CraftLog {
    pub linf: Vec<(f64, f64)>,
    pub losses: Vec<f64>,
}

fn initial_tile(rng: &mut ChaCha8Rng, init: CraftInit, shape: &[usize], epsilon: f64) -> Tensor {
    match init {
        CraftInit::Zero => Tensor::zeros(shape),
        CraftInit::Uniform { scale } => {
            let t = Tensor::from_fn(shape, |_| {
                if scale > 0.0 {
                    rng.random_range(-scale..=scale)
                } else {
                    0.0
                }
            });
            project_linf(&t, epsilon)
        }
    }
}

/// Sequential universal-perturbation crafting over `data`.
pub fn craft_sup(net: &StereoNet, data: &[StereoSample], cfg: &CraftConfig) -> Result<(PerturbationPair, CraftLog)> {
    cfg.validate()?;
    if !net.trained {
        return Err(Error::Invalid("crafting needs a trained network".into()));
    }
    if data.is_empty() {
        return Err(Error::Invalid("crafting set is empty".into()));
    }
    for s in data {
        tile_grid(s.left.shape(), cfg.tile_h, cfg.tile_w)?;
    }
    let targets = match cfg.target {
        CraftTarget::PseudoGroundTruth => pseudo_ground_truth(net, data)?,
        CraftTarget::GroundTruth => data.iter().map(|s| s.gt_disparity.clone()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = [3, cfg.tile_h, cfg.tile_w];
    let mut sup = PerturbationPair {
        left: initial_tile(&mut rng, cfg.init, &shape, cfg.epsilon),
        right: initial_tile(&mut rng, cfg.init, &shape, cfg.epsilon),
        epsilon: cfg.epsilon,
        tile_h: cfg.tile_h,
        tile_w: cfg.tile_w,
    };
    let mut log = CraftLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.passes {
        order.shuffle(&mut rng);
        for &i in &order {
            let (xl, xr) = sup.apply(&data[i])?;
            let (loss, gl, gr) = input_gradients(net, &xl, &xr, &targets[i], &cfg.loss)?;
            for (v, g) in [(&mut sup.left, gl), (&mut sup.right, gr)] {
                let step = project_linf(&average_tile_gradients(&g, cfg.tile_h, cfg.tile_w)?, cfg.alpha);
                let mut next = v.clone();
                next.add_assign(&step);
                *v = project_linf(&next, cfg.epsilon);
            }
            log.linf.push((sup.left.max_abs(), sup.right.max_abs()));
            log.losses.push(loss);
        }
    }
    Ok((sup, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// i.i.d. `U(-ε, ε)`.
    Uniform,
    /// i.i.d. `N(0, (ε/4)²)` clamped to `[-ε, ε]`.
    Gaussian,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::Gaussian => "gaussian",
        }
    }
}

/// Standard deviation of Gaussian noise relative to the budget.
pub const GAUSSIAN_SIGMA_FRACTION: f64 = 0.25;

/// Independent noise on both views.
pub fn noise_attack(
    left: &Tensor,
    right: &Tensor,
    kind: NoiseKind,
    epsilon: f64,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, GAUSSIAN_SIGMA_FRACTION * epsilon).expect("positive sigma");
    let mut noisy = |x: &Tensor| {
        let noise = Tensor::from_fn(x.shape(), |_| match kind {
            NoiseKind::Uniform => rng.random_range(-epsilon..=epsilon),
            NoiseKind::Gaussian => normal.sample(&mut rng),
        });
        let mut out = project_linf(&noise, epsilon);
        out.add_assign(x);
        out
    };
    let l = noisy(left);
    let r = noisy(right);
    Ok((l, r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgsmConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    pub target: CraftTarget,
    pub init: CraftInit,
    pub loss: LossSpec,
}

impl FgsmConfig {
    pub fn new(epsilon: f64, steps: usize, seed: u64) -> Self {
        FgsmConfig {
            epsilon,
            steps,
            seed,
            target: CraftTarget::PseudoGroundTruth,
            init: CraftInit::Uniform { scale: epsilon / 10.0 },
            loss: CraftConfig::default().loss,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-image iterative sign-gradient attack over the full image; returns
/// the perturbed views.
pub fn fgsm_image_specific(net: &StereoNet, sample: &StereoSample, cfg: &FgsmConfig) -> Result<(Tensor, Tensor)> {
    if !(cfg.epsilon > 0.0) || cfg.steps == 0 {
        return Err(Error::Config("fgsm needs epsilon > 0 and at least one step".into()));
    }
    if !net.trained {
        return Err(Error::Invalid("attacking needs a trained network".into()));
    }
    let target = match cfg.target {
        CraftTarget::PseudoGroundTruth => net.predict(&sample.left, &sample.right)?,
        CraftTarget::GroundTruth => sample.gt_disparity.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = sample.left.shape().to_vec();
    let mut vl = initial_tile(&mut rng, cfg.init, &shape, cfg.epsilon);
    let mut vr = initial_tile(&mut rng, cfg.init, &shape, cfg.epsilon);
    let step = cfg.epsilon / cfg.steps as f64;
    let add = |x: &Tensor, v: &Tensor| {
        let mut o = x.clone();
        o.add_assign(v);
        o
    };
    for _ in 0..cfg.steps {
        let (xl, xr) = (add(&sample.left, &vl), add(&sample.right, &vr));
        let (_, gl, gr) = input_gradients(net, &xl, &xr, &target, &cfg.loss)?;
        for (v, g) in [(&mut vl, gl), (&mut vr, gr)] {
            let next = v.zip_map(&g, |a, b| a + step * sign(b))?;
            *v = project_linf(&next, cfg.epsilon);
        }
    }
    Ok((add(&sample.left, &vl), add(&sample.right, &vr)))
}
