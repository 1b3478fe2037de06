//! Toy differentiable stereo networks.
//!
//! A shared convolutional encoder maps each view to features at
//! `1/downsample` resolution. Left and right features are fused into a cost
//! volume over `d_max / downsample` disparity hypotheses, either by explicit
//! correlation or by a learned per-pixel fusion of stacked features, then
//! optionally re-aggregated with adaptive offsets. A soft-argmin over the
//! disparity axis gives a sub-pixel estimate that is upsampled to full size.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supforge_tensor::{
    concat_fuse, conv2d, correlation_volume, deform_conv2d, isa_aggregate, smooth_l1, upsample_bilinear, Reduction,
    Tape, Tensor, Var,
};

use crate::error::{Error, Result};
use crate::scene::StereoSample;

const KERNEL: usize = 3;
const OFFSET_CHANNELS: usize = 2 * KERNEL * KERNEL;
const SLOPE: f64 = supforge_tensor::LEAKY_RELU_SLOPE;
/// Subtracted from every input intensity before the first layer.
const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostMode {
    /// Learned fusion of stacked features; no similarity measure.
    Concat,
    /// Explicit matching by feature correlation.
    Correlation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    Standard,
    Deformable,
}

impl CostMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CostMode::Concat => "concat",
            CostMode::Correlation => "correlation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "concat" => Some(CostMode::Concat),
            "correlation" => Some(CostMode::Correlation),
            _ => None,
        }
    }
}

impl ConvMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvMode::Standard => "standard",
            ConvMode::Deformable => "deformable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(ConvMode::Standard),
            "deformable" => Some(ConvMode::Deformable),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StereoNetConfig {
    pub encoder_layers: usize,
    pub channels: usize,
    /// Power of two; the first `log2(downsample)` encoder layers use stride 2.
    pub downsample: usize,
    /// Largest representable disparity at full resolution.
    pub d_max: usize,
    pub cost_mode: CostMode,
    pub conv_mode: ConvMode,
    /// Encoder layers that use deformable convolution.
    pub deformable_layers: BTreeSet<usize>,
    pub use_isa: bool,
    pub seed: u64,
}

impl Default for StereoNetConfig {
    fn default() -> Self {
        StereoNetConfig {
            encoder_layers: 4,
            channels: 16,
            downsample: 2,
            d_max: 24,
            cost_mode: CostMode::Correlation,
            conv_mode: ConvMode::Standard,
            deformable_layers: BTreeSet::new(),
            use_isa: false,
            seed: 0,
        }
    }
}

impl StereoNetConfig {
    /// Number of disparity hypotheses at feature resolution.
    pub fn d_max_feature(&self) -> usize {
        self.d_max / self.downsample
    }

    fn strided_layers(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Same config with deformable convolution on the given encoder layers.
    pub fn with_deformable(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.deformable_layers = layers.into_iter().collect();
        self.conv_mode = if self.deformable_layers.is_empty() {
            ConvMode::Standard
        } else {
            ConvMode::Deformable
        };
        self
    }

    pub fn is_deformable(&self, layer: usize) -> bool {
        self.conv_mode == ConvMode::Deformable && self.deformable_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.downsample.is_power_of_two() {
            return fail(format!("downsample {} is not a power of two", self.downsample));
        }
        if !self.d_max.is_multiple_of(self.downsample) {
            return fail(format!(
                "d_max {} not divisible by downsample {}",
                self.d_max, self.downsample
            ));
        }
        if self.d_max_feature() < 2 {
            return fail("need at least two disparity hypotheses".into());
        }
        if self.encoder_layers == 0 || self.encoder_layers < self.strided_layers() {
            return fail(format!(
                "{} encoder layers cannot reach downsample {}",
                self.encoder_layers, self.downsample
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if let Some(bad) = self.deformable_layers.iter().find(|&&l| l >= self.encoder_layers) {
            return fail(format!(
                "deformable layer {bad} outside encoder of {} layers",
                self.encoder_layers
            ));
        }
        match (self.conv_mode, self.deformable_layers.is_empty()) {
            (ConvMode::Deformable, true) => fail("deformable conv_mode needs at least one deformable layer".into()),
            (ConvMode::Standard, false) => fail("standard conv_mode cannot list deformable layers".into()),
            _ => Ok(()),
        }
    }

    fn layer_in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            3
        } else {
            self.channels
        }
    }

    /// Hidden width of the concat-mode fusion MLP.
    fn fusion_hidden(&self) -> usize {
        self.channels
    }

    /// Closed-form parameter count:
    /// encoder `Σ_l 9·c_in(l)·C + C`, plus `18·9·c_in(l) + 18` per deformable
    /// layer, plus `2C·F + F + F + 1` for concat fusion (F hidden units), plus
    /// `9 + 18·9·D + 18` for adaptive aggregation over D hypotheses.
    pub fn parameter_count(&self) -> usize {
        let k2 = KERNEL * KERNEL;
        let c = self.channels;
        let mut n = 0;
        for l in 0..self.encoder_layers {
            let cin = self.layer_in_channels(l);
            n += k2 * cin * c + c;
            if self.is_deformable(l) {
                n += OFFSET_CHANNELS * k2 * cin + OFFSET_CHANNELS;
            }
        }
        if self.cost_mode == CostMode::Concat {
            let f = self.fusion_hidden();
            n += 2 * c * f + f + f + 1;
        }
        if self.use_isa {
            n += k2 + OFFSET_CHANNELS * k2 * self.d_max_feature() + OFFSET_CHANNELS;
        }
        n
    }

    /// Short identifier, e.g. `corr-dc4-isa`.
    pub fn tag(&self) -> String {
        let mut s = match self.cost_mode {
            CostMode::Concat => "concat".to_string(),
            CostMode::Correlation => "corr".to_string(),
        };
        s += &format!(
            "-dc{}",
            if self.conv_mode == ConvMode::Deformable {
                self.deformable_layers.len()
            } else {
                0
            }
        );
        if self.use_isa {
            s += "-isa";
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub beta: f64,
    pub reduction: Reduction,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            beta: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossSpec {
    /// Smooth-L1 over pixels with `target > 0`.
    pub fn apply<'t>(&self, pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
        Ok(smooth_l1(pred, target, self.beta, self.reduction)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoNet {
    pub config: StereoNetConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Set once the network has been through [`train`].
    pub trained: bool,
}

/// Parameters recorded on a tape.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    fn get(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }

    pub fn var(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

pub struct ForwardOutput<'t> {
    /// `[H, W]` disparity in pixels.
    pub disparity: Var<'t>,
    /// Per encoder layer, post-activation.
    pub left_features: Vec<Var<'t>>,
    pub right_features: Vec<Var<'t>>,
    /// Aggregated cost volume `[D, h, w]` fed to the soft-argmin.
    pub cost: Var<'t>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-s..s))
}

/// Soft-argmin over axis 0 of a `[D, h, w]` cost volume: `Σ_d d·softmax(−cost)`.
pub fn soft_argmin<'t>(cost: Var<'t>) -> Result<Var<'t>> {
    let shape = cost.shape();
    let (d, plane) = (shape[0], shape[1] * shape[2]);
    let probs = cost.neg().softmax(0)?;
    let index = cost.tape().constant(Tensor::from_fn(&shape, |i| (i / plane) as f64));
    debug_assert!(d > 0);
    Ok(probs.mul(index)?.sum_axis(0)?)
}

/// Soft-argmin, scaled by `downsample` and upsampled to full resolution.
pub fn disparity_head<'t>(cost: Var<'t>, downsample: usize) -> Result<Var<'t>> {
    let shape = cost.shape();
    let (h, w) = (shape[1], shape[2]);
    let d = soft_argmin(cost)?.reshape(&[1, h, w])?;
    let up = upsample_bilinear(d, downsample)?.scalar_mul(downsample as f64);
    Ok(up.reshape(&[h * downsample, w * downsample])?)
}

impl StereoNet {
    /// Seeded initialisation. Conv weights are Glorot-uniform, biases zero,
    /// offset branches exactly zero, the aggregation kernel the identity.
    pub fn init(config: &StereoNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let c = config.channels;
        for l in 0..config.encoder_layers {
            let cin = config.layer_in_channels(l);
            params.insert(format!("enc{l}.weight"), glorot(&mut rng, &[c, cin, KERNEL, KERNEL]));
            params.insert(format!("enc{l}.bias"), Tensor::zeros(&[c]));
            if config.is_deformable(l) {
                params.insert(
                    format!("enc{l}.offset.weight"),
                    Tensor::zeros(&[OFFSET_CHANNELS, cin, KERNEL, KERNEL]),
                );
                params.insert(format!("enc{l}.offset.bias"), Tensor::zeros(&[OFFSET_CHANNELS]));
            }
        }
        if config.cost_mode == CostMode::Concat {
            let f = config.fusion_hidden();
            params.insert("fuse.weight".into(), glorot(&mut rng, &[f, 2 * c, 1, 1]));
            params.insert("fuse.bias".into(), Tensor::zeros(&[f]));
            params.insert("score.weight".into(), glorot(&mut rng, &[1, f, 1, 1]));
            params.insert("score.bias".into(), Tensor::zeros(&[1]));
        }
        if config.use_isa {
            let mut kernel = Tensor::zeros(&[KERNEL * KERNEL]);
            kernel.data_mut()[KERNEL * KERNEL / 2] = 1.0;
            params.insert("isa.weight".into(), kernel);
            params.insert(
                "isa.offset.weight".into(),
                Tensor::zeros(&[OFFSET_CHANNELS, config.d_max_feature(), KERNEL, KERNEL]),
            );
            params.insert("isa.offset.bias".into(), Tensor::zeros(&[OFFSET_CHANNELS]));
        }
        Ok(StereoNet {
            config: config.clone(),
            params,
            trained: false,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Encoder activations for one `[3, H, W]` view, one per layer.
    pub fn encode<'t>(&self, p: &BoundParams<'t>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        let cfg = &self.config;
        let mut feats = Vec::with_capacity(cfg.encoder_layers);
        let mut h = image.add(image.tape().constant(Tensor::full(&image.shape(), -INPUT_MEAN)))?;
        for l in 0..cfg.encoder_layers {
            let stride = if l < cfg.strided_layers() { 2 } else { 1 };
            let (w, b) = (p.get(&format!("enc{l}.weight")), p.get(&format!("enc{l}.bias")));
            let y = if cfg.is_deformable(l) {
                let off = conv2d(
                    h,
                    p.get(&format!("enc{l}.offset.weight")),
                    p.get(&format!("enc{l}.offset.bias")),
                    stride,
                    1,
                )?;
                deform_conv2d(h, w, b, off, stride, 1)?
            } else {
                conv2d(h, w, b, stride, 1)?
            };
            let y = if l + 1 < cfg.encoder_layers {
                y.leaky_relu(SLOPE)
            } else {
                y
            };
            feats.push(y);
            h = y;
        }
        Ok(feats)
    }

    /// Cost volume `[D, h, w]`; lower cost means a better match.
    pub fn cost_volume<'t>(&self, p: &BoundParams<'t>, left: Var<'t>, right: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        let d = cfg.d_max_feature();
        let shape = left.shape();
        let (h, w) = (shape[1], shape[2]);
        let cost = match cfg.cost_mode {
            CostMode::Correlation => correlation_volume(left, right, d)?.neg(),
            CostMode::Concat => {
                let hidden = concat_fuse(left, right, p.get("fuse.weight"), p.get("fuse.bias"), d)?.leaky_relu(SLOPE);
                conv2d(hidden, p.get("score.weight"), p.get("score.bias"), 1, 0)?.reshape(&[d, h, w])?
            }
        };
        if !cfg.use_isa {
            return Ok(cost);
        }
        let off = conv2d(cost, p.get("isa.offset.weight"), p.get("isa.offset.bias"), 1, 1)?;
        Ok(isa_aggregate(cost, p.get("isa.weight"), off)?)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Invalid(format!("expected a [3, H, W] image, got {s:?}")));
        }
        let ds = self.config.downsample;
        for (dim, v) in [("height", s[1]), ("width", s[2])] {
            if v % ds != 0 {
                return Err(Error::Divisibility {
                    what: "network input",
                    dim,
                    got: v,
                    by: ds,
                });
            }
        }
        if s[2] / ds <= self.config.d_max_feature() {
            return Err(Error::Invalid(format!(
                "width {} too small for {} disparity hypotheses",
                s[2],
                self.config.d_max_feature()
            )));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, left: Var<'t>, right: Var<'t>) -> Result<ForwardOutput<'t>> {
        self.check_input(&left.value())?;
        if left.shape() != right.shape() {
            return Err(Error::Invalid("left and right views differ in size".into()));
        }
        let left_features = self.encode(p, left)?;
        let right_features = self.encode(p, right)?;
        let cost = self.cost_volume(p, *left_features.last().unwrap(), *right_features.last().unwrap())?;
        let disparity = disparity_head(cost, self.config.downsample)?;
        Ok(ForwardOutput {
            disparity,
            left_features,
            right_features,
            cost,
        })
    }

    /// Disparity for a stereo pair, detached from any tape.
    pub fn predict(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(&p, tape.constant(left.clone()), tape.constant(right.clone()))?;
        let d = out.disparity.value();
        if !d.is_finite() {
            return Err(Error::NonFinite("forward".into()));
        }
        Ok((*d).clone())
    }

    /// Encoder activations for one view, detached.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self
            .encode(&p, tape.constant(image.clone()))?
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect())
    }

    /// One gradient-descent step on a single pair; returns the loss.
    pub fn sgd_step(
        &mut self,
        left: &Tensor,
        right: &Tensor,
        target: &Tensor,
        loss: &LossSpec,
        opt: &Sgd,
    ) -> Result<f64> {
        let tape = Tape::new();
        let p = self.bind(&tape, true);
        let out = self.forward(&p, tape.constant(left.clone()), tape.constant(right.clone()))?;
        let l = loss.apply(out.disparity, target)?;
        let value = l.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if opt.lr == 0.0 {
            return Ok(value);
        }
        tape.backward(l)?;
        // Offset-branch gradients are scaled before the norm is taken so the
        // clip acts on the actual update direction.
        let grads: Vec<(&String, Tensor)> = p
            .iter()
            .map(|(n, v)| {
                let g = v.grad().expect("trainable parameter");
                let g = if n.contains(".offset.") {
                    g.map(|x| x * opt.offset_lr_scale)
                } else {
                    g
                };
                (n, g)
            })
            .collect();
        let norm = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("training gradient".into()));
        }
        let step = match opt.max_grad_norm {
            Some(m) if norm > m => opt.lr * m / norm,
            _ => opt.lr,
        };
        for (name, g) in grads {
            let param = self.params.get_mut(name).expect("bound from params");
            for (w, gv) in param.data_mut().iter_mut().zip(g.data()) {
                *w -= step * gv;
            }
        }
        Ok(value)
    }
}

/// Plain gradient descent, optionally rescaling the full gradient to at most
/// `max_grad_norm`. Offset-branch parameters step at `offset_lr_scale · lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub offset_lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub offset_lr_scale: f64,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.15,
            max_grad_norm: Some(1.0),
            offset_lr_scale: 0.01,
            loss: LossSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for `net`: concat fusion gets a much slower offset branch,
    /// since its offsets otherwise drift off the feature grid.
    pub fn for_net(net: &StereoNetConfig) -> Self {
        let offset_lr_scale = match net.cost_mode {
            CostMode::Correlation => 0.01,
            CostMode::Concat => 1e-4,
        };
        TrainConfig {
            offset_lr_scale,
            seed: net.seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Per-sample SGD against ground truth, visiting samples in a seeded
/// shuffled order every epoch.
pub fn train(net: &StereoNet, data: &[StereoSample], cfg: &TrainConfig) -> Result<(StereoNet, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let opt = Sgd {
        lr: cfg.lr,
        max_grad_norm: cfg.max_grad_norm,
        offset_lr_scale: cfg.offset_lr_scale,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &data[i];
            total += net.sgd_step(&s.left, &s.right, &s.gt_disparity, &cfg.loss, &opt)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    net.trained = true;
    Ok((net, TrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        StereoNetConfig::default().validate().unwrap();
        assert_eq!(StereoNetConfig::default().d_max_feature(), 12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = StereoNetConfig::default();
        let bad = [
            StereoNetConfig {
                d_max: 25,
                ..base.clone()
            },
            StereoNetConfig {
                downsample: 3,
                ..base.clone()
            },
            StereoNetConfig {
                encoder_layers: 0,
                ..base.clone()
            },
            base.clone().with_deformable([4]),
            StereoNetConfig {
                conv_mode: ConvMode::Deformable,
                ..base.clone()
            },
        ];
        for cfg in bad {
            assert!(StereoNet::init(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        let base = StereoNetConfig::default();
        for cfg in [
            base.clone(),
            StereoNetConfig {
                cost_mode: CostMode::Concat,
                ..base.clone()
            },
            base.clone().with_deformable([0, 3]),
            StereoNetConfig {
                use_isa: true,
                ..base.clone().with_deformable(0..4)
            },
        ] {
            let net = StereoNet::init(&cfg).unwrap();
            assert_eq!(net.parameter_count(), cfg.parameter_count(), "{}", cfg.tag());
        }
        // default: 3→16 then three 16→16 layers
        assert_eq!(base.parameter_count(), (27 * 16 + 16) + 3 * (144 * 16 + 16));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = StereoNetConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(StereoNet::init(&cfg).unwrap(), StereoNet::init(&cfg).unwrap());
        let other = StereoNetConfig {
            seed: 12,
            ..Default::default()
        };
        assert_ne!(
            StereoNet::init(&cfg).unwrap().params,
            StereoNet::init(&other).unwrap().params
        );
    }

    #[test]
    fn constant_cost_gives_mid_disparity() {
        let tape = Tape::new();
        let cost = tape.constant(Tensor::full(&[12, 3, 5], 0.7));
        let d = disparity_head(cost, 2).unwrap();
        for &v in d.value().data() {
            assert!((v - 2.0 * 11.0 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = StereoNet::init(&StereoNetConfig::default()).unwrap();
        let img = Tensor::zeros(&[3, 33, 64]);
        assert!(matches!(net.predict(&img, &img), Err(Error::Divisibility { .. })));
    }
}
