//! Synthetic rectified stereo pairs with exact integer disparity.
//!
//! Scenes are layered sprites over a fronto-parallel background. Each layer
//! has a single integer disparity, so the right view is the left view with
//! every layer shifted left by its disparity, re-composited nearest-on-top.
//! Textures are pure functions of layer-local integer coordinates, which
//! makes `left(i, j) == right(i, j - d)` hold exactly on every visible pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supforge_tensor::Tensor;

use crate::error::{Error, Result};

/// Tile sizes up to this extent must divide the image.
pub const MAX_TILE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum RegionLabel {
    Background = 0,
    Flat = 1,
    Checker = 2,
    Noise = 3,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 4] = [
        RegionLabel::Background,
        RegionLabel::Flat,
        RegionLabel::Checker,
        RegionLabel::Noise,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionLabel::Background => "background",
            RegionLabel::Flat => "flat",
            RegionLabel::Checker => "checker",
            RegionLabel::Noise => "noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_max: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    /// Relative weights of flat, checker and noise sprite textures.
    pub texture_weights: [f64; 3],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 128,
            d_max: 24,
            min_sprites: 3,
            max_sprites: 6,
            texture_weights: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (dim, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % MAX_TILE != 0 {
                return Err(Error::Divisibility {
                    what: "scene",
                    dim,
                    got: v,
                    by: MAX_TILE,
                });
            }
        }
        if 4 * self.d_max >= self.width {
            return Err(Error::Config(format!(
                "d_max {} must be below width/4 = {}",
                self.d_max,
                self.width / 4
            )));
        }
        if self.d_max < 4 {
            return Err(Error::Config(format!("d_max {} must be at least 4", self.d_max)));
        }
        if self.min_sprites > self.max_sprites {
            return Err(Error::Config("min_sprites exceeds max_sprites".into()));
        }
        if self.texture_weights.iter().any(|w| !(*w >= 0.0)) || self.texture_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "texture weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    /// Background disparity range (inclusive).
    fn background_range(&self) -> (usize, usize) {
        (1, 3.min(self.d_max / 4).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    /// Left-view disparity in pixels.
    pub gt_disparity: Tensor,
    pub region_labels: Vec<RegionLabel>,
    /// Left pixels whose scene point is also seen at `(i, j - d)` in the right view.
    pub visible: Vec<bool>,
    pub seed: u64,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt_disparity.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt_disparity.shape()[1]
    }

    pub fn occluded_fraction(&self) -> f64 {
        self.visible.iter().filter(|v| !**v).count() as f64 / self.visible.len() as f64
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Flat([f64; 3]),
    /// Blocky two-tone mosaic; a per-cell hash picks the bright or dark base
    /// and jitters it, so the pattern is not periodic.
    Checker {
        cell: i64,
        bright: [f64; 3],
        dark: [f64; 3],
    },
    /// Lattice noise with spacing `cell`, bilinearly interpolated.
    Noise {
        base: [f64; 3],
        amplitude: f64,
        cell: i64,
    },
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    /// Left-view bounding box.
    top: i64,
    left: i64,
    h: i64,
    w: i64,
    shape: Shape,
    disparity: usize,
    texture: Texture,
    label: RegionLabel,
    key: u64,
}

impl Layer {
    fn covers(&self, i: i64, j: i64) -> bool {
        let (y, x) = (i - self.top, j - self.left);
        match self.shape {
            Shape::Rect => y >= 0 && x >= 0 && y < self.h && x < self.w,
            Shape::Ellipse => {
                let cy = (self.h as f64 - 1.0) / 2.0;
                let cx = (self.w as f64 - 1.0) / 2.0;
                let (ry, rx) = (self.h as f64 / 2.0, self.w as f64 / 2.0);
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Colour at left-view pixel coordinates; any integer input is valid.
    fn color(&self, i: i64, j: i64) -> [f64; 3] {
        let (y, x) = (i - self.top, j - self.left);
        match self.texture {
            Texture::Flat(c) => c,
            Texture::Checker { cell, bright, dark } => {
                let (cy, cx) = (y.div_euclid(cell), x.div_euclid(cell));
                let base = if unit_hash(self.key, cy, cx, 5) < 0.5 {
                    bright
                } else {
                    dark
                };
                let jitter = unit_hash(self.key, cy, cx, 7) * 0.16 - 0.08;
                base.map(|v| quantize(v + jitter))
            }
            Texture::Noise { base, amplitude, cell } => {
                let (cy, fy) = (y.div_euclid(cell), y.rem_euclid(cell) as f64 / cell as f64);
                let (cx, fx) = (x.div_euclid(cell), x.rem_euclid(cell) as f64 / cell as f64);
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let at = |a: i64, b: i64| unit_hash(self.key, a, b, c as u64) - 0.5;
                    let top = at(cy, cx) * (1.0 - fx) + at(cy, cx + 1) * fx;
                    let bottom = at(cy + 1, cx) * (1.0 - fx) + at(cy + 1, cx + 1) * fx;
                    let n = top * (1.0 - fy) + bottom * fy;
                    *o = quantize(base[c] + amplitude * n);
                }
                out
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic hash of (key, y, x, channel) into [0, 1).
fn unit_hash(key: u64, y: i64, x: i64, channel: u64) -> f64 {
    let h = splitmix(key ^ splitmix(y as u64 ^ splitmix((x as u64) ^ (channel << 56))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Snap to the 8-bit grid so images survive a PPM round trip unchanged.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0; 3].map(|_| quantize(rng.random_range(lo..hi)))
}

fn random_texture(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> (Texture, RegionLabel) {
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut kind = 2;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            kind = i;
            break;
        }
        pick -= w;
    }
    match kind {
        0 => (Texture::Flat(random_color(rng, 0.1, 0.9)), RegionLabel::Flat),
        1 => (checker(rng), RegionLabel::Checker),
        _ => (noise(rng), RegionLabel::Noise),
    }
}

fn checker(rng: &mut ChaCha8Rng) -> Texture {
    Texture::Checker {
        cell: rng.random_range(2..=5),
        bright: random_color(rng, 0.55, 0.9),
        dark: random_color(rng, 0.1, 0.45),
    }
}

fn noise(rng: &mut ChaCha8Rng) -> Texture {
    Texture::Noise {
        base: random_color(rng, 0.3, 0.7),
        amplitude: rng.random_range(0.5..0.9),
        cell: rng.random_range(2..=3),
    }
}

/// Renders one sample from `cfg` (its `seed` included).
pub fn generate(cfg: &SceneConfig) -> Result<StereoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let (bg_lo, bg_hi) = cfg.background_range();
    let bg_disp = rng.random_range(bg_lo..=bg_hi);
    let bg_texture = if rng.random_bool(0.5) {
        checker(&mut rng)
    } else {
        noise(&mut rng)
    };
    let background = Layer {
        top: 0,
        left: 0,
        h,
        w,
        shape: Shape::Rect,
        disparity: bg_disp,
        texture: bg_texture,
        label: RegionLabel::Background,
        key: splitmix(cfg.seed ^ 0xB6),
    };

    let n_sprites = rng.random_range(cfg.min_sprites..=cfg.max_sprites);
    let mut layers = Vec::with_capacity(n_sprites);
    for s in 0..n_sprites {
        let sh = rng.random_range(h / 6..=h / 2);
        let sw = rng.random_range(w / 10..=w / 3);
        let top = rng.random_range(-sh / 4..=h - sh + sh / 4);
        let left = rng.random_range(0..=w - sw / 2);
        let disparity = rng.random_range(bg_disp + 1..=cfg.d_max);
        let (texture, label) = random_texture(&mut rng, &cfg.texture_weights);
        let shape = if rng.random_bool(0.5) {
            Shape::Rect
        } else {
            Shape::Ellipse
        };
        layers.push(Layer {
            top,
            left,
            h: sh,
            w: sw,
            shape,
            disparity,
            texture,
            label,
            key: splitmix(cfg.seed.wrapping_mul(31).wrapping_add(s as u64 + 1)),
        });
    }
    // Painter's order: farthest first, nearest (largest disparity) last.
    layers.sort_by_key(|l| l.disparity);

    // Topmost layer index per view; usize::MAX is the background.
    const BG: usize = usize::MAX;
    let topmost = |i: i64, j: i64, shift: bool| -> usize {
        layers
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| l.covers(i, if shift { j + l.disparity as i64 } else { j }))
            .map_or(BG, |(k, _)| k)
    };
    let layer = |k: usize| if k == BG { &background } else { &layers[k] };

    let (hu, wu) = (cfg.height, cfg.width);
    let plane = hu * wu;
    let mut left = vec![0.0; 3 * plane];
    let mut right = vec![0.0; 3 * plane];
    let mut disp = vec![0.0; plane];
    let mut labels = vec![RegionLabel::Background; plane];
    let mut left_id = vec![BG; plane];
    let mut right_id = vec![BG; plane];
    for i in 0..h {
        for j in 0..w {
            let q = (i * w + j) as usize;
            let kl = topmost(i, j, false);
            let ll = layer(kl);
            let cl = ll.color(i, j);
            let kr = topmost(i, j, true);
            let lr = layer(kr);
            let cr = lr.color(i, j + lr.disparity as i64);
            for c in 0..3 {
                left[c * plane + q] = cl[c];
                right[c * plane + q] = cr[c];
            }
            disp[q] = ll.disparity as f64;
            labels[q] = ll.label;
            left_id[q] = kl;
            right_id[q] = kr;
        }
    }
    let visible = (0..plane)
        .map(|q| {
            let (i, j) = (q / wu, q % wu);
            let d = disp[q] as usize;
            j >= d && right_id[i * wu + j - d] == left_id[q]
        })
        .collect();

    Ok(StereoSample {
        left: Tensor::new(&[3, hu, wu], left)?,
        right: Tensor::new(&[3, hu, wu], right)?,
        gt_disparity: Tensor::new(&[hu, wu], disp)?,
        region_labels: labels,
        visible,
        seed: cfg.seed,
    })
}

/// `n` samples, sample `i` rendered with seed `base_seed + i`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, base_seed: u64) -> Result<Vec<StereoSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..n as u64)
        .map(|i| {
            generate(&SceneConfig {
                seed: base_seed.wrapping_add(i),
                ..cfg.clone()
            })
        })
        .collect()
}

/// Visibility recovered from a disparity map alone: a left pixel is hidden
/// when it falls off the right view or a nearer pixel to its right lands on
/// the same right-view column. Used for samples loaded from disk.
pub fn visibility_from_disparity(gt: &Tensor) -> Vec<bool> {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let mut visible = vec![false; h * w];
    for i in 0..h {
        let row = &gt.data()[i * w..(i + 1) * w];
        // nearest disparity landing on each right column
        let mut best = vec![f64::NEG_INFINITY; w];
        for (j, &d) in row.iter().enumerate() {
            let x = j as f64 - d;
            if x >= 0.0 {
                let xi = x.round() as usize;
                best[xi] = best[xi].max(d);
            }
        }
        for (j, &d) in row.iter().enumerate() {
            let x = j as f64 - d;
            visible[i * w + j] = x >= 0.0 && best[x.round() as usize] <= d;
        }
    }
    visible
}
