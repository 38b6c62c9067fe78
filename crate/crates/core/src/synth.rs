//! Procedural rectified stereo scenes with exact ground truth.
//!
//! A scene is a stack of fronto-parallel layers: a background plane covering
//! the whole frame plus rectangles and ellipses at increasing disparity.
//! Every layer carries its own band-limited value-noise texture anchored in
//! left-image coordinates, so the right view is rendered exactly by sampling
//! each layer at `x + d` and keeping the nearest covering layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::formats::{DisparityMap, Image};

/// Appearance family of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Strong, fine texture and near disparities.
    A,
    /// Weak, coarse texture, brighter right view, far-shifted disparities.
    B,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            _ => Err(Error::Argument(format!("unknown domain `{s}`"))),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub domain: Domain,
    /// Total layers including the background plane.
    pub layers: usize,
    /// Inclusive disparity interval the layers are drawn from.
    pub disparity_range: (f32, f32),
    pub d_max: f32,
    /// Standard deviation of additive Gaussian noise, per view.
    pub noise_sigma: f32,
    /// Peak-to-peak texture amplitude.
    pub texture_amplitude: f32,
    /// Lattice spacing of the coarsest texture octave, in pixels.
    pub texture_scale: f32,
    /// Constant added to the right view only.
    pub right_brightness: f32,
}

impl SceneSpec {
    pub fn new(domain: Domain, seed: u64, width: usize, height: usize) -> Self {
        match domain {
            Domain::A => Self {
                seed,
                width,
                height,
                domain,
                layers: 5,
                disparity_range: (2.0, 16.0),
                d_max: 32.0,
                noise_sigma: 0.01,
                texture_amplitude: 0.6,
                texture_scale: 4.0,
                right_brightness: 0.0,
            },
            Domain::B => Self {
                seed,
                width,
                height,
                domain,
                layers: 5,
                disparity_range: (4.0, 14.0),
                d_max: 32.0,
                noise_sigma: 0.05,
                texture_amplitude: 0.25,
                texture_scale: 8.0,
                right_brightness: 0.15,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.disparity_range;
        if self.width < 8 || self.height < 8 {
            return Err(Error::Argument("scene must be at least 8x8".into()));
        }
        if self.layers == 0 {
            return Err(Error::Argument("a scene needs at least one layer".into()));
        }
        if !(lo >= 0.0 && lo <= hi && hi <= self.d_max) {
            return Err(Error::Argument(format!(
                "disparity range [{lo}, {hi}] must lie in [0, {}]",
                self.d_max
            )));
        }
        if self.noise_sigma < 0.0 || self.texture_amplitude < 0.0 || self.texture_scale <= 0.0 {
            return Err(Error::Argument("noise and texture parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rendered pair with ground truth for the left view.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub left: Image,
    pub right: Image,
    pub gt: DisparityMap,
    /// True where the left pixel is hidden in (or outside) the right view.
    pub occluded: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
enum Footprint {
    Everywhere,
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
}

impl Footprint {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Footprint::Everywhere => true,
            Footprint::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Footprint::Ellipse { cx, cy, rx, ry } => {
                let u = (x - cx) / rx;
                let v = (y - cy) / ry;
                u * u + v * v <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    footprint: Footprint,
    disparity: f32,
    base: f32,
    key: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(key: u64, i: i64, j: i64) -> f32 {
    let h = splitmix(key ^ splitmix((i as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix(j as u64)));
    (h >> 40) as f32 / (1u64 << 24) as f32 - 0.5
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise in roughly `[-0.5, 0.5]`.
fn value_noise(key: u64, x: f32, y: f32, scale: f32) -> f32 {
    let mut total = 0.0;
    let mut norm = 0.0;
    for (octave, weight) in [(0u64, 1.0f32), (1, 0.5)] {
        let s = scale / (1u32 << octave) as f32;
        let (u, v) = (x / s, y / s);
        let (i, j) = (u.floor(), v.floor());
        let (fu, fv) = (smooth(u - i), smooth(v - j));
        let k = splitmix(key ^ octave);
        let (i, j) = (i as i64, j as i64);
        let top = lattice(k, i, j) * (1.0 - fu) + lattice(k, i + 1, j) * fu;
        let bottom = lattice(k, i, j + 1) * (1.0 - fu) + lattice(k, i + 1, j + 1) * fu;
        total += weight * (top * (1.0 - fv) + bottom * fv);
        norm += weight;
    }
    total / norm * 2.0
}

fn build_layers(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let (w, h) = (spec.width as f32, spec.height as f32);
    let (lo, hi) = spec.disparity_range;
    let mut disparities: Vec<f32> = (0..spec.layers)
        .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect();
    disparities.sort_by(f32::total_cmp);
    // background takes the farthest disparity
    disparities.iter()
        .enumerate()
        .map(|(k, d)| {
            let footprint = if k == 0 {
                Footprint::Everywhere
            } else if rng.random_bool(0.5) {
                let fw = rng.random_range(0.15..0.45) * w;
                let fh = rng.random_range(0.25..0.7) * h;
                let x0 = rng.random_range(-0.1 * w..w - 0.5 * fw);
                let y0 = rng.random_range(-0.1 * h..h - 0.5 * fh);
                Footprint::Rect {
                    x0,
                    y0,
                    x1: x0 + fw,
                    y1: y0 + fh,
                }
            } else {
                Footprint::Ellipse {
                    cx: rng.random_range(0.0..w),
                    cy: rng.random_range(0.0..h),
                    rx: rng.random_range(0.08..0.25) * w,
                    ry: rng.random_range(0.15..0.4) * h,
                }
            };
            Layer {
                footprint,
                disparity: *d,
                base: rng.random_range(0.25..0.75),
                key: rng.random(),
            }
        })
        .collect()
}

fn shade(spec: &SceneSpec, layer: &Layer, x: f32, y: f32) -> f32 {
    layer.base + spec.texture_amplitude * value_noise(layer.key, x, y, spec.texture_scale)
}

/// Renders a scene. Deterministic in `spec`.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = build_layers(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);

    let front_left = |x: f32, y: f32| -> usize {
        (0..layers.len())
            .rev()
            .find(|k| layers[*k].footprint.contains(x, y))
            .unwrap_or(0)
    };
    // nearest layer visible at right-view position (xr, y)
    let front_right = |xr: f32, y: f32| -> usize {
        (0..layers.len())
            .rev()
            .find(|k| layers[*k].footprint.contains(xr + layers[*k].disparity, y))
            .unwrap_or(0)
    };

    let mut left = vec![0.0f32; w * h];
    let mut right = vec![0.0f32; w * h];
    let mut gt = vec![0.0f32; w * h];
    let mut occluded = vec![false; w * h];
    for y in 0..h {
        let fy = y as f32;
        for x in 0..w {
            let fx = x as f32;
            let k = front_left(fx, fy);
            let layer = &layers[k];
            left[y * w + x] = shade(spec, layer, fx, fy);
            gt[y * w + x] = layer.disparity;
            let xr = fx - layer.disparity;
            occluded[y * w + x] = xr < 0.0 || front_right(xr, fy) != k;

            let kr = front_right(fx, fy);
            let lr = &layers[kr];
            right[y * w + x] = shade(spec, lr, fx + lr.disparity, fy) + spec.right_brightness;
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::Argument(format!("noise sigma: {e}")))?;
        for v in left.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        for v in right.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    Ok(Scene {
        left: Image::from_clamped(w, h, left)?,
        right: Image::from_clamped(w, h, right)?,
        gt: DisparityMap::new(w, h, gt)?,
        occluded,
    })
}

/// `count` scenes with consecutive seeds starting at `first_seed`.
pub fn generate_set(
    domain: Domain,
    first_seed: u64,
    count: usize,
    width: usize,
    height: usize,
) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| generate(&SceneSpec::new(domain, first_seed + i, width, height)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_is_pure_shift() {
        let mut spec = SceneSpec::new(Domain::A, 3, 40, 12);
        spec.layers = 1;
        spec.noise_sigma = 0.0;
        spec.disparity_range = (5.0, 5.0);
        let s = generate(&spec).unwrap();
        assert!(s.gt.data().iter().all(|d| *d == 5.0));
        for y in 0..12 {
            for x in 5..40 {
                assert_eq!(s.right.get(x - 5, y), s.left.get(x, y));
            }
            for x in 0..5 {
                assert!(s.occluded[y * 40 + x]);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::new(Domain::B, 11, 32, 16);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SceneSpec::new(Domain::B, 12, 32, 16);
        assert_ne!(generate(&spec).unwrap().left, generate(&other).unwrap().left);
    }

    #[test]
    fn ground_truth_within_range() {
        for seed in 0..5 {
            let spec = SceneSpec::new(Domain::B, seed, 64, 32);
            let s = generate(&spec).unwrap();
            assert!(s
                .gt
                .data()
                .iter()
                .all(|d| *d >= spec.disparity_range.0 && *d <= spec.disparity_range.1));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SceneSpec::new(Domain::A, 0, 32, 32);
        spec.layers = 0;
        assert!(generate(&spec).is_err());
        let mut spec = SceneSpec::new(Domain::A, 0, 32, 32);
        spec.disparity_range = (4.0, 40.0);
        assert!(generate(&spec).is_err());
    }
}
