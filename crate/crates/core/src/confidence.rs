//! Per-pixel reliability of disparity maps: a left-right consistency ramp
//! and a small learned estimator that reads the disparity map alone.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Graph, Param, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::formats::{ConfidenceMap, DisparityMap};
use crate::metrics::BAD_THRESHOLD;
use crate::nn;

/// Discrepancy (pixels) at which the consistency ramp reaches zero.
pub const LRC_RAMP: f32 = 3.0;

/// `max(0, 1 - |dl(x) - dr(x - round(dl(x)))| / 3)`; zero for sentinels and
/// for lookups falling outside the right view.
pub fn lrc_confidence(d_left: &DisparityMap, d_right: &DisparityMap) -> Result<ConfidenceMap> {
    let (w, h) = (d_left.width(), d_left.height());
    if (d_right.width(), d_right.height()) != (w, h) {
        return Err(Error::shape(
            format!("{w}x{h}"),
            format!("{}x{}", d_right.width(), d_right.height()),
        ));
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !d_left.is_valid_at(i) {
                continue;
            }
            let dl = d_left.data()[i];
            let xr = x as i64 - dl.round() as i64;
            if xr < 0 || xr >= w as i64 {
                continue;
            }
            let j = y * w + xr as usize;
            if !d_right.is_valid_at(j) {
                continue;
            }
            let diff = (dl - d_right.data()[j]).abs();
            out[i] = (1.0 - diff / LRC_RAMP).max(0.0);
        }
    }
    ConfidenceMap::new(w, h, out)
}

pub const CONFNET_KIND: &str = "confnet";

/// Hidden and output widths of the default estimator.
pub const CONFNET_CHANNELS: [usize; 4] = [16, 16, 16, 1];

/// Learned confidence estimator: a stack of same-padded 3x3 convolutions on
/// the normalised disparity map, leaky-ReLU between layers and a sigmoid on
/// the single output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfNetWeights {
    /// Disparity that maps to input value 1.
    pub d_max: f32,
    /// Output channels of each layer; the input has one channel.
    pub channels: Vec<usize>,
    pub params: Vec<Param>,
}

impl ConfNetWeights {
    /// All-zero weights for the given layer widths.
    pub fn zeros(d_max: f32, channels: &[usize]) -> Result<Self> {
        if channels.last() != Some(&1) {
            return Err(Error::Argument(
                "confidence network must end in one channel".into(),
            ));
        }
        if !(d_max > 0.0) {
            return Err(Error::Argument(format!("d_max must be positive, got {d_max}")));
        }
        Ok(Self {
            d_max,
            channels: channels.to_vec(),
            params: Self::template(channels),
        })
    }

    pub fn init(d_max: f32, seed: u64) -> Self {
        let mut w = Self::zeros(d_max, &CONFNET_CHANNELS).expect("default layout");
        nn::he_init(&mut w.params, seed);
        w
    }

    fn template(channels: &[usize]) -> Vec<Param> {
        let mut params = Vec::new();
        let mut cin = 1;
        for (i, c) in channels.iter().enumerate() {
            params.extend(nn::conv_params(&format!("conv{i}"), cin, *c));
            cin = *c;
        }
        params
    }

    fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![self.d_max.to_bits()];
        d.extend(self.channels.iter().map(|c| *c as u32));
        d
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::write_checkpoint(path, CONFNET_KIND, &self.descriptor(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = nn::read_checkpoint(path)?;
        let (first, rest) = ck
            .descriptor
            .split_first()
            .ok_or_else(|| Error::Format("empty confidence network descriptor".into()))?;
        let d_max = f32::from_bits(*first);
        let channels: Vec<usize> = rest.iter().map(|c| *c as usize).collect();
        let mut w = Self::zeros(d_max, &channels)?;
        w.params = ck.into_params(CONFNET_KIND, &w.params)?;
        Ok(w)
    }

    /// Network input: disparity divided by `d_max`, sentinels as 0.
    pub fn input_tensor(&self, disparity: &DisparityMap) -> Tensor {
        let scale = 1.0 / self.d_max as f64;
        nn::plane_tensor(
            disparity.width(),
            disparity.height(),
            (0..disparity.data().len()).map(|i| {
                if disparity.is_valid_at(i) {
                    disparity.data()[i] as f64 * scale
                } else {
                    0.0
                }
            }),
        )
    }

    /// Pre-sigmoid scores for `input` with parameters already on the tape.
    pub fn logits(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        nn::check_shapes(&self.params, &Self::template(&self.channels))?;
        if g.shape(input).channels != 1 {
            return Err(Error::shape(
                Shape::new(1, g.shape(input).height, g.shape(input).width),
                g.shape(input),
            ));
        }
        let mut x = input;
        let last = self.channels.len() - 1;
        for l in 0..=last {
            x = g.conv2d(x, vars[2 * l], vars[2 * l + 1], 1)?;
            if l < last {
                x = g.leaky_relu(x, nn::LEAKY_SLOPE)?;
            }
        }
        Ok(x)
    }

    /// Confidence in (0, 1) at every pixel.
    pub fn forward(&self, disparity: &DisparityMap) -> Result<ConfidenceMap> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.to_tensor()))
            .collect();
        let input = g.constant(self.input_tensor(disparity));
        let z = self.logits(&mut g, &vars, input)?;
        let p = g.sigmoid(z)?;
        ConfidenceMap::new(
            disparity.width(),
            disparity.height(),
            g.value(p).data.iter().map(|v| open_unit(*v)).collect(),
        )
    }
}

/// Rounds into the open unit interval so single precision never reports a
/// saturated sigmoid as exactly 0 or 1.
fn open_unit(p: f64) -> f32 {
    const LO: f32 = 1e-7;
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    (p as f32).clamp(LO, HI)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfNetTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// A label is correct when it lies within this many pixels of GT.
    pub threshold: f32,
}

impl Default for ConfNetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            lr: Adam::DEFAULT_LR,
            seed: 0,
            threshold: BAD_THRESHOLD as f32,
        }
    }
}

/// Training pair prepared for the loss: input tensor, labelled-pixel mask and
/// the per-pixel sign `1 - 2y` that turns BCE into `softplus(sign * z)`.
struct Example {
    input: Tensor,
    mask: Arc<[bool]>,
    sign: Tensor,
}

fn prepare(weights: &ConfNetWeights, d: &DisparityMap, gt: &DisparityMap, thr: f32) -> Result<Example> {
    if (d.width(), d.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape(
            format!("{}x{}", d.width(), d.height()),
            format!("{}x{}", gt.width(), gt.height()),
        ));
    }
    let n = d.data().len();
    let mask: Arc<[bool]> = (0..n).map(|i| d.is_valid_at(i) && gt.is_valid_at(i)).collect();
    let sign = (0..n)
        .map(|i| {
            if mask[i] && (d.data()[i] - gt.data()[i]).abs() <= thr {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    Ok(Example {
        input: weights.input_tensor(d),
        mask,
        sign: Tensor::new(Shape::new(1, d.height(), d.width()), sign)?,
    })
}

fn bce(weights: &ConfNetWeights, g: &mut Graph, vars: &[Var], ex: &Example) -> Result<Var> {
    let input = g.constant(ex.input.clone());
    let z = weights.logits(g, vars, input)?;
    let sign = g.constant(ex.sign.clone());
    let u = g.mul(z, sign)?;
    let l = g.softplus(u)?;
    g.masked_mean(l, ex.mask.clone())
}

/// Mean per-map binary cross-entropy over labelled pixels.
fn dataset_bce(weights: &ConfNetWeights, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let vars: Vec<Var> = weights
            .params
            .iter()
            .map(|p| g.constant(p.to_tensor()))
            .collect();
        let l = bce(weights, &mut g, &vars, ex)?;
        total += g.item(l);
    }
    Ok(total / examples.len() as f64)
}

/// Result of [`confnet_train`].
#[derive(Clone, Debug)]
pub struct ConfNetTraining {
    pub weights: ConfNetWeights,
    /// Training-set BCE before the first epoch and after every epoch.
    pub bce: Vec<f64>,
}

/// Fits `initial` to label each pixel of `D` as correct (`|D - GT| <= 3`) or
/// not. One map per Adam step, order reshuffled every epoch.
pub fn confnet_train(
    initial: &ConfNetWeights,
    dataset: &[(DisparityMap, DisparityMap)],
    cfg: &ConfNetTrainConfig,
) -> Result<ConfNetTraining> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut weights = initial.clone();
    let examples = dataset
        .iter()
        .map(|(d, gt)| prepare(&weights, d, gt, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut history = vec![dataset_bce(&weights, &examples)?];
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        for &k in &order {
            let mut g = Graph::new();
            let vars = nn::bind(&mut g, &weights.params);
            let loss = bce(&weights, &mut g, &vars, &examples[k])?;
            g.backward(loss)?;
            let grads = nn::collect_grads(&g, &vars);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
            let mut refs: Vec<&mut Param> = weights.params.iter_mut().collect();
            adam.step(&mut refs, &grad_refs)?;
        }
        history.push(dataset_bce(&weights, &examples)?);
    }
    Ok(ConfNetTraining {
        weights,
        bce: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};

    fn disp(w: usize, h: usize, v: Vec<f32>) -> DisparityMap {
        DisparityMap::new(w, h, v).unwrap()
    }

    #[test]
    fn lrc_ramp_values() {
        // right-view pixels at x - 2 hold 2, 0.5, 3.5, -5 and sentinel
        let dl = disp(6, 1, vec![2.0; 6]);
        let dr = disp(6, 1, vec![2.0, 0.5, 3.5, 5.0, -1.0, 0.0]);
        let c = lrc_confidence(&dl, &dr).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 1.0, 0.5, 0.5, 0.0]);
        let dr2 = disp(6, 1, vec![0.0, 2.0, 5.0, 0.0, 0.0, 0.0]);
        let c2 = lrc_confidence(&dl, &dr2).unwrap();
        assert_eq!(&c2.data()[2..5], &[1.0 - 2.0 / 3.0, 1.0, 0.0]);
    }

    #[test]
    fn lrc_sentinels_and_shape() {
        let dl = DisparityMap::invalid(4, 3);
        let c = lrc_confidence(&dl, &dl).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
        let other = DisparityMap::invalid(3, 3);
        assert!(matches!(lrc_confidence(&dl, &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_weights_give_half() {
        let w = ConfNetWeights::zeros(32.0, &CONFNET_CHANNELS).unwrap();
        let d = disp(7, 5, (0..35).map(|i| i as f32).collect());
        let c = w.forward(&d).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let mut w = ConfNetWeights::init(4.0, 3);
        for p in &mut w.params {
            for v in &mut p.data {
                *v *= 40.0;
            }
        }
        let d = disp(9, 6, (0..54).map(|i| (i % 7) as f32 * 3.0).collect());
        let c = w.forward(&d).unwrap();
        assert!(c.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn forward_shift_equivariant_in_interior() {
        let w = ConfNetWeights::init(16.0, 5);
        let (wd, h): (usize, usize) = (24, 12);
        let base: Vec<f32> = (0..wd * h)
            .map(|i| ((i * 7919) % 13) as f32)
            .collect();
        let shifted: Vec<f32> = (0..wd * h)
            .map(|i| {
                let (x, y) = (i % wd, i / wd);
                base[y * wd + x.saturating_sub(2)]
            })
            .collect();
        let a = w.forward(&disp(wd, h, base)).unwrap();
        let b = w.forward(&disp(wd, h, shifted)).unwrap();
        // receptive field radius 4; compare away from every border
        for y in 5..h - 5 {
            for x in 7..wd - 5 {
                assert_eq!(a.get(x - 2, y), b.get(x, y));
            }
        }
    }

    #[test]
    fn descriptor_mismatch_rejected() {
        let mut w = ConfNetWeights::init(8.0, 1);
        w.channels = vec![8, 1];
        let d = disp(4, 4, vec![1.0; 16]);
        assert!(matches!(w.forward(&d), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conf.bin");
        let w = ConfNetWeights::init(24.0, 11);
        w.save(&path).unwrap();
        assert_eq!(ConfNetWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn empty_dataset_rejected() {
        let w = ConfNetWeights::init(8.0, 0);
        let r = confnet_train(&w, &[], &ConfNetTrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    fn toy_pair(offset: f32, seed: usize) -> (DisparityMap, DisparityMap) {
        let (w, h) = (16, 12);
        let gt: Vec<f32> = (0..w * h).map(|i| ((i * 31 + seed * 7) % 17) as f32).collect();
        let d: Vec<f32> = gt.iter().map(|v| v + offset).collect();
        (disp(w, h, d), disp(w, h, gt))
    }

    #[test]
    fn all_correct_labels_drive_confidence_up() {
        let data: Vec<_> = (0..4).map(|s| toy_pair(0.0, s)).collect();
        let cfg = ConfNetTrainConfig {
            epochs: 30,
            lr: 0.01,
            ..Default::default()
        };
        let out = confnet_train(&ConfNetWeights::init(32.0, 2), &data, &cfg).unwrap();
        assert!(out.bce.last().unwrap() <= &out.bce[0]);
        for (d, _) in &data {
            assert!(out.weights.forward(d).unwrap().mean() >= 0.9);
        }
    }

    #[test]
    fn all_wrong_labels_drive_confidence_down() {
        let data: Vec<_> = (0..4).map(|s| toy_pair(10.0, s)).collect();
        let cfg = ConfNetTrainConfig {
            epochs: 30,
            lr: 0.01,
            ..Default::default()
        };
        let out = confnet_train(&ConfNetWeights::init(32.0, 2), &data, &cfg).unwrap();
        for (d, _) in &data {
            assert!(out.weights.forward(d).unwrap().mean() <= 0.1);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data: Vec<_> = (0..3).map(|s| toy_pair((s % 2) as f32 * 5.0, s)).collect();
        let cfg = ConfNetTrainConfig {
            epochs: 2,
            seed: 4,
            ..Default::default()
        };
        let init = ConfNetWeights::init(32.0, 2);
        let a = confnet_train(&init, &data, &cfg).unwrap();
        let b = confnet_train(&init, &data, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bce, b.bce);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = ConfNetWeights::init(8.0, 21);
        let (d, gt) = toy_pair(0.0, 1);
        let d = disp(
            8,
            8,
            d.data()[..64].iter().enumerate().map(|(i, v)| v + (i % 3) as f32 * 2.0).collect(),
        );
        let gt = disp(8, 8, gt.data()[..64].to_vec());
        let ex = prepare(&w, &d, &gt, 3.0).unwrap();
        let inputs: Vec<Tensor> = w.params.iter().map(|p| p.to_tensor()).collect();
        let report = grad_check(
            |g, vars| bce(&w, g, vars, &ex),
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
