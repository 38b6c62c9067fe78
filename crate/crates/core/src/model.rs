//! TinyDispNet: a three-level convolutional encoder-decoder with skip
//! connections that regresses disparity in `[0, d_max]`.
//!
//! ```text
//! x (in) ─ conv s2 ─ e1 (16) ─ conv s2 ─ e2 (32) ─ conv s2 ─ e3 (64)
//!                                                             │ up
//!                              e2 ─────────── concat ─ conv ─ d2 (32)
//!                                                             │ up
//!               e1 ─────────── concat ─ conv ──────────────── d1 (16)
//!                                                             │ up
//! x ─────────── concat ─ conv ─ d0 (8) ─ conv ─ d_max * sigmoid
//! ```
//!
//! Inputs whose sides are not multiples of 8 are edge-replicated on the
//! right and bottom, and the prediction is cropped back.

use std::path::Path;

use crate::autodiff::{Graph, Param, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::formats::{DisparityMap, Image};
use crate::nn;

pub const MODEL_KIND: &str = "tinydispnet";

/// Spatial sides must be multiples of this (three stride-2 levels).
pub const ALIGNMENT: usize = 8;

/// Encoder widths; the decoder mirrors them down to [`DECODER_OUT`].
pub const ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];
pub const DECODER_OUT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelMode {
    /// Left image only.
    Mono,
    /// Left and right images stacked as two channels.
    Stereo,
}

impl ModelMode {
    pub fn input_channels(self) -> usize {
        match self {
            ModelMode::Mono => 1,
            ModelMode::Stereo => 2,
        }
    }
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono" => Ok(ModelMode::Mono),
            "stereo" => Ok(ModelMode::Stereo),
            _ => Err(Error::Argument(format!("unknown model mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Mono => "mono",
            ModelMode::Stereo => "stereo",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyDispNet {
    pub mode: ModelMode,
    pub d_max: f32,
    pub params: Vec<Param>,
}

/// Input planes after padding, plus the size to crop back to.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub tensor: Tensor,
    pub width: usize,
    pub height: usize,
}

impl TinyDispNet {
    pub fn zeros(mode: ModelMode, d_max: f32) -> Result<Self> {
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::Argument(format!("d_max must be positive, got {d_max}")));
        }
        Ok(Self {
            mode,
            d_max,
            params: Self::template(mode),
        })
    }

    /// He-initialised weights, zero biases.
    pub fn init(mode: ModelMode, d_max: f32, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(mode, d_max)?;
        nn::he_init(&mut net.params, seed);
        Ok(net)
    }

    fn template(mode: ModelMode) -> Vec<Param> {
        let cin = mode.input_channels();
        let [c1, c2, c3] = ENCODER_CHANNELS;
        [
            nn::conv_params("enc1", cin, c1),
            nn::conv_params("enc2", c1, c2),
            nn::conv_params("enc3", c2, c3),
            nn::conv_params("dec2", c3 + c2, c2),
            nn::conv_params("dec1", c2 + c1, c1),
            nn::conv_params("dec0", c1 + cin, DECODER_OUT),
            nn::conv_params("head", DECODER_OUT, 1),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn parameter_count(&self) -> usize {
        nn::parameter_count(&self.params)
    }

    /// Stacks, pads and converts the views. `right` is required in stereo
    /// mode and ignored in mono mode.
    pub fn input(&self, left: &Image, right: Option<&Image>) -> Result<ModelInput> {
        let views: Vec<&Image> = match (self.mode, right) {
            (ModelMode::Mono, _) => vec![left],
            (ModelMode::Stereo, Some(r)) => {
                if (r.width(), r.height()) != (left.width(), left.height()) {
                    return Err(Error::shape(
                        (left.width(), left.height()),
                        (r.width(), r.height()),
                    ));
                }
                vec![left, r]
            }
            (ModelMode::Stereo, None) => {
                return Err(Error::Argument("stereo model needs a right image".into()))
            }
        };
        let (w, h) = (left.width(), left.height());
        let (pw, ph) = (w.next_multiple_of(ALIGNMENT), h.next_multiple_of(ALIGNMENT));
        let mut data = Vec::with_capacity(views.len() * pw * ph);
        for v in views {
            for y in 0..ph {
                for x in 0..pw {
                    data.push(v.get(x.min(w - 1), y.min(h - 1)) as f64);
                }
            }
        }
        Ok(ModelInput {
            tensor: Tensor::new(Shape::new(self.mode.input_channels(), ph, pw), data)?,
            width: w,
            height: h,
        })
    }

    /// Prediction `(1, h, w)` for an input already on the tape. `vars` are
    /// the parameters in declaration order.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var, width: usize, height: usize) -> Result<Var> {
        nn::check_shapes(&self.params, &Self::template(self.mode))?;
        let s = g.shape(input);
        if s.channels != self.mode.input_channels() {
            return Err(Error::shape(self.mode.input_channels(), s.channels));
        }
        if s.height % ALIGNMENT != 0 || s.width % ALIGNMENT != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} is not a multiple of {ALIGNMENT}",
                s.width, s.height
            )));
        }
        let slope = nn::LEAKY_SLOPE;
        let conv = |g: &mut Graph, x: Var, layer: usize, stride: usize| -> Result<Var> {
            let y = g.conv2d(x, vars[2 * layer], vars[2 * layer + 1], stride)?;
            g.leaky_relu(y, slope)
        };
        let e1 = conv(g, input, 0, 2)?;
        let e2 = conv(g, e1, 1, 2)?;
        let e3 = conv(g, e2, 2, 2)?;
        let u = g.upsample2x(e3)?;
        let u = g.concat(u, e2)?;
        let d2 = conv(g, u, 3, 1)?;
        let u = g.upsample2x(d2)?;
        let u = g.concat(u, e1)?;
        let d1 = conv(g, u, 4, 1)?;
        let u = g.upsample2x(d1)?;
        let u = g.concat(u, input)?;
        let d0 = conv(g, u, 5, 1)?;
        let z = g.conv2d(d0, vars[12], vars[13], 1)?;
        let z = g.crop(z, height, width)?;
        let p = g.sigmoid(z)?;
        g.scale(p, self.d_max as f64)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, left: &Image, right: Option<&Image>) -> Result<DisparityMap> {
        let input = self.input(left, right)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.to_tensor())).collect();
        let x = g.constant(input.tensor);
        let d = self.forward(&mut g, &vars, x, input.width, input.height)?;
        DisparityMap::new(
            input.width,
            input.height,
            g.value(d)
                .data
                .iter()
                .map(|v| (*v as f32).clamp(0.0, self.d_max))
                .collect(),
        )
    }

    fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![self.mode.input_channels() as u32, self.d_max.to_bits()];
        d.extend(ENCODER_CHANNELS.iter().map(|c| *c as u32));
        d.push(DECODER_OUT as u32);
        d
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::write_checkpoint(path, MODEL_KIND, &self.descriptor(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = nn::read_checkpoint(path)?;
        let mode = match ck.descriptor.first() {
            Some(1) => ModelMode::Mono,
            Some(2) => ModelMode::Stereo,
            _ => return Err(Error::Format("bad model descriptor".into())),
        };
        let d_max = f32::from_bits(*ck.descriptor.get(1).ok_or_else(|| {
            Error::Format("model descriptor lacks d_max".into())
        })?);
        let mut net = Self::zeros(mode, d_max)?;
        if ck.descriptor != net.descriptor() {
            return Err(Error::Format(format!(
                "model descriptor {:?} does not match this build ({:?})",
                ck.descriptor,
                net.descriptor()
            )));
        }
        net.params = ck.into_params(MODEL_KIND, &net.params)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn parameter_budget() {
        let net = TinyDispNet::zeros(ModelMode::Stereo, 32.0).unwrap();
        assert!(net.parameter_count() < 200_000);
        assert!(net.parameter_count() > 10_000);
    }

    #[test]
    fn zero_weights_half_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TinyDispNet::zeros(ModelMode::Stereo, 32.0).unwrap();
        let l = random_image(&mut rng, 13, 10);
        let r = random_image(&mut rng, 13, 10);
        let d = net.predict(&l, Some(&r)).unwrap();
        assert_eq!((d.width(), d.height()), (13, 10));
        assert!(d.data().iter().all(|v| *v == 16.0));
    }

    #[test]
    fn outputs_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..3 {
            let mut net = TinyDispNet::init(ModelMode::Mono, 20.0, seed).unwrap();
            for p in &mut net.params {
                for v in &mut p.data {
                    *v *= 5.0;
                }
            }
            let l = random_image(&mut rng, 16, 8);
            let d = net.predict(&l, None).unwrap();
            assert!(d.data().iter().all(|v| (0.0..=20.0).contains(v)));
        }
    }

    #[test]
    fn init_deterministic_per_seed() {
        let a = TinyDispNet::init(ModelMode::Stereo, 32.0, 5).unwrap();
        let b = TinyDispNet::init(ModelMode::Stereo, 32.0, 5).unwrap();
        let c = TinyDispNet::init(ModelMode::Stereo, 32.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stereo_requires_right_view() {
        let net = TinyDispNet::zeros(ModelMode::Stereo, 8.0).unwrap();
        let l = Image::constant(8, 8, 0.5).unwrap();
        assert!(matches!(net.predict(&l, None), Err(Error::Argument(_))));
    }

    #[test]
    fn unaligned_tape_input_rejected() {
        let net = TinyDispNet::zeros(ModelMode::Mono, 8.0).unwrap();
        let mut g = Graph::new();
        let vars = nn::bind(&mut g, &net.params);
        let x = g.constant(Tensor::zeros(Shape::new(1, 12, 16)));
        assert!(matches!(
            net.forward(&mut g, &vars, x, 16, 12),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = TinyDispNet::init(ModelMode::Stereo, 32.0, 7).unwrap();
        net.save(&path).unwrap();
        assert_eq!(TinyDispNet::load(&path).unwrap(), net);
        let conf = crate::confidence::ConfNetWeights::init(32.0, 1);
        conf.save(&path).unwrap();
        assert!(matches!(TinyDispNet::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = TinyDispNet::init(ModelMode::Stereo, 16.0, 9).unwrap();
        let l = random_image(&mut rng, 16, 16);
        let r = random_image(&mut rng, 16, 16);
        let input = net.input(&l, Some(&r)).unwrap();
        let target: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..16.0)).collect();
        let target = Tensor::new(Shape::new(1, 16, 16), target).unwrap();
        let inputs: Vec<Tensor> = net.params.iter().map(|p| p.to_tensor()).collect();
        let opts = GradCheckOptions {
            max_entries: Some(24),
            ..Default::default()
        };
        let report = grad_check(
            |g, vars| {
                let x = g.constant(input.tensor.clone());
                let d = net.forward(g, vars, x, 16, 16)?;
                let t = g.constant(target.clone());
                let e = g.sub(d, t)?;
                let e = g.square(e)?;
                Ok(g.mean(e))
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
