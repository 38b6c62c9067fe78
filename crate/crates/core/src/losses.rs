//! Adaptation losses on a predicted disparity tensor `(1, h, w)`.
//!
//! * `L_c`: confidence-weighted L1 to the stereo labels over
//!   `P_v = {C > tau, label valid}`, with a hard mask for a fixed threshold
//!   and a sigmoid gate when `tau` is itself trained;
//! * `L_s`: edge-aware smoothness from Sobel gradients;
//! * `L_r`: SSIM + L1 photometric reconstruction of the left view from the
//!   right one warped by the prediction.

use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Graph, Param, Shape, Tensor, Var, BOX3};
use crate::error::{Error, Result};
use crate::formats::{ConfidenceMap, DisparityMap, Image};
use crate::nn;

pub const SSIM_ALPHA: f64 = 0.85;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_TEMPERATURE: f64 = 50.0;
pub const LEARNED_TAU_INIT: f64 = 0.99;

pub fn image_tensor(image: &Image) -> Tensor {
    Tensor::from_plane(image.width(), image.height(), image.data()).expect("image plane")
}

fn plane_shape(g: &Graph, pred: Var, width: usize, height: usize) -> Result<Shape> {
    let s = g.shape(pred);
    let expected = Shape::new(1, height, width);
    if s != expected {
        return Err(Error::shape(expected, s));
    }
    Ok(s)
}

/// Constant tensors shared by both `L_c` variants: labels with sentinels
/// zeroed, confidences, and the valid-label indicator.
struct LabelPlanes {
    labels: Var,
    conf: Var,
    valid: Vec<bool>,
}

fn label_planes(
    g: &mut Graph,
    pred: Var,
    labels: &DisparityMap,
    conf: &ConfidenceMap,
) -> Result<LabelPlanes> {
    let shape = plane_shape(g, pred, labels.width(), labels.height())?;
    if (conf.width(), conf.height()) != (labels.width(), labels.height()) {
        return Err(Error::shape(
            (labels.width(), labels.height()),
            (conf.width(), conf.height()),
        ));
    }
    let valid: Vec<bool> = (0..labels.data().len()).map(|i| labels.is_valid_at(i)).collect();
    let l = labels
        .data()
        .iter()
        .zip(&valid)
        .map(|(v, ok)| if *ok { *v as f64 } else { 0.0 })
        .collect();
    let labels = g.constant(Tensor::new(shape, l)?);
    let conf = g.constant(Tensor::new(
        shape,
        conf.data().iter().map(|v| *v as f64).collect(),
    )?);
    Ok(LabelPlanes {
        labels,
        conf,
        valid,
    })
}

/// `C * |pred - D|` per pixel.
fn weighted_residual(g: &mut Graph, pred: Var, planes: &LabelPlanes) -> Result<Var> {
    let diff = g.sub(pred, planes.labels)?;
    let err = g.abs(diff)?;
    g.mul(planes.conf, err)
}

/// Value of the hard-masked `L_c` and the size of its support.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub value: Var,
    pub support: usize,
}

/// `(1/|P_v|) sum_{P_v} C |pred - D|`; zero when `P_v` is empty.
pub fn confidence_guided_loss(
    g: &mut Graph,
    pred: Var,
    labels: &DisparityMap,
    conf: &ConfidenceMap,
    tau: f64,
) -> Result<MaskedLoss> {
    let planes = label_planes(g, pred, labels, conf)?;
    let mask: Arc<[bool]> = support_mask(labels, conf, tau).into();
    let support = mask.iter().filter(|m| **m).count();
    let err = weighted_residual(g, pred, &planes)?;
    let value = g.masked_mean(err, mask)?;
    Ok(MaskedLoss { value, support })
}

/// Membership of `P_v = {C > tau, D valid}`.
pub fn support_mask(labels: &DisparityMap, conf: &ConfidenceMap, tau: f64) -> Vec<bool> {
    conf.data()
        .iter()
        .enumerate()
        .map(|(i, c)| *c as f64 > tau && labels.is_valid_at(i))
        .collect()
}

/// `sum(gate * E) / sum(gate)` over valid labels, with
/// `gate = sigmoid(k (C - tau))`. `tau` is a scalar on the tape. Zero when
/// no label is valid.
pub fn soft_confidence_loss(
    g: &mut Graph,
    pred: Var,
    labels: &DisparityMap,
    conf: &ConfidenceMap,
    tau: Var,
    k: f64,
) -> Result<Var> {
    let planes = label_planes(g, pred, labels, conf)?;
    let shape = g.shape(pred);
    if !planes.valid.iter().any(|v| *v) {
        return Ok(g.scalar_constant(0.0));
    }
    let valid = g.constant(Tensor::new(
        shape,
        planes.valid.iter().map(|v| *v as u8 as f64).collect(),
    )?);
    let tau_plane = g.broadcast(tau, shape)?;
    let margin = g.sub(planes.conf, tau_plane)?;
    let margin = g.scale(margin, k)?;
    let gate = g.sigmoid(margin)?;
    let gate = g.mul(gate, valid)?;
    let err = weighted_residual(g, pred, &planes)?;
    let weighted = g.mul(gate, err)?;
    let num = g.sum(weighted);
    let den = g.sum(gate);
    g.div(num, den)
}

/// Soft-gated `L_c` plus the penalty `-ln(1 - tau)`, with
/// `tau = sigmoid(tau_logit)`. The penalty is evaluated as
/// `softplus(tau_logit)`, which is the same quantity without cancellation.
pub fn learnable_tau_loss(
    g: &mut Graph,
    pred: Var,
    labels: &DisparityMap,
    conf: &ConfidenceMap,
    tau_logit: Var,
    k: f64,
) -> Result<Var> {
    let tau = g.sigmoid(tau_logit)?;
    let masked = soft_confidence_loss(g, pred, labels, conf, tau, k)?;
    let penalty = g.softplus(tau_logit)?;
    g.add(masked, penalty)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `|sobel_x pred| e^{-|sobel_x I|} + |sobel_y pred| e^{-|sobel_y I|}`.
pub fn smoothness_map(g: &mut Graph, pred: Var, reference: Var) -> Result<Var> {
    let sr = g.shape(reference);
    plane_shape(g, pred, sr.width, sr.height)?;
    let mut terms = Vec::with_capacity(2);
    for axis in 0..2 {
        let (dp, di) = if axis == 0 {
            (g.sobel_x(pred)?, g.sobel_x(reference)?)
        } else {
            (g.sobel_y(pred)?, g.sobel_y(reference)?)
        };
        let dp = g.abs(dp)?;
        let di = g.abs(di)?;
        let di = g.scale(di, -1.0)?;
        let weight = g.exp(di)?;
        terms.push(g.mul(dp, weight)?);
    }
    g.add(terms[0], terms[1])
}

pub fn smoothness_loss(g: &mut Graph, pred: Var, reference: Var) -> Result<Var> {
    let m = smoothness_map(g, pred, reference)?;
    Ok(g.mean(m))
}

/// Per-pixel SSIM on 3x3 box statistics.
pub fn ssim_map(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let mx = g.stencil3(x, BOX3)?;
    let my = g.stencil3(y, BOX3)?;
    let xx = g.square(x)?;
    let yy = g.square(y)?;
    let xy = g.mul(x, y)?;
    let exx = g.stencil3(xx, BOX3)?;
    let eyy = g.stencil3(yy, BOX3)?;
    let exy = g.stencil3(xy, BOX3)?;
    let mx2 = g.square(mx)?;
    let my2 = g.square(my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let a = g.scale(mxy, 2.0)?;
    let a = g.add_scalar(a, SSIM_C1)?;
    let b = g.scale(cxy, 2.0)?;
    let b = g.add_scalar(b, SSIM_C2)?;
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.add_scalar(c, SSIM_C1)?;
    let d = g.add(vx, vy)?;
    let d = g.add_scalar(d, SSIM_C2)?;
    let den = g.mul(c, d)?;
    g.div(num, den)
}

/// `alpha (1 - SSIM(I, I~)) / 2 + (1 - alpha) |I - I~|` with `I~` the right
/// view sampled at `x - pred`.
pub fn reconstruction_map(
    g: &mut Graph,
    left: Var,
    right: Var,
    pred: Var,
    alpha: f64,
) -> Result<Var> {
    let sl = g.shape(left);
    if g.shape(right) != sl {
        return Err(Error::shape(sl, g.shape(right)));
    }
    plane_shape(g, pred, sl.width, sl.height)?;
    let warped = g.bilinear_warp(right, pred)?;
    let ssim = ssim_map(g, left, warped)?;
    let dissim = g.scale(ssim, -alpha / 2.0)?;
    let dissim = g.add_scalar(dissim, alpha / 2.0)?;
    let diff = g.sub(left, warped)?;
    let l1 = g.abs(diff)?;
    let l1 = g.scale(l1, 1.0 - alpha)?;
    g.add(dissim, l1)
}

pub fn reconstruction_loss(
    g: &mut Graph,
    left: Var,
    right: Var,
    pred: Var,
    alpha: f64,
) -> Result<Var> {
    let m = reconstruction_map(g, left, right, pred, alpha)?;
    Ok(g.mean(m))
}

pub const TAUNET_KIND: &str = "taunet";
pub const TAUNET_CHANNELS: [usize; 3] = [64, 64, 64];

/// Threshold predictor: three 3x3 convolutions (leaky-ReLU after the first
/// two), averaged over channels and pixels into one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct TauNetWeights {
    pub channels: Vec<usize>,
    pub params: Vec<Param>,
}

impl TauNetWeights {
    pub fn zeros(channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Argument("threshold network needs a layer".into()));
        }
        let mut params = Vec::new();
        let mut cin = 1;
        for (i, c) in channels.iter().enumerate() {
            params.extend(nn::conv_params(&format!("tau{i}"), cin, *c));
            cin = *c;
        }
        Ok(Self {
            channels: channels.to_vec(),
            params,
        })
    }

    pub fn init(seed: u64) -> Self {
        let mut w = Self::zeros(&TAUNET_CHANNELS).expect("default layout");
        nn::he_init(&mut w.params, seed);
        w
    }

    /// Pre-sigmoid threshold for `image` with parameters on the tape.
    pub fn logit(&self, g: &mut Graph, vars: &[Var], image: Var) -> Result<Var> {
        nn::check_shapes(&self.params, &Self::zeros(&self.channels)?.params)?;
        let mut x = image;
        let last = self.channels.len() - 1;
        for l in 0..=last {
            x = g.conv2d(x, vars[2 * l], vars[2 * l + 1], 1)?;
            if l < last {
                x = g.leaky_relu(x, nn::LEAKY_SLOPE)?;
            }
        }
        Ok(g.mean(x))
    }

    /// Threshold in (0, 1).
    pub fn forward(&self, image: &Image) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.to_tensor())).collect();
        let x = g.constant(image_tensor(image));
        let z = self.logit(&mut g, &vars, x)?;
        Ok(crate::autodiff::sigmoid(g.item(z)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let desc: Vec<u32> = self.channels.iter().map(|c| *c as u32).collect();
        nn::write_checkpoint(path, TAUNET_KIND, &desc, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = nn::read_checkpoint(path)?;
        let channels: Vec<usize> = ck.descriptor.iter().map(|c| *c as usize).collect();
        let mut w = Self::zeros(&channels)?;
        w.params = ck.into_params(TAUNET_KIND, &w.params)?;
        Ok(w)
    }
}

/// Where the confidence threshold comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauMode {
    /// Constant threshold with a hard mask.
    Fixed(f64),
    /// Single trained scalar, starting at `init`.
    Learned { init: f64 },
    /// Predicted from the left image by a [`TauNetWeights`] network.
    TauNet,
}

/// Named configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossPreset {
    /// Plain L1 to every valid label; confidence ignored.
    Regression,
    /// Confidence-weighted L1 to every valid label.
    Weighted,
    /// Confidence-weighted L1 above a fixed threshold.
    Masked,
    /// Masked term plus smoothness and reconstruction.
    Complete,
    /// Complete loss with a trained scalar threshold.
    Learned,
    /// Complete loss with a per-image predicted threshold.
    TauNet,
}

impl LossPreset {
    pub const ALL: [LossPreset; 6] = [
        LossPreset::Regression,
        LossPreset::Weighted,
        LossPreset::Masked,
        LossPreset::Complete,
        LossPreset::Learned,
        LossPreset::TauNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossPreset::Regression => "regression",
            LossPreset::Weighted => "weighted",
            LossPreset::Masked => "masked",
            LossPreset::Complete => "complete",
            LossPreset::Learned => "learned",
            LossPreset::TauNet => "taunet",
        }
    }
}

impl std::str::FromStr for LossPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown loss preset `{s}`")))
    }
}

impl std::fmt::Display for LossPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: TauMode,
    pub lambda_smooth: f64,
    pub lambda_recon: f64,
    pub alpha: f64,
    /// Sharpness `k` of the soft gate.
    pub temperature: f64,
    /// When false every confidence is treated as 1.
    pub use_confidence: bool,
}

impl LossConfig {
    /// Configuration of `preset` given the fixed threshold and reconstruction
    /// weight of the target (0.8 / 0.9 for AD / SGM labels; 0.1 stereo,
    /// 0.01 mono).
    pub fn preset(preset: LossPreset, tau: f64, lambda_recon: f64) -> Self {
        let base = Self {
            tau: TauMode::Fixed(tau),
            lambda_smooth: 0.1,
            lambda_recon,
            alpha: SSIM_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
            use_confidence: true,
        };
        match preset {
            LossPreset::Regression => Self {
                tau: TauMode::Fixed(0.0),
                lambda_smooth: 0.0,
                lambda_recon: 0.0,
                use_confidence: false,
                ..base
            },
            LossPreset::Weighted => Self {
                tau: TauMode::Fixed(0.0),
                lambda_smooth: 0.0,
                lambda_recon: 0.0,
                ..base
            },
            LossPreset::Masked => Self {
                lambda_smooth: 0.0,
                lambda_recon: 0.0,
                ..base
            },
            LossPreset::Complete => base,
            LossPreset::Learned => Self {
                tau: TauMode::Learned {
                    init: LEARNED_TAU_INIT,
                },
                ..base
            },
            LossPreset::TauNet => Self {
                tau: TauMode::TauNet,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.lambda_smooth >= 0.0 && self.lambda_recon >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        match self.tau {
            TauMode::Fixed(t) if !(0.0..1.0).contains(&t) => {
                bad(format!("fixed tau must lie in [0, 1), got {t}"))
            }
            TauMode::Learned { init } if !(init > 0.0 && init < 1.0) => {
                bad(format!("initial tau must lie in (0, 1), got {init}"))
            }
            _ => Ok(()),
        }
    }
}

/// Threshold handed to [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub enum Tau {
    Fixed(f64),
    /// Pre-sigmoid scalar on the tape.
    Logit(Var),
}

/// Loss node plus the unweighted component values for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l_c: f64,
    pub l_s: f64,
    pub l_r: f64,
    pub tau: f64,
    /// `|P_v|` over the pixel count.
    pub pv_fraction: f64,
}

/// `L_c + lambda_smooth L_s + lambda_recon L_r`. Terms with zero weight are
/// reported as 0 and left off the tape.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    left: Var,
    right: Var,
    labels: &DisparityMap,
    conf: &ConfidenceMap,
    cfg: &LossConfig,
    tau: Tau,
) -> Result<LossTerms> {
    let ones;
    let conf = if cfg.use_confidence {
        conf
    } else {
        ones = ConfidenceMap::filled(labels.width(), labels.height(), 1.0)?;
        &ones
    };
    let n = labels.data().len() as f64;
    let (l_c, tau_value, support) = match tau {
        Tau::Fixed(t) => {
            let m = confidence_guided_loss(g, pred, labels, conf, t)?;
            (m.value, t, m.support)
        }
        Tau::Logit(z) => {
            let t = crate::autodiff::sigmoid(g.item(z));
            let v = learnable_tau_loss(g, pred, labels, conf, z, cfg.temperature)?;
            let support = support_mask(labels, conf, t).iter().filter(|m| **m).count();
            (v, t, support)
        }
    };
    let mut total = l_c;
    let mut l_s = 0.0;
    let mut l_r = 0.0;
    if cfg.lambda_smooth > 0.0 {
        let s = smoothness_loss(g, pred, left)?;
        l_s = g.item(s);
        let s = g.scale(s, cfg.lambda_smooth)?;
        total = g.add(total, s)?;
    }
    if cfg.lambda_recon > 0.0 {
        let r = reconstruction_loss(g, left, right, pred, cfg.alpha)?;
        l_r = g.item(r);
        let r = g.scale(r, cfg.lambda_recon)?;
        total = g.add(total, r)?;
    }
    Ok(LossTerms {
        total,
        l_c: g.item(l_c),
        l_s,
        l_r,
        tau: tau_value,
        pv_fraction: support as f64 / n,
    })
}
