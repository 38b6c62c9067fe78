//! Adaptation pipeline: stereo pairs become `(left, right, labels, conf)`
//! samples, and a pretrained [`TinyDispNet`] is fine-tuned on them with the
//! loss family of [`crate::losses`]. Ground truth enters only through
//! [`pretrain`] and [`evaluate`].

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Adam, Graph, Param, Shape, Tensor, Var};
use crate::confidence::{lrc_confidence, ConfNetWeights};
use crate::error::{Error, Result};
use crate::formats::{ConfidenceMap, DisparityMap, Image, INVALID_DISPARITY};
use crate::losses::{self, image_tensor, LossConfig, Tau, TauMode, TauNetWeights};
use crate::metrics::{stereo_accumulate, MetricReport, StereoAccumulator};
use crate::model::TinyDispNet;
use crate::nn;
use crate::stereo::{match_stereo, match_stereo_right, StereoAlgorithm, StereoParams};

/// Stereo matcher(s) producing the labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelSource {
    Ad,
    Sgm,
    /// Both, fused per pixel by confidence.
    AdSgm,
}

impl std::str::FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AD" => Ok(Self::Ad),
            "SGM" => Ok(Self::Sgm),
            "AD+SGM" => Ok(Self::AdSgm),
            _ => Err(Error::Argument(format!("unknown label source `{s}`"))),
        }
    }
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ad => "AD",
            Self::Sgm => "SGM",
            Self::AdSgm => "AD+SGM",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfidenceEstimator {
    /// Left-right consistency; needs a second matching pass on the mirrored
    /// pair.
    Lrc,
    ConfNet(ConfNetWeights),
}

/// One adaptation example. Holds no ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationSample {
    pub left: Image,
    pub right: Image,
    pub labels: DisparityMap,
    pub conf: ConfidenceMap,
}

impl AdaptationSample {
    pub fn new(left: Image, right: Image, labels: DisparityMap, conf: ConfidenceMap) -> Result<Self> {
        let dims = (left.width(), left.height());
        for other in [
            (right.width(), right.height()),
            (labels.width(), labels.height()),
            (conf.width(), conf.height()),
        ] {
            if other != dims {
                return Err(Error::shape(dims, other));
            }
        }
        Ok(Self {
            left,
            right,
            labels,
            conf,
        })
    }
}

fn graded(
    left: &Image,
    right: &Image,
    algo: StereoAlgorithm,
    estimator: &ConfidenceEstimator,
    params: &StereoParams,
) -> Result<(DisparityMap, ConfidenceMap)> {
    let labels = match_stereo(left, right, algo, params)?;
    let conf = match estimator {
        ConfidenceEstimator::Lrc => {
            let dr = match_stereo_right(left, right, algo, params)?;
            lrc_confidence(&labels, &dr)?
        }
        ConfidenceEstimator::ConfNet(w) => w.forward(&labels)?,
    };
    Ok((labels, conf))
}

/// Labels the pair with `source` and grades them with `estimator`.
pub fn generate_sample(
    left: &Image,
    right: &Image,
    source: LabelSource,
    estimator: &ConfidenceEstimator,
    params: &StereoParams,
) -> Result<AdaptationSample> {
    let (labels, conf) = match source {
        LabelSource::Ad => graded(left, right, StereoAlgorithm::Ad, estimator, params)?,
        LabelSource::Sgm => graded(left, right, StereoAlgorithm::Sgm, estimator, params)?,
        LabelSource::AdSgm => {
            let a = graded(left, right, StereoAlgorithm::Ad, estimator, params)?;
            let b = graded(left, right, StereoAlgorithm::Sgm, estimator, params)?;
            fuse_labels((&a.0, &a.1), (&b.0, &b.1))?
        }
    };
    AdaptationSample::new(left.clone(), right.clone(), labels, conf)
}

/// Builds samples for many pairs in parallel; output order follows input.
pub fn generate_samples(
    pairs: &[(Image, Image)],
    source: LabelSource,
    estimator: &ConfidenceEstimator,
    params: &StereoParams,
) -> Result<Vec<AdaptationSample>> {
    pairs
        .par_iter()
        .map(|(l, r)| generate_sample(l, r, source, estimator, params))
        .collect()
}

/// Per pixel, keeps the disparity with strictly higher confidence (ties go
/// to `a`) and the larger confidence. A sentinel winner yields a sentinel
/// with confidence 0.
pub fn fuse_labels(
    a: (&DisparityMap, &ConfidenceMap),
    b: (&DisparityMap, &ConfidenceMap),
) -> Result<(DisparityMap, ConfidenceMap)> {
    let dims = (a.0.width(), a.0.height());
    for other in [
        (a.1.width(), a.1.height()),
        (b.0.width(), b.0.height()),
        (b.1.width(), b.1.height()),
    ] {
        if other != dims {
            return Err(Error::shape(dims, other));
        }
    }
    let n = a.0.data().len();
    let mut disp = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for i in 0..n {
        let (ca, cb) = (a.1.data()[i], b.1.data()[i]);
        let (d, valid) = if cb > ca {
            (b.0.data()[i], b.0.is_valid_at(i))
        } else {
            (a.0.data()[i], a.0.is_valid_at(i))
        };
        if valid {
            disp.push(d);
            conf.push(ca.max(cb));
        } else {
            disp.push(INVALID_DISPARITY);
            conf.push(0.0);
        }
    }
    Ok((
        DisparityMap::new(dims.0, dims.1, disp)?,
        ConfidenceMap::new(dims.0, dims.1, conf)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Step size for the learned threshold or the threshold network.
    pub tau_lr: f64,
    pub seed: u64,
}

impl AdaptConfig {
    pub const DEFAULT_TAU_LR: f64 = 0.05;

    pub fn new(loss: LossConfig) -> Self {
        Self {
            loss,
            epochs: 5,
            lr: Adam::DEFAULT_LR,
            tau_lr: Self::DEFAULT_TAU_LR,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("tau_lr", self.tau_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_r: f64,
    pub tau: f64,
    pub pv_fraction: f64,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "iteration,l_c,l_s,l_r,tau,pv_fraction,wall_ms";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.3}",
            r.iteration, r.l_c, r.l_s, r.l_r, r.tau, r.pv_fraction, r.wall_ms
        );
    }
    s
}

pub fn write_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Weights after adaptation together with the per-step log.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub net: TinyDispNet,
    /// Final threshold logit in learned mode.
    pub tau_logit: Option<f64>,
    /// Final threshold network in network-predicted mode.
    pub taunet: Option<TauNetWeights>,
    pub log: Vec<LogRow>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Fine-tunes a copy of `net` on `samples`, one sample per Adam step, the
/// order reshuffled each epoch. `taunet` seeds the threshold network in
/// [`TauMode::TauNet`]; when absent it is initialised from the run seed.
pub fn adapt_model(
    net: &TinyDispNet,
    samples: &[AdaptationSample],
    cfg: &AdaptConfig,
    taunet: Option<&TauNetWeights>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net.clone();
    let mut tau_param = match cfg.loss.tau {
        TauMode::Learned { init } => Some(Param::new(
            "tau_logit",
            Shape::scalar(),
            vec![losses::logit(init) as f32],
        )?),
        _ => None,
    };
    let mut tau_net = match cfg.loss.tau {
        TauMode::TauNet => Some(match taunet {
            Some(w) => w.clone(),
            None => TauNetWeights::init(cfg.seed),
        }),
        _ => None,
    };

    let mut adam = Adam::new(cfg.lr);
    let mut tau_adam = Adam::new(cfg.tau_lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs * samples.len());
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        for &k in &order {
            let s = &samples[k];
            let mut g = Graph::new();
            let net_vars = nn::bind(&mut g, &net.params);
            let input = net.input(&s.left, Some(&s.right))?;
            let x = g.constant(input.tensor);
            let pred = net.forward(&mut g, &net_vars, x, input.width, input.height)?;
            let left = g.constant(image_tensor(&s.left));
            let right = g.constant(image_tensor(&s.right));

            let mut extra_vars: Vec<Var> = Vec::new();
            let tau = match cfg.loss.tau {
                TauMode::Fixed(t) => Tau::Fixed(t),
                TauMode::Learned { .. } => {
                    let p = tau_param.as_ref().expect("learned threshold");
                    let z = g.param(p.to_tensor());
                    extra_vars.push(z);
                    Tau::Logit(z)
                }
                TauMode::TauNet => {
                    let w = tau_net.as_ref().expect("threshold network");
                    let vars = nn::bind(&mut g, &w.params);
                    let z = w.logit(&mut g, &vars, left)?;
                    extra_vars.extend(vars);
                    Tau::Logit(z)
                }
            };
            let terms = losses::total_loss(
                &mut g, pred, left, right, &s.labels, &s.conf, &cfg.loss, tau,
            )?;
            g.backward(terms.total)?;

            let grads = nn::collect_grads(&g, &net_vars);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
            let mut params: Vec<&mut Param> = net.params.iter_mut().collect();
            adam.step(&mut params, &grad_refs)?;
            if !extra_vars.is_empty() {
                let grads = nn::collect_grads(&g, &extra_vars);
                let grad_refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
                let mut params: Vec<&mut Param> = Vec::new();
                if let Some(p) = tau_param.as_mut() {
                    params.push(p);
                }
                if let Some(w) = tau_net.as_mut() {
                    params.extend(w.params.iter_mut());
                }
                tau_adam.step(&mut params, &grad_refs)?;
            }

            log.push(LogRow {
                iteration: log.len(),
                l_c: terms.l_c,
                l_s: terms.l_s,
                l_r: terms.l_r,
                tau: terms.tau,
                pv_fraction: terms.pv_fraction,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(AdaptOutcome {
        net,
        tau_logit: tau_param.map(|p| p.data[0] as f64),
        taunet: tau_net,
        log,
    })
}

/// Pair with dense ground truth, used only for pretraining and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledPair {
    pub left: Image,
    pub right: Image,
    pub gt: DisparityMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: Adam::DEFAULT_LR,
            seed: 0,
        }
    }
}

/// Supervised L1 regression to ground truth over valid pixels. Returns the
/// trained copy and the mean loss of every epoch.
pub fn pretrain(
    net: &TinyDispNet,
    data: &[LabelledPair],
    cfg: &PretrainConfig,
) -> Result<(TinyDispNet, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Argument("pretraining needs epochs >= 1 and lr > 0".into()));
    }
    let mut net = net.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut total = 0.0;
        for &k in &order {
            let p = &data[k];
            let mut g = Graph::new();
            let vars = nn::bind(&mut g, &net.params);
            let input = net.input(&p.left, Some(&p.right))?;
            let x = g.constant(input.tensor);
            let pred = net.forward(&mut g, &vars, x, input.width, input.height)?;
            let mask: Arc<[bool]> = (0..p.gt.data().len()).map(|i| p.gt.is_valid_at(i)).collect();
            let gt = g.constant(Tensor::new(
                Shape::new(1, input.height, input.width),
                p.gt.data().iter().map(|v| v.max(0.0) as f64).collect(),
            )?);
            let diff = g.sub(pred, gt)?;
            let err = g.abs(diff)?;
            let loss = g.masked_mean(err, mask)?;
            total += g.item(loss);
            g.backward(loss)?;
            let grads = nn::collect_grads(&g, &vars);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
            let mut params: Vec<&mut Param> = net.params.iter_mut().collect();
            adam.step(&mut params, &grad_refs)?;
        }
        history.push(total / data.len() as f64);
    }
    Ok((net, history))
}

/// Per-pair bad3/MAE of the network's predictions and their pooled report.
pub fn evaluate(
    net: &TinyDispNet,
    data: &[LabelledPair],
) -> Result<(Vec<MetricReport>, MetricReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let accs: Vec<StereoAccumulator> = data
        .par_iter()
        .map(|p| {
            let pred = net.predict(&p.left, Some(&p.right))?;
            stereo_accumulate(&pred, &p.gt, None)
        })
        .collect::<Result<_>>()?;
    let mut pooled = StereoAccumulator::default();
    let mut rows = Vec::with_capacity(accs.len());
    for a in &accs {
        pooled.merge(a);
        rows.push(a.report()?);
    }
    Ok((rows, pooled.report()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossPreset;
    use crate::model::ModelMode;
    use crate::synth::{generate, Domain, SceneSpec};

    fn dm(v: &[f32]) -> DisparityMap {
        DisparityMap::new(v.len(), 1, v.to_vec()).unwrap()
    }
    fn cm(v: &[f32]) -> ConfidenceMap {
        ConfidenceMap::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn fusion_examples() {
        let (d, c) = fuse_labels((&dm(&[5.0]), &cm(&[0.9])), (&dm(&[50.0]), &cm(&[0.2]))).unwrap();
        assert_eq!((d.data()[0], c.data()[0]), (5.0, 0.9));
        let (d, c) = fuse_labels((&dm(&[3.0]), &cm(&[0.7])), (&dm(&[4.0]), &cm(&[0.7]))).unwrap();
        assert_eq!((d.data()[0], c.data()[0]), (3.0, 0.7));
        let (d, c) = fuse_labels((&dm(&[-1.0]), &cm(&[0.3])), (&dm(&[4.0]), &cm(&[0.1]))).unwrap();
        assert_eq!((d.data()[0], c.data()[0]), (INVALID_DISPARITY, 0.0));
        let a = (dm(&[1.0, -1.0, 7.5]), cm(&[0.1, 0.0, 1.0]));
        let (d, c) = fuse_labels((&a.0, &a.1), (&a.0, &a.1)).unwrap();
        assert_eq!((d, c), a);
        let short = dm(&[1.0]);
        assert!(fuse_labels((&a.0, &a.1), (&short, &cm(&[1.0]))).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let rows = vec![LogRow {
            iteration: 0,
            l_c: 1.5,
            l_s: 0.0,
            l_r: 0.25,
            tau: 0.9,
            pv_fraction: 0.5,
            wall_ms: 12.0,
        }];
        let csv = log_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        assert_eq!(
            lines.next(),
            Some("0,1.500000000,0.000000000,0.250000000,0.900000000,0.500000000,12.000")
        );
    }

    fn scene(seed: u64) -> crate::synth::Scene {
        generate(&SceneSpec::new(Domain::A, seed, 32, 16)).unwrap()
    }

    #[test]
    fn fixed_point_leaves_weights_unchanged() {
        // zero weights predict exactly d_max / 2, so labels equal predictions
        let net = TinyDispNet::zeros(ModelMode::Stereo, 32.0).unwrap();
        let s = scene(1);
        let labels = net.predict(&s.left, Some(&s.right)).unwrap();
        let conf = ConfidenceMap::filled(32, 16, 1.0).unwrap();
        let sample = AdaptationSample::new(s.left, s.right, labels, conf).unwrap();
        let loss = LossConfig::preset(LossPreset::Weighted, 0.0, 0.0);
        let cfg = AdaptConfig {
            epochs: 2,
            ..AdaptConfig::new(loss)
        };
        let out = adapt_model(&net, &[sample], &cfg, None).unwrap();
        assert!(out.log.iter().all(|r| r.l_c == 0.0));
        assert_eq!(out.net, net);
    }

    #[test]
    fn adaptation_is_reproducible() {
        let net = TinyDispNet::init(ModelMode::Stereo, 32.0, 2).unwrap();
        let pairs: Vec<(Image, Image)> = (0..3).map(|k| {
            let s = scene(10 + k);
            (s.left, s.right)
        }).collect();
        let samples = generate_samples(
            &pairs,
            LabelSource::Sgm,
            &ConfidenceEstimator::Lrc,
            &StereoParams { d_max: 32, ..Default::default() },
        )
        .unwrap();
        let cfg = AdaptConfig {
            epochs: 2,
            seed: 5,
            ..AdaptConfig::new(LossConfig::preset(LossPreset::Learned, 0.9, 0.1))
        };
        let a = adapt_model(&net, &samples, &cfg, None).unwrap();
        let b = adapt_model(&net, &samples, &cfg, None).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.tau_logit, b.tau_logit);
        let strip = |l: &[LogRow]| -> Vec<LogRow> {
            l.iter().map(|r| LogRow { wall_ms: 0.0, ..r.clone() }).collect()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.log.len(), 6);
        assert!(a.log.iter().all(|r| r.tau > 0.0 && r.tau < 1.0));
        assert_ne!(a.net, net);
    }

    #[test]
    fn empty_inputs_rejected() {
        let net = TinyDispNet::zeros(ModelMode::Stereo, 8.0).unwrap();
        let cfg = AdaptConfig::new(LossConfig::preset(LossPreset::Complete, 0.8, 0.1));
        assert!(matches!(adapt_model(&net, &[], &cfg, None), Err(Error::EmptyDataset)));
        assert!(matches!(
            pretrain(&net, &[], &PretrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn lrc_lower_on_untextured_pair() {
        let params = StereoParams { d_max: 16, ..Default::default() };
        let s = scene(4);
        // flat scene, independent sensor noise per view
        let mut spec = SceneSpec::new(Domain::A, 4, 32, 16);
        spec.texture_amplitude = 0.0;
        let flat = generate(&spec).unwrap();
        let textured = generate_sample(&s.left, &s.right, LabelSource::Ad, &ConfidenceEstimator::Lrc, &params).unwrap();
        let untextured = generate_sample(&flat.left, &flat.right, LabelSource::Ad, &ConfidenceEstimator::Lrc, &params).unwrap();
        assert!(untextured.conf.mean() <= textured.conf.mean());
        assert_eq!((textured.labels.width(), textured.labels.height()), (32, 16));
    }
}
