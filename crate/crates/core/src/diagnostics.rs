//! Finite-difference checks of every differentiable component, shared by the
//! `gradcheck` subcommand and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Shape, Tensor};
use crate::confidence::ConfNetWeights;
use crate::error::Result;
use crate::formats::{ConfidenceMap, DisparityMap, Image};
use crate::losses::{
    confidence_guided_loss, learnable_tau_loss, logit, reconstruction_loss, smoothness_loss,
    TauNetWeights, SSIM_ALPHA,
};
use crate::model::{ModelMode, TinyDispNet};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn plane(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        Shape::new(1, h, w),
        (0..w * h).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("plane length")
}

fn image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h).map(|_| rng.random()).collect()).expect("image length")
}

/// Runs the checks on random inputs between 8x8 and 16x16. Network checks
/// perturb `max_entries` sampled entries per parameter tensor.
pub fn gradient_suite(seed: u64, max_entries: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let sampled = GradCheckOptions {
        max_entries: Some(max_entries),
        ..opts.clone()
    };
    let mut out = Vec::new();

    let (w, h) = (rng.random_range(8..=16), rng.random_range(8..=16));
    let labels = DisparityMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..8.0)).collect())?;
    let conf = ConfidenceMap::new(w, h, (0..w * h).map(|_| rng.random()).collect())?;
    let pred = plane(&mut rng, w, h, 0.0, 8.0);
    let report = grad_check(
        |g, v| Ok(confidence_guided_loss(g, v[0], &labels, &conf, 0.4)?.value),
        &[pred.clone()],
        &opts,
    )?;
    out.push(SuiteEntry { name: "confidence_hard", report });
    let report = grad_check(
        |g, v| learnable_tau_loss(g, v[0], &labels, &conf, v[1], 10.0),
        &[pred, Tensor::scalar(logit(0.6))],
        &opts,
    )?;
    out.push(SuiteEntry { name: "confidence_soft", report });

    let (w, h) = (rng.random_range(8..=16), rng.random_range(8..=16));
    let left = plane(&mut rng, w, h, 0.0, 1.0);
    let right = plane(&mut rng, w, h, 0.0, 1.0);
    let pred = plane(&mut rng, w, h, 0.0, 3.0);
    let report = grad_check(
        |g, v| {
            let i = g.constant(left.clone());
            smoothness_loss(g, v[0], i)
        },
        &[pred.clone()],
        &opts,
    )?;
    out.push(SuiteEntry { name: "smoothness", report });
    let report = grad_check(
        |g, v| {
            let l = g.constant(left.clone());
            reconstruction_loss(g, l, v[1], v[0], SSIM_ALPHA)
        },
        &[pred, right],
        &opts,
    )?;
    out.push(SuiteEntry { name: "reconstruction", report });

    let (w, h) = (16, rng.random_range(8..=16));
    let net = TinyDispNet::init(ModelMode::Stereo, 16.0, seed)?;
    let input = net.input(&image(&mut rng, w, h), Some(&image(&mut rng, w, h)))?;
    let target = plane(&mut rng, w, h, 0.0, 16.0);
    let params: Vec<Tensor> = net.params.iter().map(|p| p.to_tensor()).collect();
    let report = grad_check(
        |g, v| {
            let x = g.constant(input.tensor.clone());
            let d = net.forward(g, v, x, w, h)?;
            let t = g.constant(target.clone());
            let e = g.sub(d, t)?;
            let e = g.square(e)?;
            Ok(g.mean(e))
        },
        &params,
        &sampled,
    )?;
    out.push(SuiteEntry { name: "tinydispnet", report });

    let (w, h) = (rng.random_range(8..=16), rng.random_range(8..=16));
    let conf_net = ConfNetWeights::init(8.0, seed);
    let disp = DisparityMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..8.0)).collect())?;
    let x = conf_net.input_tensor(&disp);
    let params: Vec<Tensor> = conf_net.params.iter().map(|p| p.to_tensor()).collect();
    let report = grad_check(
        |g, v| {
            let x = g.constant(x.clone());
            let z = conf_net.logits(g, v, x)?;
            let s = g.softplus(z)?;
            Ok(g.mean(s))
        },
        &params,
        &sampled,
    )?;
    out.push(SuiteEntry { name: "confnet", report });

    let (w, h) = (rng.random_range(8..=16), rng.random_range(8..=16));
    let tau_net = TauNetWeights::init(seed);
    let mut inputs: Vec<Tensor> = tau_net.params.iter().map(|p| p.to_tensor()).collect();
    inputs.push(plane(&mut rng, w, h, 0.0, 1.0));
    let report = grad_check(
        |g, v| {
            let (params, img) = v.split_at(v.len() - 1);
            let z = tau_net.logit(g, params, img[0])?;
            g.sigmoid(z)
        },
        &inputs,
        &sampled,
    )?;
    out.push(SuiteEntry { name: "taunet", report });
    Ok(out)
}

/// `component,checked,skipped,max_rel_error,passed` lines with a header.
pub fn suite_csv(entries: &[SuiteEntry]) -> String {
    let mut s = String::from("component,checked,skipped,max_rel_error,passed\n");
    for e in entries {
        s.push_str(&format!(
            "{},{},{},{:.3e},{}\n",
            e.name,
            e.report.checked(),
            e.report.skipped(),
            e.report.max_rel_error(),
            e.report.passed()
        ));
    }
    s
}
