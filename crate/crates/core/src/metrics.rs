//! Disparity (bad3, MAE) and monocular depth (Eigen protocol) metrics.
//!
//! Metrics are computed through accumulators so that results over disjoint
//! regions or several maps merge exactly into the pixel-weighted totals.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::DisparityMap;

/// Error threshold of the bad-pixel rate, in pixels (strict `>`).
pub const BAD_THRESHOLD: f64 = 3.0;

/// Named scalar results plus the evaluated pixel count.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<(String, f64)>,
    pub count: usize,
    pub config: Vec<(String, String)>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn with_config(mut self, key: &str, value: impl ToString) -> Self {
        self.config.push((key.to_owned(), value.to_string()));
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StereoAccumulator {
    count: usize,
    bad: usize,
    abs_sum: f64,
}

impl StereoAccumulator {
    /// Invalid predictions are scored as disparity 0.
    pub fn add(&mut self, pred: f32, gt: f32) {
        if gt < 0.0 {
            return;
        }
        let p = if pred < 0.0 { 0.0 } else { pred as f64 };
        let err = (p - gt as f64).abs();
        self.count += 1;
        self.abs_sum += err;
        if err > BAD_THRESHOLD {
            self.bad += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.bad += other.bad;
        self.abs_sum += other.abs_sum;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        Ok(MetricReport {
            metrics: vec![
                ("bad3".into(), 100.0 * self.bad as f64 / n),
                ("mae".into(), self.abs_sum / n),
            ],
            count: self.count,
            config: Vec::new(),
        })
    }
}

fn check_same(a: &DisparityMap, b: &DisparityMap) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape((b.width(), b.height()), (a.width(), a.height())));
    }
    Ok(())
}

/// Accumulates every pixel with valid ground truth and, when given, a set
/// `mask` entry.
pub fn stereo_accumulate(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
) -> Result<StereoAccumulator> {
    check_same(pred, gt)?;
    if let Some(m) = mask {
        if m.len() != gt.data().len() {
            return Err(Error::shape(gt.data().len(), m.len()));
        }
    }
    let mut acc = StereoAccumulator::default();
    for (i, (p, g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            acc.add(*p, *g);
        }
    }
    Ok(acc)
}

/// bad3 (percent of pixels with error > 3) and MAE over valid ground truth.
pub fn stereo_metrics(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricReport> {
    stereo_accumulate(pred, gt, None)?.report()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 80.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MonoAccumulator {
    count: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    within: [usize; 3],
}

impl MonoAccumulator {
    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.abs_rel += other.abs_rel;
        self.sq_rel += other.sq_rel;
        self.sq += other.sq;
        self.sq_log += other.sq_log;
        for k in 0..3 {
            self.within[k] += other.within[k];
        }
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        Ok(MetricReport {
            metrics: vec![
                ("abs_rel".into(), self.abs_rel / n),
                ("sq_rel".into(), self.sq_rel / n),
                ("rmse".into(), (self.sq / n).sqrt()),
                ("rmse_log".into(), (self.sq_log / n).sqrt()),
                ("delta1".into(), self.within[0] as f64 / n),
                ("delta2".into(), self.within[1] as f64 / n),
                ("delta3".into(), self.within[2] as f64 / n),
            ],
            count: self.count,
            config: Vec::new(),
        })
    }
}

/// Accumulates depth errors. Negative or non-finite ground truth marks
/// pixels without a measurement; ground truth beyond `max_depth` is skipped.
pub fn mono_accumulate(pred: &[f32], gt: &[f32], cfg: &DepthEvalConfig) -> Result<MonoAccumulator> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let thresholds = [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    let mut acc = MonoAccumulator::default();
    for (p, g) in pred.iter().zip(gt) {
        if !g.is_finite() || *g < 0.0 {
            continue;
        }
        if *g == 0.0 {
            return Err(Error::NonPositiveGroundTruth);
        }
        let g = *g as f64;
        if g > cfg.max_depth {
            continue;
        }
        let p = if p.is_finite() { *p as f64 } else { cfg.max_depth };
        let p = p.clamp(cfg.min_depth, cfg.max_depth);
        let diff = p - g;
        acc.count += 1;
        acc.abs_rel += diff.abs() / g;
        acc.sq_rel += diff * diff / g;
        acc.sq += diff * diff;
        let dl = p.ln() - g.ln();
        acc.sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, t) in thresholds.iter().enumerate() {
            if ratio < *t {
                acc.within[k] += 1;
            }
        }
    }
    Ok(acc)
}

/// AbsRel, SqRel, RMSE, RMSElog and the three δ accuracies.
pub fn mono_metrics(pred: &[f32], gt: &[f32], cfg: &DepthEvalConfig) -> Result<MetricReport> {
    mono_accumulate(pred, gt, cfg)?
        .report()
        .map(|r| r.with_config("max_depth", cfg.max_depth).with_config("min_depth", cfg.min_depth))
}

/// `depth = baseline_focal / disparity`; non-positive disparities map to
/// `f32::INFINITY`.
pub fn disparity_to_depth(disparity: &DisparityMap, baseline_focal: f32) -> Vec<f32> {
    disparity
        .data()
        .iter()
        .map(|d| if *d > 0.0 { baseline_focal / d } else { f32::INFINITY })
        .collect()
}

/// Area under the ROC curve of `scores` for detecting `positives`, with
/// tied scores sharing their average rank. `None` unless both classes are
/// present.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|p| **p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties get the mean of i+1..=j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            if positives[*k] {
                rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One row per named report followed by the aggregate, columns in the order
/// of the first report's metrics.
pub fn metrics_csv(rows: &[(String, MetricReport)], aggregate: &MetricReport) -> String {
    let names: Vec<&str> = aggregate.metrics.iter().map(|(n, _)| n.as_str()).collect();
    let mut out = String::from("map,count");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let mut line = |label: &str, r: &MetricReport| {
        let _ = write!(out, "{label},{}", r.count);
        for n in &names {
            let _ = write!(out, ",{:.6}", r.get(n).unwrap_or(f64::NAN));
        }
        out.push('\n');
    };
    for (label, r) in rows {
        line(label, r);
    }
    line("aggregate", aggregate);
    out
}

pub fn write_metrics_csv(
    path: impl AsRef<Path>,
    rows: &[(String, MetricReport)],
    aggregate: &MetricReport,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows, aggregate)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> DisparityMap {
        DisparityMap::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(&[1.0, 5.0, 9.5]);
        let r = stereo_metrics(&gt, &gt).unwrap();
        assert_eq!(r.get("bad3"), Some(0.0));
        assert_eq!(r.get("mae"), Some(0.0));
    }

    #[test]
    fn uniform_offsets() {
        let gt = map(&[1.0, 5.0, 9.5, 20.0]);
        let plus4 = map(&[5.0, 9.0, 13.5, 24.0]);
        let r = stereo_metrics(&plus4, &gt).unwrap();
        assert_eq!(r.get("bad3"), Some(100.0));
        assert_eq!(r.get("mae"), Some(4.0));
        let plus3 = map(&[4.0, 8.0, 12.5, 23.0]);
        assert_eq!(stereo_metrics(&plus3, &gt).unwrap().get("bad3"), Some(0.0));
    }

    #[test]
    fn invalid_ground_truth_is_skipped() {
        let gt = map(&[-1.0, 2.0]);
        let pred = map(&[50.0, 2.0]);
        let r = stereo_metrics(&pred, &gt).unwrap();
        assert_eq!(r.count, 1);
        assert_eq!(r.get("bad3"), Some(0.0));
        assert!(matches!(
            stereo_metrics(&pred, &map(&[-1.0, -1.0])),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn mono_identity_and_ratio_boundary() {
        let cfg = DepthEvalConfig::default();
        let gt = [2.0f32, 4.0, 10.0];
        let r = mono_metrics(&gt, &gt, &cfg).unwrap();
        for name in ["abs_rel", "sq_rel", "rmse", "rmse_log"] {
            assert_eq!(r.get(name), Some(0.0));
        }
        for name in ["delta1", "delta2", "delta3"] {
            assert_eq!(r.get(name), Some(1.0));
        }
        let scaled: Vec<f32> = gt.iter().map(|g| g * 1.25).collect();
        let r = mono_metrics(&scaled, &gt, &cfg).unwrap();
        assert_eq!(r.get("delta1"), Some(0.0));
        assert_eq!(r.get("delta2"), Some(1.0));
    }

    #[test]
    fn mono_hand_abs_rel() {
        let r = mono_metrics(&[3.0, 2.0], &[2.0, 4.0], &DepthEvalConfig::default()).unwrap();
        assert_eq!(r.get("abs_rel"), Some(0.5));
    }

    #[test]
    fn mono_rejects_zero_ground_truth() {
        assert!(matches!(
            mono_metrics(&[1.0], &[0.0], &DepthEvalConfig::default()),
            Err(Error::NonPositiveGroundTruth)
        ));
    }

    #[test]
    fn auc_extremes_and_ties() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels), Some(0.0));
        assert_eq!(roc_auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(roc_auc(&[0.5, 0.1], &[true, true]), None);
    }

    #[test]
    fn csv_layout() {
        let gt = map(&[1.0, 5.0]);
        let r = stereo_metrics(&gt, &gt).unwrap();
        let csv = metrics_csv(&[("0000".into(), r.clone())], &r);
        assert_eq!(
            csv,
            "map,count,bad3,mae\n0000,2,0.000000,0.000000\naggregate,2,0.000000,0.000000\n"
        );
    }
}
