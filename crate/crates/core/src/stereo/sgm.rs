//! Semi-global cost aggregation.
//!
//! Along each path direction `r` the aggregated cost obeys
//!
//! ```text
//! L_r(p, d) = C(p, d) + min(L_r(p-r, d), L_r(p-r, d±1) + P1, min_k L_r(p-r, k) + P2)
//!                     - min_k L_r(p-r, k)
//! ```
//!
//! and the output is the sum of `L_r` over all paths, accumulated in path
//! order so results are bit-reproducible.

use rayon::prelude::*;

use super::cost::CostVolume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathCount {
    Four,
    Eight,
}

impl PathCount {
    pub fn directions(self) -> &'static [(isize, isize)] {
        match self {
            PathCount::Four => &DIRECTIONS[..4],
            PathCount::Eight => &DIRECTIONS[..],
        }
    }
}

/// Path steps `(dx, dy)`; the predecessor of `p` is `p - (dx, dy)`.
pub const DIRECTIONS: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgmParams {
    /// Penalty for a one-level disparity change.
    pub p1: f32,
    /// Penalty for larger jumps.
    pub p2: f32,
    pub paths: PathCount,
}

impl Default for SgmParams {
    /// Penalties sized for the 0..24 Hamming range of a 5x5 census.
    fn default() -> Self {
        Self {
            p1: 7.0,
            p2: 86.0,
            paths: PathCount::Eight,
        }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p1 >= 0.0 && self.p1 <= self.p2 && self.p2.is_finite()) {
            return Err(Error::Argument(format!(
                "SGM penalties must satisfy 0 <= p1 <= p2, got p1={} p2={}",
                self.p1, self.p2
            )));
        }
        Ok(())
    }
}

/// Replaces invalid entries by `max valid cost + p2 + 1` so every path sum
/// stays finite.
pub fn fill_invalid(vol: &CostVolume, p2: f32) -> Vec<f32> {
    let max_valid = vol
        .costs()
        .iter()
        .filter(|c| c.is_finite())
        .fold(0.0f32, |a, b| a.max(*b));
    let fill = max_valid + p2 + 1.0;
    vol.costs()
        .iter()
        .map(|c| if c.is_finite() { *c } else { fill })
        .collect()
}

/// Aggregates one path direction over a finite cost grid laid out like a
/// [`CostVolume`].
pub fn aggregate_path(
    costs: &[f32],
    width: usize,
    height: usize,
    d_max: usize,
    p1: f32,
    p2: f32,
    dir: (isize, isize),
) -> Vec<f32> {
    let (dx, dy) = dir;
    let mut out = vec![0.0f32; costs.len()];
    let ys: Vec<usize> = if dy >= 0 {
        (0..height).collect()
    } else {
        (0..height).rev().collect()
    };
    let xs: Vec<usize> = if dx >= 0 {
        (0..width).collect()
    } else {
        (0..width).rev().collect()
    };
    let mut prev = vec![0.0f32; d_max];
    for &y in &ys {
        for &x in &xs {
            let i = (y * width + x) * d_max;
            let px = x as isize - dx;
            let py = y as isize - dy;
            if px < 0 || py < 0 || px >= width as isize || py >= height as isize {
                out[i..i + d_max].copy_from_slice(&costs[i..i + d_max]);
                continue;
            }
            let j = (py as usize * width + px as usize) * d_max;
            prev.copy_from_slice(&out[j..j + d_max]);
            let min_prev = prev.iter().fold(f32::INFINITY, |a, b| a.min(*b));
            for d in 0..d_max {
                let mut best = prev[d];
                if d > 0 {
                    best = best.min(prev[d - 1] + p1);
                }
                if d + 1 < d_max {
                    best = best.min(prev[d + 1] + p1);
                }
                best = best.min(min_prev + p2);
                out[i + d] = costs[i + d] + best - min_prev;
            }
        }
    }
    out
}

pub fn sgm_aggregate(vol: &CostVolume, params: &SgmParams) -> Result<CostVolume> {
    params.validate()?;
    let (w, h, dm) = (vol.width(), vol.height(), vol.d_max());
    let filled = fill_invalid(vol, params.p2);
    let per_path: Vec<Vec<f32>> = params
        .paths
        .directions()
        .par_iter()
        .map(|dir| aggregate_path(&filled, w, h, dm, params.p1, params.p2, *dir))
        .collect();
    let mut total = vec![0.0f32; filled.len()];
    for path in &per_path {
        for (t, v) in total.iter_mut().zip(path) {
            *t += v;
        }
    }
    // keep out-of-frame / undefined matches marked as such
    for (t, c) in total.iter_mut().zip(vol.costs()) {
        if !c.is_finite() {
            *t = super::cost::INVALID_COST;
        }
    }
    CostVolume::new(w, h, dm, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo::cost::INVALID_COST;

    fn volume(w: usize, h: usize, d: usize, f: impl Fn(usize) -> f32) -> CostVolume {
        CostVolume::new(w, h, d, (0..w * h * d).map(f).collect()).unwrap()
    }

    #[test]
    fn zero_penalties_multiply_by_path_count() {
        let vol = volume(5, 4, 3, |i| ((i * 13) % 7) as f32);
        for (paths, n) in [(PathCount::Four, 4.0), (PathCount::Eight, 8.0)] {
            let params = SgmParams {
                p1: 0.0,
                p2: 0.0,
                paths,
            };
            let agg = sgm_aggregate(&vol, &params).unwrap();
            for (a, c) in agg.costs().iter().zip(vol.costs()) {
                assert_eq!(*a, n * c);
            }
        }
    }

    #[test]
    fn global_offset_shifts_by_path_count() {
        let vol = volume(6, 5, 4, |i| ((i * 31) % 11) as f32);
        let shifted = volume(6, 5, 4, |i| ((i * 31) % 11) as f32 + 3.0);
        let params = SgmParams::default();
        let a = sgm_aggregate(&vol, &params).unwrap();
        let b = sgm_aggregate(&shifted, &params).unwrap();
        for (x, y) in a.costs().iter().zip(b.costs()) {
            assert_eq!(*y, x + 8.0 * 3.0);
        }
    }

    #[test]
    fn hand_unrolled_single_row() {
        // 1x3 image, two disparities, left-to-right path only
        let costs = [1.0, 5.0, 4.0, 0.0, 2.0, 9.0];
        let out = aggregate_path(&costs, 3, 1, 2, 1.0, 3.0, (1, 0));
        // p0: [1, 5]
        // p1: min_prev 1; d0: 4 + min(1, 5+1, 1+3) - 1 = 4; d1: 0 + min(5, 1+1, 4) - 1 = 1
        // p2: min_prev 1; d0: 2 + min(4, 1+1, 4) - 1 = 3; d1: 9 + min(1, 5, 4) - 1 = 9
        assert_eq!(out, vec![1.0, 5.0, 4.0, 1.0, 3.0, 9.0]);
    }

    #[test]
    fn invalid_entries_stay_invalid() {
        let mut costs: Vec<f32> = (0..3 * 2 * 3).map(|i| (i % 5) as f32).collect();
        costs[2] = INVALID_COST;
        let vol = CostVolume::new(3, 2, 3, costs).unwrap();
        let agg = sgm_aggregate(&vol, &SgmParams::default()).unwrap();
        assert_eq!(agg.costs()[2], INVALID_COST);
        assert!(agg.costs().iter().enumerate().all(|(i, c)| i == 2 || c.is_finite()));
    }

    #[test]
    fn penalties_validated() {
        let vol = volume(2, 2, 2, |_| 1.0);
        let bad = SgmParams {
            p1: 5.0,
            p2: 1.0,
            paths: PathCount::Four,
        };
        assert!(matches!(sgm_aggregate(&vol, &bad), Err(Error::Argument(_))));
    }
}
