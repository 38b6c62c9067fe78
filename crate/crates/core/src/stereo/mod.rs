//! Classical stereo matchers used as label generators.
//!
//! `AD` here is census + Hamming cost + winner-take-all; `SGM` adds
//! semi-global aggregation before the winner-take-all step. Both produce
//! integer disparities with [`INVALID_DISPARITY`] where no valid match
//! exists.

mod census;
mod cost;
mod sgm;

use crate::error::{Error, Result};
use crate::formats::{DisparityMap, Image, INVALID_DISPARITY};

pub use census::{census_transform, CensusMap, MAX_CENSUS_WINDOW};
pub use cost::{build_cost_volume, CostVolume, MatchingCost, INVALID_COST};
pub use sgm::{aggregate_path, fill_invalid, sgm_aggregate, PathCount, SgmParams, DIRECTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StereoAlgorithm {
    Ad,
    Sgm,
}

impl std::str::FromStr for StereoAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AD" => Ok(Self::Ad),
            "SGM" => Ok(Self::Sgm),
            _ => Err(Error::Argument(format!("unknown stereo algorithm `{s}`"))),
        }
    }
}

impl std::fmt::Display for StereoAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ad => "AD",
            Self::Sgm => "SGM",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoParams {
    /// Number of disparity hypotheses, `0..d_max`.
    pub d_max: usize,
    pub census_window: usize,
    pub sgm: SgmParams,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self {
            d_max: 64,
            census_window: 5,
            sgm: SgmParams::default(),
        }
    }
}

/// Per-pixel argmin over valid disparities, ties resolved toward the smaller
/// disparity.
pub fn winner_take_all(vol: &CostVolume) -> DisparityMap {
    let (w, h) = (vol.width(), vol.height());
    let mut out = DisparityMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, f32)> = None;
            for (d, c) in vol.pixel(x, y).iter().enumerate() {
                if !c.is_finite() {
                    continue;
                }
                if best.is_none_or(|(_, b)| *c < b) {
                    best = Some((d, *c));
                }
            }
            if let Some((d, _)) = best {
                out.set(x, y, d as f32);
            }
        }
    }
    out
}

/// Looks up the right-view disparity matched by each left pixel. Returns
/// `None` for invalid left pixels and out-of-frame lookups.
pub(crate) fn matched_right(
    d_left: &DisparityMap,
    d_right: &DisparityMap,
    x: usize,
    y: usize,
) -> Option<f32> {
    let dl = d_left.get(x, y);
    if dl < 0.0 {
        return None;
    }
    let xr = x as i64 - dl.round() as i64;
    if xr < 0 || xr >= d_left.width() as i64 {
        return None;
    }
    let dr = d_right.get(xr as usize, y);
    (dr >= 0.0).then_some(dr)
}

/// Invalidates left disparities that disagree with the right view by more
/// than `tol` pixels.
pub fn left_right_check(
    d_left: &DisparityMap,
    d_right: &DisparityMap,
    tol: f32,
) -> Result<DisparityMap> {
    if (d_left.width(), d_left.height()) != (d_right.width(), d_right.height()) {
        return Err(Error::shape(
            (d_left.width(), d_left.height()),
            (d_right.width(), d_right.height()),
        ));
    }
    let mut out = d_left.clone();
    for y in 0..d_left.height() {
        for x in 0..d_left.width() {
            let keep = matched_right(d_left, d_right, x, y)
                .is_some_and(|dr| (d_left.get(x, y) - dr).abs() <= tol);
            if !keep {
                out.set(x, y, INVALID_DISPARITY);
            }
        }
    }
    Ok(out)
}

/// Left-view disparity of a rectified pair.
pub fn match_stereo(
    left: &Image,
    right: &Image,
    algo: StereoAlgorithm,
    params: &StereoParams,
) -> Result<DisparityMap> {
    let metric = MatchingCost::CensusHamming {
        window: params.census_window,
    };
    let vol = build_cost_volume(left, right, params.d_max, metric)?;
    Ok(match algo {
        StereoAlgorithm::Ad => winner_take_all(&vol),
        StereoAlgorithm::Sgm => winner_take_all(&sgm_aggregate(&vol, &params.sgm)?),
    })
}

/// Right-view disparity, obtained by matching the mirrored pair.
pub fn match_stereo_right(
    left: &Image,
    right: &Image,
    algo: StereoAlgorithm,
    params: &StereoParams,
) -> Result<DisparityMap> {
    let mirrored = match_stereo(
        &right.flip_horizontal(),
        &left.flip_horizontal(),
        algo,
        params,
    )?;
    Ok(mirrored.flip_horizontal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wta_unique_minimum_and_ties() {
        let mut costs = vec![5.0f32; 2 * 6];
        costs[3] = 1.0;
        costs[6 + 1] = 2.0;
        costs[6 + 4] = 2.0;
        let vol = CostVolume::new(2, 1, 6, costs).unwrap();
        let d = winner_take_all(&vol);
        assert_eq!(d.data(), &[3.0, 1.0]);
    }

    #[test]
    fn wta_all_invalid_is_sentinel() {
        let vol = CostVolume::new(1, 1, 3, vec![INVALID_COST; 3]).unwrap();
        assert_eq!(winner_take_all(&vol).data(), &[INVALID_DISPARITY]);
    }

    #[test]
    fn lr_check_inconsistent_maps() {
        let l = DisparityMap::filled(12, 3, 5.0).unwrap();
        let r = DisparityMap::filled(12, 3, 0.0).unwrap();
        let out = left_right_check(&l, &r, 1.0).unwrap();
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn lr_check_out_of_frame_invalidated() {
        let l = DisparityMap::filled(8, 1, 3.0).unwrap();
        let r = DisparityMap::filled(8, 1, 3.0).unwrap();
        let out = left_right_check(&l, &r, 0.5).unwrap();
        let valid: Vec<bool> = (0..8).map(|i| out.is_valid_at(i)).collect();
        assert_eq!(valid, vec![false, false, false, true, true, true, true, true]);
    }

    #[test]
    fn single_level_gives_zero() {
        let data: Vec<f32> = (0..20 * 10).map(|i| ((i * 61) % 97) as f32 / 96.0).collect();
        let img = Image::new(20, 10, data).unwrap();
        let params = StereoParams {
            d_max: 1,
            ..Default::default()
        };
        for algo in [StereoAlgorithm::Ad, StereoAlgorithm::Sgm] {
            let d = match_stereo(&img, &img, algo, &params).unwrap();
            assert!(d.data().iter().all(|v| *v == 0.0 || *v == INVALID_DISPARITY));
            assert!(d.valid_count() > 0);
        }
    }
}
