use super::census::census_transform;
use crate::error::{Error, Result};
use crate::formats::Image;

/// Marker for matches that fall outside the frame or the census support.
pub const INVALID_COST: f32 = f32::INFINITY;

/// `width x height x d_max` matching costs, disparity fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_max: usize,
    costs: Vec<f32>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, d_max: usize, costs: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || d_max == 0 || costs.len() != width * height * d_max {
            return Err(Error::shape((width, height, d_max), costs.len()));
        }
        if let Some(c) = costs.iter().find(|c| c.is_nan() || **c < 0.0) {
            return Err(Error::Range(format!("matching cost {c} is negative or NaN")));
        }
        Ok(Self {
            width,
            height,
            d_max,
            costs,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn costs(&self) -> &[f32] {
        &self.costs
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize) -> f32 {
        self.costs[(y * self.width + x) * self.d_max + d]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.d_max;
        &self.costs[i..i + self.d_max]
    }
}

/// Per-pixel dissimilarity between `left(x, y)` and `right(x - d, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchingCost {
    /// Hamming distance of census signatures over a square window.
    CensusHamming { window: usize },
    /// Absolute intensity difference.
    AbsoluteDifference,
}

pub fn build_cost_volume(
    left: &Image,
    right: &Image,
    d_max: usize,
    metric: MatchingCost,
) -> Result<CostVolume> {
    if (left.width(), left.height()) != (right.width(), right.height()) {
        return Err(Error::shape(
            (left.width(), left.height()),
            (right.width(), right.height()),
        ));
    }
    if d_max == 0 {
        return Err(Error::Argument("d_max must be at least 1".into()));
    }
    let (w, h) = (left.width(), left.height());
    let mut costs = vec![INVALID_COST; w * h * d_max];
    match metric {
        MatchingCost::CensusHamming { window } => {
            let cl = census_transform(left, window)?;
            let cr = census_transform(right, window)?;
            for y in 0..h {
                for x in 0..w {
                    if !cl.is_valid(x, y) {
                        continue;
                    }
                    let code = cl.code(x, y);
                    let cell = &mut costs[(y * w + x) * d_max..][..d_max];
                    for (d, c) in cell.iter_mut().enumerate().take(x + 1) {
                        if cr.is_valid(x - d, y) {
                            *c = (code ^ cr.code(x - d, y)).count_ones() as f32;
                        }
                    }
                }
            }
        }
        MatchingCost::AbsoluteDifference => {
            for y in 0..h {
                for x in 0..w {
                    let l = left.get(x, y);
                    let cell = &mut costs[(y * w + x) * d_max..][..d_max];
                    for (d, c) in cell.iter_mut().enumerate().take(x + 1) {
                        *c = (l - right.get(x - d, y)).abs();
                    }
                }
            }
        }
    }
    CostVolume::new(w, h, d_max, costs)
}
