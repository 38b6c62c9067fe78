//! Horizontal bilinear sampler: `out(x, y) = image(x - disparity(x, y), y)`
//! with the sampling coordinate clamped to the image.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};

struct Sample {
    x0: usize,
    x1: usize,
    frac: f64,
    clamped: bool,
}

#[inline]
fn locate(x: usize, d: f64, width: usize) -> Sample {
    let xs = x as f64 - d;
    let max = (width - 1) as f64;
    if xs <= 0.0 {
        return Sample {
            x0: 0,
            x1: 0,
            frac: 0.0,
            clamped: xs < 0.0,
        };
    }
    if xs >= max {
        return Sample {
            x0: width - 1,
            x1: width - 1,
            frac: 0.0,
            clamped: xs > max,
        };
    }
    let x0 = xs.floor() as usize;
    Sample {
        x0,
        x1: (x0 + 1).min(width - 1),
        frac: xs - x0 as f64,
        clamped: false,
    }
}

impl Graph {
    /// Resamples every channel of `image` at `x - disparity`. The disparity
    /// must be single-channel with the same spatial extent.
    pub fn bilinear_warp(&mut self, image: Var, disparity: Var) -> Result<Var> {
        let si = self.shape(image);
        let sd = self.shape(disparity);
        if sd.channels != 1 || (sd.height, sd.width) != (si.height, si.width) {
            return Err(Error::shape((1, si.height, si.width), sd));
        }
        let (h, w) = (si.height, si.width);
        let img = self.data(image);
        let disp = self.data(disparity);
        let mut out = vec![0.0; si.len()];
        let mut sig = 0u64;
        for y in 0..h {
            for x in 0..w {
                let s = locate(x, disp[y * w + x], w);
                sig = sig.rotate_left(5) ^ ((s.x0 as u64) << 1 | s.clamped as u64);
                for c in 0..si.channels {
                    let row = &img[(c * h + y) * w..];
                    out[(c * h + y) * w + x] = (1.0 - s.frac) * row[s.x0] + s.frac * row[s.x1];
                }
            }
        }
        self.mix_signature(sig);
        self.push(
            "bilinear_warp",
            si,
            out,
            Op::Warp { image, disparity },
            &[image, disparity],
        )
    }
}

pub(crate) fn backward(
    graph: &Graph,
    pending: &mut [Option<Vec<f64>>],
    image: Var,
    disparity: Var,
    g: &[f64],
) {
    let si = graph.shape(image);
    let (h, w) = (si.height, si.width);
    let img = graph.data(image);
    let disp = graph.data(disparity);

    graph.accumulate(pending, image, |gi| {
        for y in 0..h {
            for x in 0..w {
                let s = locate(x, disp[y * w + x], w);
                for c in 0..si.channels {
                    let gv = g[(c * h + y) * w + x];
                    gi[(c * h + y) * w + s.x0] += (1.0 - s.frac) * gv;
                    gi[(c * h + y) * w + s.x1] += s.frac * gv;
                }
            }
        }
    });
    graph.accumulate(pending, disparity, |gd| {
        for y in 0..h {
            for x in 0..w {
                let s = locate(x, disp[y * w + x], w);
                if s.clamped || s.x0 == s.x1 {
                    continue;
                }
                let mut acc = 0.0;
                for c in 0..si.channels {
                    let row = &img[(c * h + y) * w..];
                    // d out / d xs = I(x1) - I(x0), and xs = x - d
                    acc -= g[(c * h + y) * w + x] * (row[s.x1] - row[s.x0]);
                }
                gd[y * w + x] += acc;
            }
        }
    });
}
