//! 3x3 fixed-kernel filters with clamp-to-edge borders.

use super::{Graph, Op, Shape, Var};
use crate::error::Result;

/// Horizontal Sobel kernel, row-major: `[[-1,0,1],[-2,0,2],[-1,0,1]]`.
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
/// Vertical Sobel kernel, the transpose of [`SOBEL_X`].
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
/// 3x3 block mean.
pub const BOX3: [f64; 9] = [1.0 / 9.0; 9];

#[inline]
fn neighbours(len: usize, i: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(len - 1)]
}

pub(crate) fn apply(shape: Shape, kernel: &[f64; 9], src: &[f64]) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0.0; src.len()];
    for c in 0..shape.channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let ys = neighbours(h, y);
            for x in 0..w {
                let xs = neighbours(w, x);
                let mut acc = 0.0;
                for (ky, yy) in ys.iter().enumerate() {
                    let row = &plane[yy * w..];
                    for (kx, xx) in xs.iter().enumerate() {
                        acc += kernel[ky * 3 + kx] * row[*xx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

pub(crate) fn backward(shape: Shape, kernel: &[f64; 9], g: &[f64], ga: &mut [f64]) {
    let (h, w) = (shape.height, shape.width);
    for c in 0..shape.channels {
        let gp = &g[c * h * w..(c + 1) * h * w];
        let dst = &mut ga[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let ys = neighbours(h, y);
            for x in 0..w {
                let xs = neighbours(w, x);
                let gv = gp[y * w + x];
                for (ky, yy) in ys.iter().enumerate() {
                    for (kx, xx) in xs.iter().enumerate() {
                        dst[yy * w + xx] += kernel[ky * 3 + kx] * gv;
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Correlates every channel with a 3x3 kernel, replicating edge pixels.
    pub fn stencil3(&mut self, a: Var, kernel: [f64; 9]) -> Result<Var> {
        let shape = self.shape(a);
        let data = apply(shape, &kernel, self.data(a));
        self.push("stencil3", shape, data, Op::Stencil3(a, kernel), &[a])
    }

    pub fn sobel_x(&mut self, a: Var) -> Result<Var> {
        self.stencil3(a, SOBEL_X)
    }

    pub fn sobel_y(&mut self, a: Var) -> Result<Var> {
        self.stencil3(a, SOBEL_Y)
    }

    pub fn box3(&mut self, a: Var) -> Result<Var> {
        self.stencil3(a, BOX3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn plane(g: &mut Graph, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Var {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        g.param(Tensor::new(Shape::new(1, h, w), data).unwrap())
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let mut g = Graph::new();
        let a = plane(&mut g, 5, 6, |_, _| 0.7);
        let sx = g.sobel_x(a).unwrap();
        let sy = g.sobel_y(a).unwrap();
        assert!(g.value(sx).data.iter().all(|v| v.abs() < 1e-15));
        assert!(g.value(sy).data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn sobel_of_unit_ramp_is_eight_inside() {
        let mut g = Graph::new();
        let (h, w) = (5, 7);
        let a = plane(&mut g, h, w, |_, x| x as f64);
        let sx = g.sobel_x(a).unwrap();
        let v = &g.value(sx).data;
        for y in 0..h {
            for x in 1..w - 1 {
                assert_eq!(v[y * w + x], 8.0);
            }
            // clamped border sees half the step
            assert_eq!(v[y * w], 4.0);
            assert_eq!(v[y * w + w - 1], 4.0);
        }
        let sy = g.sobel_y(a).unwrap();
        assert!(g.value(sy).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn box_preserves_constants() {
        let mut g = Graph::new();
        let a = plane(&mut g, 3, 3, |_, _| 0.25);
        let b = g.box3(a).unwrap();
        assert!(g.value(b).data.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}
