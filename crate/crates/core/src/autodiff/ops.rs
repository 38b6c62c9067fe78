use std::sync::Arc;

use super::{Graph, Op, Shape, Var};
use crate::error::{Error, Result};

impl Graph {
    fn same_shape(&self, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(sa, sb));
        }
        Ok(sa)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(name, shape, data, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let shape = self.shape(a);
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        self.push(name, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, factor), |x| factor * x)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::Offset(a), |x| x + offset)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let bits = sign_bits(self.data(a));
        self.mix_signature(bits);
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let bits = sign_bits(self.data(a));
        self.mix_signature(bits);
        self.unary("leaky_relu", a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), |x| {
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        })
    }

    /// Repeats a scalar over `shape`.
    pub fn broadcast(&mut self, scalar: Var, shape: Shape) -> Result<Var> {
        let s = self.shape(scalar);
        if !s.is_scalar() {
            return Err(Error::shape(Shape::scalar(), s));
        }
        let v = self.item(scalar);
        self.push("broadcast", shape, vec![v; shape.len()], Op::Broadcast(scalar), &[scalar])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.data(a).iter().sum();
        self.push("sum", Shape::scalar(), vec![total], Op::Sum(a), &[a])
            .expect("sum of finite values overflowed")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Shape::scalar(), vec![m], Op::Mean(a), &[a])
            .expect("mean of finite values overflowed")
    }

    /// Average over entries where `mask` is set; an empty mask yields 0.
    pub fn masked_mean(&mut self, a: Var, mask: Arc<[bool]>) -> Result<Var> {
        let d = self.data(a);
        if mask.len() != d.len() {
            return Err(Error::shape(d.len(), mask.len()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, m) in d.iter().zip(mask.iter()) {
            if *m {
                total += x;
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "masked_mean",
            Shape::scalar(),
            vec![value],
            Op::MaskedMean(a, mask, count),
            &[a],
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let out = Shape::new(s.channels, s.height * 2, s.width * 2);
        let src = self.data(a);
        let mut data = Vec::with_capacity(out.len());
        for c in 0..s.channels {
            for y in 0..out.height {
                let row = &src[(c * s.height + y / 2) * s.width..][..s.width];
                for x in 0..out.width {
                    data.push(row[x / 2]);
                }
            }
        }
        self.push("upsample2x", out, data, Op::Upsample2x(a), &[a])
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.height, sa.width) != (sb.height, sb.width) {
            return Err(Error::shape(sa, sb));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let out = Shape::new(sa.channels + sb.channels, sa.height, sa.width);
        self.push("concat", out, data, Op::Concat(a, b), &[a, b])
    }

    /// Keeps the top-left `height x width` window of every channel.
    pub fn crop(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if height == 0 || width == 0 || height > s.height || width > s.width {
            return Err(Error::shape(s, (height, width)));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(s.channels * height * width);
        for c in 0..s.channels {
            for y in 0..height {
                data.extend_from_slice(&src[(c * s.height + y) * s.width..][..width]);
            }
        }
        self.push(
            "crop",
            Shape::new(s.channels, height, width),
            data,
            Op::Crop(a),
            &[a],
        )
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign_bits(data: &[f64]) -> u64 {
    let mut h = 0u64;
    for (i, v) in data.iter().enumerate() {
        let s = if *v > 0.0 {
            1u64
        } else if *v < 0.0 {
            2
        } else {
            3
        };
        h = h.rotate_left(2) ^ s.wrapping_mul(i as u64 + 1);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn grid(g: &mut Graph, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Var {
        let shape = Shape::new(c, h, w);
        g.param(Tensor::new(shape, (0..shape.len()).map(f).collect()).unwrap())
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = grid(&mut g, 1, 2, 2, |i| i as f64);
        let b = grid(&mut g, 1, 2, 3, |i| i as f64);
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let a = grid(&mut g, 1, 1, 3, |i| i as f64 - 1.0);
        let b = g.abs(a).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_mean_empty_is_zero() {
        let mut g = Graph::new();
        let a = grid(&mut g, 1, 1, 2, |_| 4.0);
        let m = g.masked_mean(a, vec![false, false].into()).unwrap();
        assert_eq!(g.item(m), 0.0);
        g.backward(m).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn upsample_concat_crop_shapes() {
        let mut g = Graph::new();
        let a = grid(&mut g, 2, 2, 3, |i| i as f64);
        let up = g.upsample2x(a).unwrap();
        assert_eq!(g.shape(up), Shape::new(2, 4, 6));
        assert_eq!(&g.value(up).data[..6], &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let b = grid(&mut g, 1, 4, 6, |_| 1.0);
        let cat = g.concat(up, b).unwrap();
        assert_eq!(g.shape(cat).channels, 3);
        let cr = g.crop(cat, 3, 5).unwrap();
        assert_eq!(g.shape(cr), Shape::new(3, 3, 5));
        let s = g.sum(cr);
        g.backward(s).unwrap();
        // each source value feeds four upsampled cells, minus those cropped
        assert_eq!(g.grad(a).unwrap()[0], 4.0);
        assert_eq!(g.grad(a).unwrap()[2], 2.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
