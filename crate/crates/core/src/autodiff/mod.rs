//! Tape-based reverse-mode differentiation over small `(channels, height,
//! width)` grids.
//!
//! A [`Graph`] owns every node created during a forward pass. Nodes are
//! addressed through copyable [`Var`] handles; the tape is append-only, so
//! the node order is already a topological order and `backward` is a single
//! reverse sweep. Values and gradients are `f64`; learnable weights live in
//! [`Param`] buffers of `f32` and are copied onto the tape per pass.

mod adam;
mod conv;
mod gradcheck;
mod ops;
mod stencil;
mod warp;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use adam::Adam;
pub use ops::sigmoid;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputReport};
pub use stencil::{BOX3, SOBEL_X, SOBEL_Y};

/// Grid extent. Scalars are `1 x 1 x 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dense value grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(Shape::scalar(), value)
    }

    /// Single-channel tensor from a row-major `f32` grid.
    pub fn from_plane(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        Self::new(
            Shape::new(1, height, width),
            data.iter().map(|v| *v as f64).collect(),
        )
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Learnable weight buffer stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| *v as f64).collect(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Softplus(Var),
    Broadcast(Var),
    Sum(Var),
    Mean(Var),
    MaskedMean(Var, Arc<[bool]>, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    Crop(Var),
    Stencil3(Var, [f64; 9]),
    Warp {
        image: Var,
        disparity: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` calls, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Hash of every branch decision taken by non-smooth operators (sign of
    /// `abs` / leaky-ReLU inputs, sampling cells of `warp`). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn nonsmooth_signature(&self) -> u64 {
        self.signature
    }

    pub(crate) fn mix_signature(&mut self, value: u64) {
        self.signature = (self.signature ^ value).wrapping_mul(FNV_PRIME);
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Shape,
        data: Vec<f64>,
        op: Op,
        parents: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(shape.len(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(Tensor { shape, data }, op, requires_grad))
    }

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Reverse sweep from a scalar `loss`, adding `d loss / d node` into the
    /// stored gradient of every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NotScalar(shape.to_string()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(Var(i), &g, &mut pending);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, v: Var, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[v.0];
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(pending, *a, |ga| add_into(ga, g));
                self.accumulate(pending, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(pending, *a, |ga| add_into(ga, g));
                self.accumulate(pending, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(pending, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.data(*b);
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(pending, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * out[i] / bv[i];
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(pending, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
            }),
            Op::Offset(a) => self.accumulate(pending, *a, |ga| add_into(ga, g)),
            Op::Abs(a) => {
                let av = self.data(*a);
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        // subgradient 0 at the kink
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += s * g[i];
                    }
                });
            }
            Op::Exp(a) => self.accumulate(pending, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = self.data(*a);
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(pending, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let av = self.data(*a);
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += if av[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Square(a) => {
                let av = self.data(*a);
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.data(*a);
                self.accumulate(pending, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * ops::sigmoid(av[i]);
                    }
                });
            }
            Op::Broadcast(a) => {
                let total: f64 = g.iter().sum();
                self.accumulate(pending, *a, |ga| ga[0] += total);
            }
            Op::Sum(a) => self.accumulate(pending, *a, |ga| {
                ga.iter_mut().for_each(|x| *x += g[0])
            }),
            Op::Mean(a) => {
                let n = self.data(*a).len() as f64;
                self.accumulate(pending, *a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0] / n)
                });
            }
            Op::MaskedMean(a, mask, count) => {
                if *count > 0 {
                    let w = g[0] / *count as f64;
                    self.accumulate(pending, *a, |ga| {
                        for (x, m) in ga.iter_mut().zip(mask.iter()) {
                            if *m {
                                *x += w;
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => conv::backward(self, pending, *input, *weight, *bias, *stride, g),
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                self.accumulate(pending, *a, |ga| {
                    let ow = s.width * 2;
                    for c in 0..s.channels {
                        for y in 0..s.height * 2 {
                            for x in 0..ow {
                                ga[(c * s.height + y / 2) * s.width + x / 2] +=
                                    g[(c * s.height * 2 + y) * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = self.data(*a).len();
                self.accumulate(pending, *a, |ga| add_into(ga, &g[..na]));
                self.accumulate(pending, *b, |gb| add_into(gb, &g[na..]));
            }
            Op::Crop(a) => {
                let s = self.shape(*a);
                let o = node.value.shape;
                self.accumulate(pending, *a, |ga| {
                    for c in 0..o.channels {
                        for y in 0..o.height {
                            let src = (c * o.height + y) * o.width;
                            let dst = (c * s.height + y) * s.width;
                            add_into(&mut ga[dst..dst + o.width], &g[src..src + o.width]);
                        }
                    }
                });
            }
            Op::Stencil3(a, kernel) => {
                let s = self.shape(*a);
                self.accumulate(pending, *a, |ga| stencil::backward(s, kernel, g, ga));
            }
            Op::Warp { image, disparity } => warp::backward(self, pending, *image, *disparity, g),
        }
    }

    /// Runs `f` on the pending gradient buffer of `v`, allocating it on first
    /// use. Skipped entirely for nodes that do not require gradients.
    pub(crate) fn accumulate(
        &self,
        pending: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = pending[v.0].get_or_insert_with(|| vec![0.0; node.value.data.len()]);
        f(buf);
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(Shape::new(1, 2, 3), vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| (*v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(Shape::new(1, 2, 2)));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(5.0));
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn log_of_zero_is_non_finite() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        assert!(matches!(g.log(x), Err(Error::NonFiniteValue("log"))));
    }
}
