//! 3x3 convolution (cross-correlation) with replicate padding and stride 1
//! or 2. Weights are laid out as `(out_channels, in_channels, 9)`.

use rayon::prelude::*;

use super::{Graph, Op, Shape, Var};
use crate::error::{Error, Result};

pub(crate) fn output_shape(input: Shape, out_channels: usize, stride: usize) -> Shape {
    Shape::new(
        out_channels,
        input.height.div_ceil(stride),
        input.width.div_ceil(stride),
    )
}

/// Replicate-pads every channel by one pixel.
fn pad(shape: Shape, src: &[f64]) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; shape.channels * ph * pw];
    for c in 0..shape.channels {
        let plane = &src[c * h * w..];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let y = py.saturating_sub(1).min(h - 1);
            let row = &plane[y * w..y * w + w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[0] = row[0];
            drow[1..=w].copy_from_slice(row);
            drow[w + 1] = row[w - 1];
        }
    }
    out
}

impl Graph {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let sb = self.shape(bias);
        if stride == 0 || stride > 2 {
            return Err(Error::Argument(format!("unsupported stride {stride}")));
        }
        if sw.height != si.channels || sw.width != 9 {
            return Err(Error::shape(Shape::new(sw.channels, si.channels, 9), sw));
        }
        if sb != Shape::new(sw.channels, 1, 1) {
            return Err(Error::shape(Shape::new(sw.channels, 1, 1), sb));
        }
        let cin = si.channels;
        let so = output_shape(si, sw.channels, stride);
        let (oh, ow) = (so.height, so.width);
        let pw = si.width + 2;
        let pplane = (si.height + 2) * pw;
        let padded = pad(si, self.data(input));
        let w = self.data(weight);
        let b = self.data(bias);

        let mut out = vec![0.0; so.len()];
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(co, plane)| {
                plane.fill(b[co]);
                for ci in 0..cin {
                    let p = &padded[ci * pplane..(ci + 1) * pplane];
                    let wk = &w[(co * cin + ci) * 9..][..9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = wk[ky * 3 + kx];
                            for oy in 0..oh {
                                let row = &p[(oy * stride + ky) * pw + kx..];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    for (o, r) in orow.iter_mut().zip(row) {
                                        *o += wv * r;
                                    }
                                } else {
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        *o += wv * row[ox * 2];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        self.push(
            "conv2d",
            so,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            &[input, weight, bias],
        )
    }
}

pub(crate) fn backward(
    graph: &Graph,
    pending: &mut [Option<Vec<f64>>],
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    g: &[f64],
) {
    let si = graph.shape(input);
    let sw = graph.shape(weight);
    let cin = si.channels;
    let cout = sw.channels;
    let so = output_shape(si, cout, stride);
    let (oh, ow) = (so.height, so.width);
    let (h, w) = (si.height, si.width);
    let (ph, pw) = (h + 2, w + 2);
    let pplane = ph * pw;
    let oplane = oh * ow;

    graph.accumulate(pending, bias, |gb| {
        for co in 0..cout {
            gb[co] += g[co * oplane..(co + 1) * oplane].iter().sum::<f64>();
        }
    });

    let needs_weight = graph.requires_grad(weight);
    let needs_input = graph.requires_grad(input);
    if !needs_weight && !needs_input {
        return;
    }
    let padded = pad(si, graph.data(input));

    if needs_weight {
        graph.accumulate(pending, weight, |gw| {
            gw.par_chunks_mut(cin * 9)
                .enumerate()
                .for_each(|(co, gk)| {
                    let gp = &g[co * oplane..(co + 1) * oplane];
                    for ci in 0..cin {
                        let p = &padded[ci * pplane..(ci + 1) * pplane];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let row = &p[(oy * stride + ky) * pw + kx..];
                                    let grow = &gp[oy * ow..(oy + 1) * ow];
                                    if stride == 1 {
                                        for (gv, r) in grow.iter().zip(row) {
                                            acc += gv * r;
                                        }
                                    } else {
                                        for (ox, gv) in grow.iter().enumerate() {
                                            acc += gv * row[ox * 2];
                                        }
                                    }
                                }
                                gk[ci * 9 + ky * 3 + kx] += acc;
                            }
                        }
                    }
                });
        });
    }

    if needs_input {
        let wv = graph.data(weight);
        let mut gpad = vec![0.0; cin * pplane];
        gpad.par_chunks_mut(pplane)
            .enumerate()
            .for_each(|(ci, gp)| {
                for co in 0..cout {
                    let go = &g[co * oplane..(co + 1) * oplane];
                    let wk = &wv[(co * cin + ci) * 9..][..9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = wk[ky * 3 + kx];
                            for oy in 0..oh {
                                let base = (oy * stride + ky) * pw + kx;
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    for (d, gv) in gp[base..base + ow].iter_mut().zip(grow) {
                                        *d += k * gv;
                                    }
                                } else {
                                    for (ox, gv) in grow.iter().enumerate() {
                                        gp[base + ox * 2] += k * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        graph.accumulate(pending, input, |gi| {
            for ci in 0..cin {
                let gp = &gpad[ci * pplane..(ci + 1) * pplane];
                let dst = &mut gi[ci * h * w..(ci + 1) * h * w];
                for py in 0..ph {
                    let y = py.saturating_sub(1).min(h - 1);
                    for px in 0..pw {
                        let x = px.saturating_sub(1).min(w - 1);
                        dst[y * w + x] += gp[py * pw + px];
                    }
                }
            }
        });
    }
}
