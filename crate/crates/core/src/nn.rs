//! Building blocks shared by the small convolutional networks: 3x3 layer
//! parameters, He initialisation and the weight checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"DADW" | u32 version | u32 kind length | kind (utf-8)
//! u32 descriptor length | u32 descriptor[..]
//! u32 parameter count | per parameter: u32 channels, u32 height, u32 width
//! f32 values of every parameter in declaration order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Param, Shape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DADW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Slope of the negative half of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Weight `(out, in, 9)` and bias `(out, 1, 1)` of one 3x3 convolution.
pub fn conv_params(name: &str, in_channels: usize, out_channels: usize) -> [Param; 2] {
    [
        Param::zeros(
            format!("{name}.weight"),
            Shape::new(out_channels, in_channels, 9),
        ),
        Param::zeros(format!("{name}.bias"), Shape::new(out_channels, 1, 1)),
    ]
}

/// Fills every weight with `N(0, 2 / fan_in)` and zeroes the biases.
/// Parameters are recognised by their `.weight` suffix.
pub fn he_init(params: &mut [Param], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        if p.name.ends_with(".weight") {
            let fan_in = (p.shape.height * p.shape.width) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for v in &mut p.data {
                *v = normal.sample(&mut rng) as f32;
            }
        } else {
            p.data.fill(0.0);
        }
    }
}

/// Puts every parameter on the tape as a gradient-tracking leaf.
pub fn bind(g: &mut Graph, params: &[Param]) -> Vec<Var> {
    params.iter().map(|p| g.param(p.to_tensor())).collect()
}

/// Collects the gradients of `vars`, substituting zeros for parameters the
/// loss did not reach.
pub fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|v| match g.grad(*v) {
            Some(grad) => grad.to_vec(),
            None => vec![0.0; g.shape(*v).len()],
        })
        .collect()
}

pub fn parameter_count(params: &[Param]) -> usize {
    params.iter().map(|p| p.data.len()).sum()
}

/// Checks `params` against the shapes a network expects.
pub fn check_shapes(params: &[Param], expected: &[Param]) -> Result<()> {
    if params.len() != expected.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter().zip(expected) {
        if p.shape != e.shape {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{}`: expected {}, found {}",
                e.name, e.shape, p.shape
            )));
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("parameter"));
        }
    }
    Ok(())
}

/// Input plane as a `(1, h, w)` tensor.
pub fn plane_tensor(width: usize, height: usize, data: impl Iterator<Item = f64>) -> Tensor {
    Tensor::new(Shape::new(1, height, width), data.collect()).expect("plane length")
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    descriptor: &[u32],
    params: &[Param],
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(64 + 4 * parameter_count(params));
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, kind.len() as u32);
    buf.extend_from_slice(kind.as_bytes());
    put_u32(&mut buf, descriptor.len() as u32);
    for d in descriptor {
        put_u32(&mut buf, *d);
    }
    put_u32(&mut buf, params.len() as u32);
    for p in params {
        put_u32(&mut buf, p.shape.channels as u32);
        put_u32(&mut buf, p.shape.height as u32);
        put_u32(&mut buf, p.shape.width as u32);
    }
    for p in params {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Contents of a checkpoint file before it is matched to a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub descriptor: Vec<u32>,
    pub shapes: Vec<Shape>,
    pub values: Vec<Vec<f32>>,
}

impl Checkpoint {
    /// Names and shapes the values after `template`, failing on any
    /// disagreement.
    pub fn into_params(self, kind: &str, template: &[Param]) -> Result<Vec<Param>> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint holds a `{}` network, expected `{kind}`",
                self.kind
            )));
        }
        let params = template
            .iter()
            .zip(self.shapes.iter().zip(self.values))
            .map(|(t, (s, v))| Param::new(t.name.clone(), *s, v))
            .collect::<Result<Vec<_>>>()?;
        check_shapes(&params, template)?;
        Ok(params)
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a weight checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind_len = r.u32()? as usize;
    let kind = String::from_utf8(r.take(kind_len)?.to_vec())
        .map_err(|_| Error::Format("checkpoint kind is not utf-8".into()))?;
    let n_desc = r.u32()? as usize;
    let descriptor = (0..n_desc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_params = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
        shapes.push(Shape::new(c as usize, h as usize, w as usize));
    }
    let mut values = Vec::with_capacity(shapes.len());
    for s in &shapes {
        let raw = r.take(s.len().checked_mul(4).ok_or_else(truncated)?)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("checkpoint parameter"));
        }
        values.push(v);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        kind,
        descriptor,
        shapes,
        values,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn truncated() -> Error {
    Error::Format("truncated checkpoint".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut params = conv_params("c0", 2, 3).to_vec();
        he_init(&mut params, 9);
        params[1].data = vec![0.5, -0.25, 1e-7];
        write_checkpoint(&path, "test", &[2, 3], &params).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.descriptor, vec![2, 3]);
        let back = ck.into_params("test", &params).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn wrong_kind_or_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = conv_params("c0", 1, 1).to_vec();
        write_checkpoint(&path, "a", &[1], &params).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert!(matches!(ck.into_params("b", &params), Err(Error::Format(_))));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn he_init_deterministic_and_scaled() {
        let mut a = conv_params("c", 16, 32).to_vec();
        let mut b = a.clone();
        he_init(&mut a, 1);
        he_init(&mut b, 1);
        assert_eq!(a, b);
        he_init(&mut b, 2);
        assert_ne!(a, b);
        let bound = 3.0 * (2.0f32 / (16.0 * 9.0)).sqrt();
        let inside = a[0].data.iter().filter(|v| v.abs() < bound).count();
        assert!(inside as f64 >= 0.99 * a[0].data.len() as f64);
        assert!(a[1].data.iter().all(|v| *v == 0.0));
    }
}
