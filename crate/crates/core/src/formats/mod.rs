//! Image, disparity and confidence grids plus their on-disk encodings.
//!
//! Supported encodings: binary PGM (P5), 8/16-bit PNG and single-channel PFM
//! (`Pf`). Disparities follow the KITTI 16-bit convention when stored as
//! PNG: `stored = round(disparity * 256)`, with 0 reserved for invalid pixels.

mod netpbm;
mod pfm;
mod png16;

use std::path::Path;

use crate::error::{Error, Result};

pub use netpbm::{read_pgm, write_pgm};
pub use pfm::{read_pfm, write_pfm};

/// Marker stored in disparity grids for pixels without a measurement.
pub const INVALID_DISPARITY: f32 = -1.0;

/// Largest disparity accepted when decoding (2^15).
pub const MAX_DECODED_DISPARITY: f32 = 32768.0;

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Range(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: flip_rows(&self.data, self.width),
        }
    }

    /// Top-left anchored crop.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        let data = crop_grid(&self.data, self.width, self.height, x0, y0, width, height)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Mean forward-difference gradient magnitude.
    pub fn mean_gradient(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        if w < 2 || h < 2 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let c = self.get(x, y) as f64;
                let gx = self.get(x + 1, y) as f64 - c;
                let gy = self.get(x, y + 1) as f64 - c;
                acc += (gx * gx + gy * gy).sqrt();
            }
        }
        acc / ((w - 1) * (h - 1)) as f64
    }
}

/// Per-pixel horizontal displacement; negative entries are normalised to
/// [`INVALID_DISPARITY`].
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        check_len(width, height, data.len())?;
        for v in &mut data {
            if v.is_nan() {
                return Err(Error::Range("NaN disparity".into()));
            }
            if *v < 0.0 {
                *v = INVALID_DISPARITY;
            } else if !v.is_finite() {
                return Err(Error::Range("infinite disparity".into()));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![INVALID_DISPARITY; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid_at(&self, index: usize) -> bool {
        self.data[index] >= 0.0
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = if value < 0.0 { INVALID_DISPARITY } else { value };
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| **v >= 0.0).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: flip_rows(&self.data, self.width),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        let data = crop_grid(&self.data, self.width, self.height, x0, y0, width, height)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Per-pixel reliability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Range(format!("confidence {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        let data = crop_grid(&self.data, self.width, self.height, x0, y0, width, height)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Disparity file encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisparityFormat {
    KittiPng16,
    Pfm,
}

impl std::str::FromStr for DisparityFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti-png16" | "png" => Ok(Self::KittiPng16),
            "pfm" => Ok(Self::Pfm),
            other => Err(Error::Argument(format!("unknown disparity format `{other}`"))),
        }
    }
}

/// Loads an 8-bit PGM or PNG as intensities in `[0, 1]`. Colour PNGs are
/// reduced to the average of their colour channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        netpbm::decode_pgm(&bytes, path)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        png16::decode_image(&bytes, path)
    } else {
        Err(Error::Format(format!(
            "{}: neither binary PGM nor PNG",
            path.display()
        )))
    }
}

/// Writes an image as 8-bit grayscale PNG (`round(v * 255)`).
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    png16::write_gray8(image, path.as_ref())
}

pub fn read_disparity(path: impl AsRef<Path>, format: DisparityFormat) -> Result<DisparityMap> {
    let path = path.as_ref();
    let map = match format {
        DisparityFormat::KittiPng16 => png16::read_kitti(path)?,
        DisparityFormat::Pfm => {
            let (w, h, data) = read_pfm(path)?;
            let data = data
                .into_iter()
                .map(|v| if v.is_finite() { v } else { INVALID_DISPARITY })
                .collect();
            DisparityMap::new(w, h, data)?
        }
    };
    if let Some(v) = map.data().iter().find(|v| **v > MAX_DECODED_DISPARITY) {
        return Err(Error::Range(format!("decoded disparity {v} exceeds 2^15")));
    }
    Ok(map)
}

/// Stores a disparity map. Invalid pixels become 0 in KITTI PNGs and `+inf`
/// in PFM files.
pub fn write_disparity(
    map: &DisparityMap,
    path: impl AsRef<Path>,
    format: DisparityFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        DisparityFormat::KittiPng16 => png16::write_kitti(map, path),
        DisparityFormat::Pfm => {
            let data: Vec<f32> = map
                .data()
                .iter()
                .map(|v| if *v < 0.0 { f32::INFINITY } else { *v })
                .collect();
            write_pfm(path, map.width(), map.height(), &data)
        }
    }
}

pub fn read_confidence(path: impl AsRef<Path>) -> Result<ConfidenceMap> {
    let (w, h, data) = read_pfm(path)?;
    ConfidenceMap::new(w, h, data)
}

pub fn write_confidence(map: &ConfidenceMap, path: impl AsRef<Path>) -> Result<()> {
    write_pfm(path, map.width(), map.height(), map.data())
}

/// Binary mask stored as PGM with 255 for set pixels.
pub fn write_mask(mask: &[bool], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    check_len(width, height, mask.len())?;
    let bytes: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    write_pgm(path, width, height, &bytes)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, bytes) = read_pgm(path)?;
    Ok((w, h, bytes.into_iter().map(|b| b >= 128).collect()))
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width.checked_mul(height) != Some(len) {
        return Err(Error::shape((width, height), len));
    }
    Ok(())
}

fn flip_rows(data: &[f32], width: usize) -> Vec<f32> {
    data.chunks(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn crop_grid(
    data: &[f32],
    width: usize,
    height: usize,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
) -> Result<Vec<f32>> {
    if cw == 0 || ch == 0 || x0 + cw > width || y0 + ch > height {
        return Err(Error::Argument(format!(
            "crop {cw}x{ch}+{x0}+{y0} exceeds {width}x{height}"
        )));
    }
    Ok((y0..y0 + ch)
        .flat_map(|y| data[y * width + x0..y * width + x0 + cw].iter().copied())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_disparities_collapse_to_sentinel() {
        let map = DisparityMap::new(3, 1, vec![-7.5, 0.0, 2.0]).unwrap();
        assert_eq!(map.data(), &[INVALID_DISPARITY, 0.0, 2.0]);
        assert_eq!(map.valid_count(), 2);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![1.5]).is_err());
        assert!(Image::new(2, 1, vec![0.5]).is_err());
        assert!(ConfidenceMap::new(1, 1, vec![-0.1]).is_err());
    }

    #[test]
    fn flip_and_crop() {
        let img = Image::new(3, 2, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.flip_horizontal().data(), &[0.2, 0.1, 0.0, 0.5, 0.4, 0.3]);
        assert_eq!(img.crop(1, 1, 2, 1).unwrap().data(), &[0.4, 0.5]);
        assert!(img.crop(2, 0, 2, 1).is_err());
    }
}
