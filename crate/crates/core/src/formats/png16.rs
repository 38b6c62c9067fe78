use std::io::Cursor;
use std::path::Path;

use super::{DisparityMap, Image, INVALID_DISPARITY};
use crate::error::{Error, Result};

fn decode_err(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    sixteen_bit: bool,
    samples: Vec<u8>,
}

fn decode(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    buf.truncate(info.line_size * info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format(format!(
                "{}: palette not expanded",
                path.display()
            )))
        }
    };
    let sixteen_bit = match info.bit_depth {
        png::BitDepth::Eight => false,
        png::BitDepth::Sixteen => true,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported bit depth {other:?}",
                path.display()
            )))
        }
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        sixteen_bit,
        samples: buf,
    })
}

impl Decoded {
    fn sample(&self, pixel: usize, channel: usize) -> u16 {
        let i = pixel * self.channels + channel;
        if self.sixteen_bit {
            u16::from_be_bytes([self.samples[2 * i], self.samples[2 * i + 1]])
        } else {
            self.samples[i] as u16
        }
    }
}

pub(super) fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let d = decode(bytes, path)?;
    let full = if d.sixteen_bit { 65535.0 } else { 255.0 };
    let colour = if d.channels >= 3 { 3 } else { 1 };
    let data = (0..d.width * d.height)
        .map(|p| {
            let sum: f32 = (0..colour).map(|c| d.sample(p, c) as f32).sum();
            sum / (colour as f32 * full)
        })
        .collect();
    Image::from_clamped(d.width, d.height, data)
}

pub(super) fn read_kitti(path: &Path) -> Result<DisparityMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(&bytes, path)?;
    if !d.sixteen_bit || d.channels != 1 {
        return Err(Error::Format(format!(
            "{}: KITTI disparity must be 16-bit grayscale",
            path.display()
        )));
    }
    let data = (0..d.width * d.height)
        .map(|p| match d.sample(p, 0) {
            0 => INVALID_DISPARITY,
            v => v as f32 / 256.0,
        })
        .collect();
    DisparityMap::new(d.width, d.height, data)
}

/// Quantises a valid disparity into the KITTI 16-bit code. Zero disparity
/// maps to code 1 so that it stays distinguishable from "invalid".
pub(crate) fn kitti_code(disparity: f32) -> Result<u16> {
    let code = (disparity as f64 * 256.0).round();
    if code > 65535.0 {
        return Err(Error::Range(format!(
            "disparity {disparity} not encodable as 16-bit KITTI PNG"
        )));
    }
    Ok((code as u16).max(1))
}

pub(super) fn write_kitti(map: &DisparityMap, path: &Path) -> Result<()> {
    let mut raw = Vec::with_capacity(map.data().len() * 2);
    for v in map.data() {
        let code = if *v < 0.0 { 0 } else { kitti_code(*v)? };
        raw.extend_from_slice(&code.to_be_bytes());
    }
    write_png(path, map.width(), map.height(), png::BitDepth::Sixteen, &raw)
}

pub(super) fn write_gray8(image: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_png(path, image.width(), image.height(), png::BitDepth::Eight, &raw)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    raw: &[u8],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| encode_err(path, e))?;
    writer.write_image_data(raw).map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{read_disparity, read_image, write_disparity, DisparityFormat};

    #[test]
    fn kitti_codes() {
        assert_eq!(kitti_code(1.0).unwrap(), 256);
        assert_eq!(kitti_code(0.0).unwrap(), 1);
        assert_eq!(kitti_code(65535.0 / 256.0).unwrap(), 65535);
        assert!(matches!(kitti_code(300.0), Err(Error::Range(_))));
    }

    #[test]
    fn sentinel_stored_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let map = DisparityMap::new(3, 1, vec![1.0, INVALID_DISPARITY, 2.5]).unwrap();
        write_disparity(&map, &path, DisparityFormat::KittiPng16).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let d = decode(&bytes, &path).unwrap();
        assert_eq!((0..3).map(|p| d.sample(p, 0)).collect::<Vec<_>>(), vec![256, 0, 640]);
        let back = read_disparity(&path, DisparityFormat::KittiPng16).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn unencodable_disparity_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let map = DisparityMap::new(1, 1, vec![300.0]).unwrap();
        let err = write_disparity(&map, dir.path().join("x.png"), DisparityFormat::KittiPng16);
        assert!(matches!(err, Err(Error::Range(_))));
    }

    #[test]
    fn colour_png_averaged_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let file = std::fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 2, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[255, 0, 0, 30, 60, 90]).unwrap();
        w.finish().unwrap();
        let img = read_image(&path).unwrap();
        assert!((img.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((img.data()[1] - 60.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn gray8_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = Image::new(2, 2, vec![0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0]).unwrap();
        crate::formats::write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }
}
