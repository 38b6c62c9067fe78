use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// Reads a binary (P5) PGM with maxval <= 255.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::shape(width * height, pixels.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(super) fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (w, h, pixels) = parse_pgm(bytes, path)?;
    Image::new(w, h, pixels.iter().map(|p| *p as f32 / 255.0).collect())
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    if cursor.token() != Some(b"P5".as_slice()) {
        return Err(Error::Format(format!("{}: not a binary PGM", path.display())));
    }
    let width = cursor.number(path)?;
    let height = cursor.number(path)?;
    let maxval = cursor.number(path)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{}: unsupported PGM maxval {maxval}",
            path.display()
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = cursor.pos + 1;
    let len = width * height;
    if width == 0 || height == 0 || bytes.len() < start + len {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated PGM raster"),
        ));
    }
    let mut pixels = bytes[start..start + len].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    Ok((width, height, pixels))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, path: &Path) -> Result<usize> {
        self.token()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: malformed PGM header", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::read_image;

    fn write_raw(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn endpoints_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(&dir, "a.pgm", b"P5\n2 1\n255\n\x00\xff");
        assert_eq!(read_image(&path).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn midpoint_is_linear() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(&dir, "b.pgm", b"P5\n# comment\n1 1\n255\n\x80");
        assert_eq!(read_image(&path).unwrap().data(), &[128.0 / 255.0]);
    }

    #[test]
    fn truncated_raster_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(&dir, "c.pgm", b"P5\n4 4\n255\n\x00\x01");
        assert!(matches!(read_image(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_image("/nonexistent/nowhere.pgm"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unknown_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(&dir, "d.pgm", b"P2\n1 1\n255\n0\n");
        assert!(matches!(read_image(&path), Err(Error::Format(_))));
    }
}
