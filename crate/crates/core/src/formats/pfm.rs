use std::path::Path;

use crate::error::{Error, Result};

/// Reads a single-channel PFM (`Pf`). Rows are stored bottom-up; a negative
/// scale marks little-endian payloads.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = || Error::Format(format!("{}: malformed PFM header", path.display()));

    let mut lines = Vec::with_capacity(3);
    let mut pos = 0;
    while lines.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(malformed)?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| malformed())?;
        pos += end + 1;
        let line = line.trim();
        if !line.is_empty() {
            lines.push(line.to_owned());
        }
    }
    if lines[0] != "Pf" {
        return Err(Error::Format(format!(
            "{}: expected `Pf`, found `{}`",
            path.display(),
            lines[0]
        )));
    }
    let mut dims = lines[1].split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (dims.next(), dims.next(), dims.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => (w, h),
        _ => return Err(malformed()),
    };
    let scale: f32 = lines[2].parse().map_err(|_| malformed())?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed());
    }
    let little_endian = scale < 0.0;

    let payload = &bytes[pos..];
    if payload.len() < width * height * 4 {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated PFM payload"),
        ));
    }
    let mut data = vec![0.0f32; width * height];
    for (i, chunk) in payload.chunks_exact(4).take(width * height).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    Ok((width, height, data))
}

/// Writes a little-endian single-channel PFM.
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width * height {
        return Err(Error::shape(width * height, data.len()));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    for row in data.chunks(width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{read_disparity, DisparityFormat, INVALID_DISPARITY};

    #[test]
    fn big_endian_payload_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let map = read_disparity(&path, DisparityFormat::Pfm).unwrap();
        assert_eq!(map.data(), &[1.5, INVALID_DISPARITY]);
    }

    #[test]
    fn rows_are_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.pfm");
        write_pfm(&path, 1, 2, &[1.0, 2.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(&payload[..4], &2.0f32.to_le_bytes());
        assert_eq!(read_pfm(&path).unwrap().2, vec![1.0, 2.0]);
    }

    #[test]
    fn bad_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"Pf\n1 x\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format(_))));
    }

    #[test]
    fn huge_disparity_is_range_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.pfm");
        write_pfm(&path, 1, 1, &[40000.0]).unwrap();
        assert!(matches!(
            read_disparity(&path, DisparityFormat::Pfm),
            Err(Error::Range(_))
        ));
    }
}
