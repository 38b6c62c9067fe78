use crate::error::{Error, Result};
use crate::formats::Image;

/// Per-pixel census signatures. Bit `i` (counting from the most significant
/// used bit) is set when the `i`-th window neighbour in raster order is
/// darker than the centre.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusMap {
    width: usize,
    height: usize,
    window: usize,
    codes: Vec<u64>,
    valid: Vec<bool>,
}

/// Largest window whose signature fits a `u64`.
pub const MAX_CENSUS_WINDOW: usize = 7;

impl CensusMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Signature length, `window^2 - 1`.
    pub fn bit_count(&self) -> usize {
        self.window * self.window - 1
    }

    #[inline]
    pub fn code(&self, x: usize, y: usize) -> u64 {
        self.codes[y * self.width + x]
    }

    /// False where the window leaves the image.
    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Signature bits in raster order of the neighbours.
    pub fn bits(&self, x: usize, y: usize) -> Vec<bool> {
        let n = self.bit_count();
        let code = self.code(x, y);
        (0..n).map(|i| (code >> (n - 1 - i)) & 1 == 1).collect()
    }
}

pub fn census_transform(img: &Image, window: usize) -> Result<CensusMap> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Argument(format!(
            "census window must be odd and >= 3, got {window}"
        )));
    }
    if window > MAX_CENSUS_WINDOW || window > img.width().min(img.height()) {
        return Err(Error::Argument(format!(
            "census window {window} too large for a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let r = window / 2;
    let data = img.data();
    let mut codes = vec![0u64; w * h];
    let mut valid = vec![false; w * h];
    for y in r..h - r {
        for x in r..w - r {
            let centre = data[y * w + x];
            let mut code = 0u64;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    if yy == y && xx == x {
                        continue;
                    }
                    code = (code << 1) | (data[yy * w + xx] < centre) as u64;
                }
            }
            codes[y * w + x] = code;
            valid[y * w + x] = true;
        }
    }
    Ok(CensusMap {
        width: w,
        height: h,
        window,
        codes,
        valid,
    })
}
