//! RGB images in `[0, 1]`, binary PPM (P6) I/O and bilinear resizing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// `height x width x 3` pixels, row-major, channel-interleaved, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(
                "image",
                format!(
                    "{width}x{height} image needs {} values, got {}",
                    width * height * 3,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Encodes as binary PPM, maxval 255, rounding to nearest.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            tokens.push(
                std::str::from_utf8(&bytes[start..pos])
                    .unwrap_or("")
                    .to_string(),
            );
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if tokens[0] != "P6" {
            return Err(Error::Format(format!("expected P6, got {:?}", tokens[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header value {s:?}")))
        };
        let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!(
                "only maxval 255 is supported, got {maxval}"
            )));
        }
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < w * h * 3 {
            return Err(Error::Format(format!(
                "PPM raster has {} bytes, {w}x{h} needs {}",
                raster.len(),
                w * h * 3
            )));
        }
        let data = raster[..w * h * 3]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Self::new(w, h, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// Bilinear resampling with half-pixel centres. An exact 2x reduction
    /// averages each 2x2 block.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |i: usize, scale: f64, n: usize| {
            let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, (c - lo as f64) as f32)
        };
        let mut out = vec![0.0f32; width * height * 3];
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = axis(x, sx, self.width);
                let (a, b, c, d) = (
                    self.pixel(x0, y0),
                    self.pixel(x1, y0),
                    self.pixel(x0, y1),
                    self.pixel(x1, y1),
                );
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * fx;
                    let bot = c[ch] + (d[ch] - c[ch]) * fx;
                    out[(y * width + x) * 3 + ch] = top + (bot - top) * fy;
                }
            }
        }
        Self {
            width,
            height,
            data: out,
        }
    }

    /// Pixels of the `p x p` patch at grid cell `(row, col)`, flattened `(y, x, channel)`.
    pub fn patch(&self, row: usize, col: usize, p: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(p * p * 3);
        for y in 0..p {
            let start = ((row * p + y) * self.width + col * p) * 3;
            out.extend_from_slice(&self.data[start..start + p * 3]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantizes_to_bytes() {
        let img = ImageRGB::new(2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        let back = ImageRGB::from_ppm(&bytes).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(back.to_ppm(), bytes);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        assert_eq!(
            ImageRGB::from_ppm(&bytes).unwrap().pixel(0, 0),
            [1.0, 0.0, 0.0]
        );
        assert!(ImageRGB::from_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
    }

    #[test]
    fn halving_averages_blocks() {
        let img = ImageRGB::new(
            2,
            2,
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        let small = img.resize(1, 1);
        assert!((small.pixel(0, 0)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn patch_extraction_layout() {
        let img = ImageRGB::new(4, 2, (0..24).map(|v| v as f32).collect()).unwrap();
        assert_eq!(
            img.patch(0, 1, 2),
            vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 18.0, 19.0, 20.0, 21.0, 22.0, 23.0]
        );
    }
}
