use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height × width × 3` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}×{height}×3 image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, 3]
    }

    pub fn get(&self, px: usize, py: usize) -> [f64; 3] {
        let i = (py * self.width + px) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, px: usize, py: usize, rgb: [f64; 3]) {
        let i = (py * self.width + px) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(3)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot downsample {}×{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set(x, y, acc.map(|v| v * norm));
            }
        }
        Ok(out)
    }

    /// 8-bit quantization with round-half-up and clamping.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    /// Three planes (R, G, B), each `height × width` little-endian `f64`.
    pub fn write_raw_planes(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for c in 0..3 {
            for px in self.pixels() {
                buf.extend_from_slice(&px[c].to_le_bytes());
            }
        }
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw_planes(path: &Path, width: usize, height: usize) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let n = width * height;
        if bytes.len() != n * 3 * 8 {
            return Err(Error::invalid(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                n * 24,
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut data = vec![0.0; n * 3];
        for c in 0..3 {
            for i in 0..n {
                data[i * 3 + c] = vals[c * n + i];
            }
        }
        Image::from_data(width, height, data)
    }
}
