//! 8-bit raster images.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length the flow solver accepts.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "image {height}x{width}x{channels} needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn put_rgb(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        debug_assert_eq!(self.channels, 3);
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma in `[0, 255]` as `f32`, row-major.
    pub fn to_gray(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f32).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
                .collect(),
        }
    }

    /// Channel-first `[C, H/f, W/f]` floats scaled to `[-0.5, 0.5]`, averaged over `f×f` blocks.
    pub fn pooled_chw(&self, factor: usize) -> Vec<f32> {
        let (h, w, c) = (self.height / factor, self.width / factor, self.channels);
        let mut out = vec![0.0f32; c * h * w];
        let norm = 1.0 / (255.0 * (factor * factor) as f32);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let mut acc = 0u32;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            acc += self.pixel(r * factor + dr, col * factor + dc)[ch] as u32;
                        }
                    }
                    out[(ch * h + r) * w + col] = acc as f32 * norm - 0.5;
                }
            }
        }
        out
    }

    /// Binary PPM (P6) for RGB, PGM (P5) for grayscale.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write!(f, "{magic}\n{} {}\n255\n", self.width, self.height).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.data).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_channels() {
        assert!(Image::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(Image::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0; 4]).is_ok());
    }

    #[test]
    fn gray_of_white_is_255() {
        let img = Image::filled(2, 2, [255, 255, 255]);
        for v in img.to_gray() {
            assert!((v - 255.0).abs() < 1e-3);
        }
    }

    #[test]
    fn pooling_averages_blocks() {
        let mut img = Image::filled(2, 2, [0, 0, 0]);
        img.put_rgb(0, 0, [255, 255, 255]);
        let p = img.pooled_chw(2);
        assert_eq!(p.len(), 3);
        assert!((p[0] - (0.25 - 0.5)).abs() < 1e-6);
    }
}
