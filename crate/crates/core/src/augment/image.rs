use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::InvalidShape {
                op: "image",
                shape: vec![height, width, CHANNELS],
                reason: "pixel buffer length does not match dimensions",
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Builds an image from channel-planar bytes (all R, then G, then B).
    pub fn from_planar(width: usize, height: usize, planar: &[u8]) -> Result<Self> {
        let n = width * height;
        if planar.len() != n * CHANNELS {
            return Err(Error::InvalidShape {
                op: "image",
                shape: vec![CHANNELS, height, width],
                reason: "planar buffer length does not match dimensions",
            });
        }
        let mut pixels = vec![0u8; n * CHANNELS];
        for c in 0..CHANNELS {
            for i in 0..n {
                pixels[i * CHANNELS + c] = planar[c * n + i];
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Appends the image to `out` as channel-planar `[3, h, w]` floats in [0, 1].
    pub fn extend_chw(&self, out: &mut Vec<f64>) {
        let n = self.width * self.height;
        for c in 0..CHANNELS {
            out.extend((0..n).map(|i| self.pixels[i * CHANNELS + c] as f64 / 255.0));
        }
    }
}
