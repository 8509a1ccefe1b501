use super::{Result, VlmError};

/// Square pixel grid stored row-major as `[y][x][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 || channels == 0 || pixels.len() != size * size * channels {
            return Err(VlmError::Config(format!(
                "{} pixel values do not form a {size}x{size}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self { size, channels, pixels })
    }

    pub fn blank(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            pixels: vec![0.0; size * size * channels],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.size + x) * self.channels + c] = v;
    }

    /// Flattens into `[grid*grid, patch*patch*channels]` rows, patches in
    /// row-major grid order and pixels `(dy, dx, channel)` within a patch.
    pub fn patches(&self, patch: usize) -> Vec<f64> {
        let grid = self.size / patch;
        let mut out = Vec::with_capacity(self.pixels.len());
        for pr in 0..grid {
            for pc in 0..grid {
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..self.channels {
                            out.push(self.get(pr * patch + dy, pc * patch + dx, c));
                        }
                    }
                }
            }
        }
        out
    }

    /// Little-endian f64 values, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(size: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(VlmError::Config("image byte length is not a multiple of 8".into()));
        }
        let pixels = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(size, channels, pixels)
    }
}
