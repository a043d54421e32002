//! Channel-major dense feature maps used inside the networks.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> FeatureMap {
        let (h, w) = (self.height, self.width);
        let mut out = FeatureMap::zeros(self.channels, 2 * h, 2 * w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
            for y in 0..2 * h {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
                for (x, v) in drow.iter_mut().enumerate() {
                    *v = row[x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`upsample2`](Self::upsample2): sums each 2x2 block.
    pub fn downsum2(&self) -> FeatureMap {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = FeatureMap::zeros(self.channels, h, w);
        let sw = self.width;
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = &mut out.data[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * sw + 2 * x;
                    dst[y * w + x] = src[i] + src[i + 1] + src[i + sw] + src[i + sw + 1];
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
