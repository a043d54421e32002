//! Images, masks and the masking arithmetic shared by every stage.
//!
//! Images are stored channel-major: each channel is a row-major `height x width`
//! plane of intensities in `[0, 1]`. Masks use 1 for a missing pixel and 0 for a
//! valid one.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Network input: the masked image channels followed by one mask channel.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack(FeatureMap);

/// Geometric transforms used for augmentation. All are pixel permutations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::FlipHorizontal,
        Transform::FlipVertical,
        Transform::Rotate90,
        Transform::Rotate180,
        Transform::Rotate270,
    ];

    fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rotate90 | Transform::Rotate270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source coordinate for output coordinate `(y, x)` of an `h x w` input.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (y, x),
            Transform::FlipHorizontal => (y, w - 1 - x),
            Transform::FlipVertical => (h - 1 - y, x),
            // clockwise
            Transform::Rotate90 => (h - 1 - x, y),
            Transform::Rotate180 => (h - 1 - y, w - 1 - x),
            Transform::Rotate270 => (x, w - 1 - y),
        }
    }

    fn apply_planar<T: Copy>(self, data: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for p in 0..planes {
            let plane = &data[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = self.source(y, x, h, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        (out, oh, ow)
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Shape(format!(
            "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a closure over `(channel, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Network output to image. Values must already lie in `[0, 1]`.
    pub fn from_feature_map(map: FeatureMap) -> Result<Self> {
        Self::new(map.height, map.width, map.channels, map.data)
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.clone(),
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Writes one value, clamped into `[0, 1]`.
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn transformed(&self, t: Transform) -> Image {
        let (data, h, w) = t.apply_planar(&self.data, self.channels, self.height, self.width);
        Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Copy of the `size x size` window at `(y, x)`, flattened channel-major.
    pub fn window(&self, y: usize, x: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size * self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for row in y..y + size {
                out.extend_from_slice(&plane[row * self.width + x..row * self.width + x + size]);
            }
        }
        out
    }

    /// FNV-1a over the bit patterns; used to assert that a buffer never changes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    /// Mask with ones on the half-open rectangle `[y0, y0+h) x [x0, x0+w)`.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > height || x0 + w > width {
            return Err(Error::Param(format!(
                "rectangle {h}x{w} at ({y0},{x0}) exceeds {height}x{width}"
            )));
        }
        let mut m = Self::empty(height, width)?;
        for y in y0..y0 + h {
            m.data[y * width + x0..y * width + x0 + w].fill(true);
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::Shape("mask union of different sizes".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Mask::new(self.height, self.width, data)
    }

    /// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of the ones, if any.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn transformed(&self, t: Transform) -> Mask {
        let (data, h, w) = t.apply_planar(&self.data, 1, self.height, self.width);
        Mask {
            height: h,
            width: w,
            data,
        }
    }
}

impl InputStack {
    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }

    pub fn as_feature_map(&self) -> &FeatureMap {
        &self.0
    }

    /// Last channel, i.e. the mask.
    pub fn mask_plane(&self) -> &[f64] {
        self.0.plane(self.0.channels - 1)
    }
}

fn check_pair(image: &Image, mask: &Mask) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// `I ⊙ (1 − M)`: zero-fills every missing pixel in every channel.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    check_pair(image, mask)?;
    let n = image.height * image.width;
    let mut data = image.data.clone();
    for plane in data.chunks_mut(n) {
        for (v, &m) in plane.iter_mut().zip(&mask.data) {
            if m {
                *v = 0.0;
            }
        }
    }
    Ok(Image { data, ..*image })
}

/// Stacks the masked image and the mask into a `C + 1` channel network input.
pub fn compose_network_input(masked: &Image, mask: &Mask) -> Result<InputStack> {
    check_pair(masked, mask)?;
    let mut data = Vec::with_capacity(masked.data.len() + mask.data.len());
    data.extend_from_slice(&masked.data);
    data.extend(mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    Ok(InputStack(FeatureMap {
        channels: masked.channels + 1,
        height: masked.height,
        width: masked.width,
        data,
    }))
}

/// `input ⊙ (1 − M) + pred ⊙ M`.
pub fn composite_output(pred: &Image, input: &Image, mask: &Mask) -> Result<Image> {
    check_pair(pred, mask)?;
    check_pair(input, mask)?;
    if pred.channels != input.channels {
        return Err(Error::Shape(format!(
            "prediction has {} channels, input has {}",
            pred.channels, input.channels
        )));
    }
    let n = pred.height * pred.width;
    let data = pred
        .data
        .iter()
        .zip(&input.data)
        .enumerate()
        .map(|(i, (&p, &v))| if mask.data[i % n] { p } else { v })
        .collect();
    Ok(Image { data, ..*input })
}

/// Zero-mean normalized cross-correlation between two equally sized windows.
/// Returns 0 when either window has zero variance.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom <= f64::EPSILON * n {
        0.0
    } else {
        sab / denom
    }
}
