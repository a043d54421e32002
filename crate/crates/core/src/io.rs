//! 8-bit PNG reading and writing for images and masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn encode(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit grayscale or RGB PNG, mapping `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Image::new(h as usize, w as usize, 1, g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let n = w * h;
            let mut data = vec![0.0; 3 * n];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * n + i] = px[c] as f64 / 255.0;
                }
            }
            Image::new(h, w, 3, data)
        }
        other => Err(Error::Format(format!(
            "{}: expected 8-bit gray or RGB PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Saves as an 8-bit PNG, mapping intensity `x` to `round(255 x)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = img.dims();
    let n = h * w;
    let dynimg = if img.channels() == 1 {
        let raw = img.data().iter().map(|&v| quantize(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    } else {
        let d = img.data();
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(quantize(d[c * n + i]));
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    };
    encode(dynimg, path.as_ref())
}

/// Loads a single-channel PNG whose pixels are 0 (valid) or 255 (missing).
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    match decode(path)? {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = g
                .into_raw()
                .into_iter()
                .map(|v| match v {
                    0 => Ok(false),
                    255 => Ok(true),
                    other => Err(Error::Format(format!("{}: mask value {other} not in {{0, 255}}", path.display()))),
                })
                .collect::<Result<Vec<bool>>>()?;
            Mask::new(h as usize, w as usize, data)
        }
        other => Err(Error::Format(format!(
            "{}: masks must be 8-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.dims();
    let raw = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode(
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size")),
        path.as_ref(),
    )
}
