//! Procedural corpora: tiled textures with strong patch recurrence, smooth
//! noise fields without it, and supervised pre-training of the inpainter.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{apply_mask, compose_network_input, composite_output, Image, Mask};
use crate::maskgen::{rect_mask, sample_mask_in_coverage, CoverageRange, FreeFormParams, SideRange};
use crate::metrics::masked_psnr;
use crate::network::{forward, init_network, optimizer_step, AdamConfig, AdamState, ArchConfig, NetworkParams};
use crate::rng::{mix64, RandomState};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Checker,
    GradientBlobs,
    Brick,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] = [
        TextureFamily::Stripes,
        TextureFamily::Checker,
        TextureFamily::GradientBlobs,
        TextureFamily::Brick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Checker => "checker",
            TextureFamily::GradientBlobs => "gradient_blobs",
            TextureFamily::Brick => "brick",
        }
    }
}

/// Per-tile perturbation: a brightness offset drawn from `[-brightness, brightness]`
/// and a sub-pixel shift drawn from `[-shift, shift]` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub shift: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { brightness: 0.03, shift: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceSpec {
    pub tile_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
    pub family: TextureFamily,
    pub jitter: Jitter,
}

impl Default for RecurrenceSpec {
    fn default() -> Self {
        Self {
            tile_size: 32,
            grid_rows: 4,
            grid_cols: 4,
            channels: 3,
            family: TextureFamily::Stripes,
            jitter: Jitter::default(),
        }
    }
}

impl RecurrenceSpec {
    pub fn dims(&self) -> (usize, usize) {
        (self.tile_size * self.grid_rows, self.tile_size * self.grid_cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 4 || self.grid_rows < 1 || self.grid_cols < 1 || self.grid_rows * self.grid_cols < 2 {
            return Err(Error::Param(format!(
                "need tile_size >= 4 and at least two tiles, got {} px, {}x{}",
                self.tile_size, self.grid_rows, self.grid_cols
            )));
        }
        let (h, w) = self.dims();
        if h < 8 || w < 8 {
            return Err(Error::Param(format!("image {h}x{w} is smaller than 8x8")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Param(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let b = self.jitter.brightness;
        if !(0.0..0.5).contains(&b) {
            return Err(Error::Param(format!(
                "brightness jitter {b} leaves no room for intensities in [0, 1]"
            )));
        }
        if !(0.0..1.0).contains(&self.jitter.shift) {
            return Err(Error::Param(format!("shift jitter must be in [0, 1), got {}", self.jitter.shift)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePlacement {
    pub row: usize,
    pub col: usize,
    pub y: usize,
    pub x: usize,
    pub offset: f64,
    pub shift: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentMeta {
    pub spec: RecurrenceSpec,
    pub base_tile: Image,
    pub tiles: Vec<TilePlacement>,
}

/// Periodic pattern in [0, 1] over a `size`-pixel torus.
fn pattern(rs: &mut RandomState, family: TextureFamily, size: usize) -> Box<dyn Fn(f64, f64) -> f64> {
    let s = size as f64;
    match family {
        TextureFamily::Stripes => {
            let ky = rs.range(0..=3) as f64;
            let kx = rs.range(1..=4) as f64;
            let ky2 = rs.range(1..=5) as f64;
            let phase = rs.uniform() * 2.0 * PI;
            let sharp = 1.0 + 3.0 * rs.uniform();
            Box::new(move |y, x| {
                let a = (2.0 * PI * (ky * y + kx * x) / s + phase).sin();
                let b = (2.0 * PI * ky2 * y / s).cos();
                let v = (sharp * a).tanh() / sharp.tanh();
                (0.5 + 0.35 * v + 0.15 * b * 0.5).clamp(0.0, 1.0)
            })
        }
        TextureFamily::Checker => {
            let cells = [2.0, 4.0][rs.range(0..2)];
            let soft = 0.05 + 0.1 * rs.uniform();
            Box::new(move |y, x| {
                let u = (2.0 * PI * cells * y / (2.0 * s)).sin();
                let v = (2.0 * PI * cells * x / (2.0 * s)).sin();
                let t = (u * v / soft).tanh();
                0.5 + 0.5 * t
            })
        }
        TextureFamily::GradientBlobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rs.range(3..=5))
                .map(|_| {
                    let amp = if rs.uniform() < 0.5 { -1.0 } else { 1.0 };
                    (rs.uniform() * s, rs.uniform() * s, s * (0.08 + 0.12 * rs.uniform()), amp)
                })
                .collect();
            let gy = rs.range(0..=2) as f64;
            let gx = rs.range(1..=2) as f64;
            Box::new(move |y, x| {
                let mut v = 0.25 * (2.0 * PI * (gy * y + gx * x) / s).cos();
                for &(by, bx, r, amp) in &blobs {
                    let dy = (y - by).rem_euclid(s);
                    let dx = (x - bx).rem_euclid(s);
                    let dy = dy.min(s - dy);
                    let dx = dx.min(s - dx);
                    v += 0.5 * amp * (-(dy * dy + dx * dx) / (2.0 * r * r)).exp();
                }
                (0.5 + v).clamp(0.0, 1.0)
            })
        }
        TextureFamily::Brick => {
            let rows = [2.0, 4.0][rs.range(0..2)];
            let cols = rows / 2.0;
            let mortar = 1.0 + rs.uniform();
            let grain = rs.uniform() * 2.0 * PI;
            Box::new(move |y, x| {
                let bh = s / rows;
                let bw = s / cols;
                let r = (y / bh).floor();
                let xo = if (r as i64) % 2 == 1 { bw / 2.0 } else { 0.0 };
                let ly = y - r * bh;
                let lx = (x + xo).rem_euclid(bw);
                let edge = ly.min(bh - ly).min(lx).min(bw - lx);
                let m = ((edge - mortar) * 1.5).tanh() * 0.5 + 0.5;
                let face = 0.75 + 0.1 * (2.0 * PI * 3.0 * x / s + grain + r).sin();
                (0.15 + m * (face - 0.15)).clamp(0.0, 1.0)
            })
        }
    }
}

fn palette_pair(rs: &mut RandomState, channels: usize, margin: f64) -> (Vec<f64>, Vec<f64>) {
    let span = 1.0 - 2.0 * margin;
    loop {
        let a: Vec<f64> = (0..channels).map(|_| margin + span * rs.uniform()).collect();
        let b: Vec<f64> = (0..channels).map(|_| margin + span * rs.uniform()).collect();
        let contrast = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / channels as f64;
        if contrast > 0.25 * span {
            return (a, b);
        }
    }
}

/// Samples a base tile for `spec`; intensities lie in `[b, 1 - b]` for
/// brightness jitter `b`.
pub fn base_tile(rs: &mut RandomState, spec: &RecurrenceSpec) -> Result<Image> {
    spec.validate()?;
    let f = pattern(rs, spec.family, spec.tile_size);
    let (lo, hi) = palette_pair(rs, spec.channels, spec.jitter.brightness);
    let t = spec.tile_size;
    Image::from_fn(t, t, spec.channels, |c, y, x| {
        let v = f(y as f64 + 0.5, x as f64 + 0.5);
        lo[c] + v * (hi[c] - lo[c])
    })
}

/// Bilinear sample of a tile treated as periodic.
fn sample_periodic(tile: &Image, c: usize, y: f64, x: f64) -> f64 {
    let n = tile.height() as f64;
    let (y, x) = (y.rem_euclid(n), x.rem_euclid(n));
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let t = tile.height();
    let (y0, x0) = (y0 as usize % t, x0 as usize % t);
    let (y1, x1) = ((y0 + 1) % t, (x0 + 1) % t);
    let top = tile.get(c, y0, x0) * (1.0 - fx) + tile.get(c, y0, x1) * fx;
    let bot = tile.get(c, y1, x0) * (1.0 - fx) + tile.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Tiles one procedurally generated base tile over the grid, jittering each copy.
pub fn synth_recurrent(rs: &mut RandomState, spec: &RecurrenceSpec) -> Result<(Image, RecurrentMeta)> {
    let tile = base_tile(rs, spec)?;
    let t = spec.tile_size;
    let mut tiles = Vec::with_capacity(spec.grid_rows * spec.grid_cols);
    for row in 0..spec.grid_rows {
        for col in 0..spec.grid_cols {
            let j = spec.jitter;
            let offset = j.brightness * (2.0 * rs.uniform() - 1.0);
            let shift = (j.shift * (2.0 * rs.uniform() - 1.0), j.shift * (2.0 * rs.uniform() - 1.0));
            tiles.push(TilePlacement { row, col, y: row * t, x: col * t, offset, shift });
        }
    }
    let (h, w) = spec.dims();
    let image = Image::from_fn(h, w, spec.channels, |c, y, x| {
        let p = &tiles[(y / t) * spec.grid_cols + x / t];
        let ly = (y - p.y) as f64 + p.shift.0;
        let lx = (x - p.x) as f64 + p.shift.1;
        (sample_periodic(&tile, c, ly, lx) + p.offset).clamp(0.0, 1.0)
    })?;
    Ok((image, RecurrentMeta { spec: *spec, base_tile: tile, tiles }))
}

/// Separable box blur with clamped borders.
fn box_blur(map: &mut FeatureMap, radius: usize) {
    let (h, w) = (map.height, map.width);
    let r = radius as isize;
    for c in 0..map.channels {
        let plane = &mut map.data[c * h * w..(c + 1) * h * w];
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += plane[y * w + xx];
                }
                tmp[y * w + x] = acc / (2 * radius + 1) as f64;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += tmp[yy * w + x];
                }
                plane[y * w + x] = acc / (2 * radius + 1) as f64;
            }
        }
    }
}

/// Low-pass filtered noise with no imposed repetition, stretched to `[0.05, 0.95]`.
pub fn synth_control(rs: &mut RandomState, height: usize, width: usize, channels: usize) -> Result<Image> {
    let mut field = FeatureMap::zeros(channels, height, width);
    let mut detail = FeatureMap::zeros(channels, height, width);
    for v in field.data.iter_mut() {
        *v = rs.normal();
    }
    for v in detail.data.iter_mut() {
        *v = rs.normal();
    }
    // coarse structure plus finer detail, three box passes each (~gaussian)
    for _ in 0..3 {
        box_blur(&mut field, 6);
        box_blur(&mut detail, 2);
    }
    let plane = height * width;
    for c in 0..channels {
        let p = &mut field.data[c * plane..(c + 1) * plane];
        let d = &detail.data[c * plane..(c + 1) * plane];
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt().max(1e-12)
        };
        let (sp, sdd) = (sd(p), sd(d));
        for (a, b) in p.iter_mut().zip(d) {
            *a = *a / sp + 0.5 * b / sdd;
        }
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for v in p.iter_mut() {
            *v = 0.05 + 0.9 * (*v - lo) / span;
        }
    }
    Image::from_feature_map(field)
}

/// Which seed range an image is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    TestRecurrent,
    TestControl,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::TestRecurrent, Split::TestControl];
    const STRIDE: u64 = 1_000_000;

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::TestRecurrent => "test_recurrent",
            Split::TestControl => "test_control",
        }
    }

    fn slot(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::TestRecurrent => 1,
            Split::TestControl => 2,
            Split::Validation => 3,
        }
    }

    /// Seed of image `index`. Each split owns a disjoint block of a million seeds.
    pub fn seed(self, base: u64, index: usize) -> Result<u64> {
        if index as u64 >= Self::STRIDE {
            return Err(Error::Param(format!("split index {index} exceeds {}", Self::STRIDE)));
        }
        Ok(base.wrapping_add(self.slot() * Self::STRIDE + index as u64))
    }
}

/// Checks that no seed appears in two splits.
pub fn assert_disjoint(sets: &[(Split, Vec<u64>)]) -> Result<()> {
    let mut seen = std::collections::HashMap::new();
    for (split, seeds) in sets {
        for s in seeds {
            if let Some(prev) = seen.insert(*s, *split) {
                if prev != *split {
                    return Err(Error::Param(format!(
                        "seed {s} shared by {} and {}",
                        prev.name(),
                        split.name()
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub control_size: usize,
    pub tile_size: usize,
    pub grid: usize,
    pub channels: usize,
    pub jitter: Jitter,
    /// Fraction of training images drawn from the control generator.
    pub train_control_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_size: 500,
            validation_size: 16,
            test_size: 40,
            control_size: 40,
            tile_size: 32,
            grid: 4,
            channels: 3,
            jitter: Jitter::default(),
            train_control_fraction: 0.5,
        }
    }
}

/// One corpus image with the mask it is tested under.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub description: String,
    pub image: Image,
    pub mask: Mask,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(Error::Param("corpus size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train_control_fraction) {
            return Err(Error::Param("train_control_fraction must be in [0, 1]".into()));
        }
        self.spec(TextureFamily::Stripes).validate()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.tile_size * self.grid, self.tile_size * self.grid)
    }

    pub fn size_of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Validation => self.validation_size,
            Split::TestRecurrent => self.test_size,
            Split::TestControl => self.control_size,
        }
    }

    fn spec(&self, family: TextureFamily) -> RecurrenceSpec {
        RecurrenceSpec {
            tile_size: self.tile_size,
            grid_rows: self.grid,
            grid_cols: self.grid,
            channels: self.channels,
            family,
            jitter: self.jitter,
        }
    }

    /// Deterministically generates image `index` of `split` from the base seed.
    pub fn sample(&self, base_seed: u64, split: Split, index: usize) -> Result<Sample> {
        self.validate()?;
        let seed = split.seed(base_seed, index)?;
        let mut rs = RandomState::new(mix64(seed));
        let (h, w) = self.dims();
        let control = match split {
            Split::TestControl => true,
            Split::Train => rs.uniform() < self.train_control_fraction,
            _ => false,
        };
        let (image, description) = if control {
            (synth_control(&mut rs, h, w, self.channels)?, "control".to_string())
        } else {
            let family = TextureFamily::ALL[rs.range(0..TextureFamily::ALL.len())];
            let (img, _) = synth_recurrent(&mut rs, &self.spec(family))?;
            (img, family.name().to_string())
        };
        let mask = tile_hole(&mut rs, self.tile_size, self.grid)?;
        Ok(Sample { split, index, seed, description, image, mask })
    }

    pub fn split(&self, base_seed: u64, split: Split) -> Result<Vec<Sample>> {
        (0..self.size_of(split)).map(|i| self.sample(base_seed, split, i)).collect()
    }
}

/// Masks one full interior tile of a `grid x grid` tiling (any tile when the
/// grid has no interior).
pub fn tile_hole(rs: &mut RandomState, tile: usize, grid: usize) -> Result<Mask> {
    let (lo, hi) = if grid >= 3 { (1, grid - 1) } else { (0, grid) };
    let r = rs.range(lo..hi);
    let c = rs.range(lo..hi);
    Mask::rect(tile * grid, tile * grid, r * tile, c * tile, tile, tile)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub coverage: CoverageRange,
    pub free_form: FreeFormParams,
    /// Probability that a training mask is a rectangle rather than free-form.
    pub rect_fraction: f64,
    pub rect_min: usize,
    pub rect_max: usize,
    pub max_mask_tries: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 2e-3,
            coverage: CoverageRange::default(),
            free_form: FreeFormParams::default(),
            rect_fraction: 0.5,
            rect_min: 16,
            rect_max: 48,
            max_mask_tries: 1000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate {} invalid", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.rect_fraction) || self.rect_min < 1 || self.rect_min > self.rect_max {
            return Err(Error::Param("rect mask settings invalid".into()));
        }
        self.coverage.validate()?;
        self.free_form.validate()
    }
}

/// One optimizer step of pre-training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    /// Held-out masked-region PSNR; only measured on the first row and at the
    /// end of each epoch.
    pub heldout_psnr: Option<f64>,
}

pub const PRETRAIN_LOG_COLUMNS: [&str; 4] = ["epoch", "batch", "loss", "heldout_psnr"];

pub fn pretrain_log_csv(log: &[PretrainLogRow]) -> String {
    let mut out = PRETRAIN_LOG_COLUMNS.join(",");
    out.push('\n');
    for r in log {
        let p = r.heldout_psnr.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.batch, r.loss, p));
    }
    out
}

#[derive(Debug)]
pub struct PretrainFailure {
    pub error: Error,
    pub log: Vec<PretrainLogRow>,
}

/// Mean masked-region PSNR of the network's composited restorations.
pub fn heldout_psnr(theta: &NetworkParams, heldout: &[Sample]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Param("held-out set is empty".into()));
    }
    let mut sum = 0.0;
    for s in heldout {
        let masked = apply_mask(&s.image, &s.mask)?;
        let out = forward(theta, &compose_network_input(&masked, &s.mask)?)?;
        sum += masked_psnr(&composite_output(&out, &masked, &s.mask)?, &s.image, &s.mask)?;
    }
    Ok(sum / heldout.len() as f64)
}

/// Same statistic for the copy-zero restoration (the masked input itself).
pub fn copy_zero_psnr(heldout: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in heldout {
        sum += masked_psnr(&apply_mask(&s.image, &s.mask)?, &s.image, &s.mask)?;
    }
    Ok(sum / heldout.len().max(1) as f64)
}

fn training_mask(rs: &mut RandomState, h: usize, w: usize, cfg: &PretrainConfig) -> Result<Mask> {
    if rs.uniform() < cfg.rect_fraction {
        let lo = cfg.rect_min.min(h.min(w) / 2);
        let sides = SideRange {
            height: (lo, cfg.rect_max.clamp(lo, h / 2)),
            width: (lo, cfg.rect_max.clamp(lo, w / 2)),
        };
        rect_mask(rs, h, w, sides)
    } else {
        sample_mask_in_coverage(rs, h, w, &cfg.free_form, cfg.coverage, cfg.max_mask_tries)
    }
}

/// Supervised masked-reconstruction training: MSE between the raw prediction
/// and the ground truth over every pixel.
pub fn pretrain(
    arch: &ArchConfig,
    cfg: &PretrainConfig,
    train: &[Image],
    heldout: &[Sample],
) -> std::result::Result<(NetworkParams, Vec<PretrainLogRow>), PretrainFailure> {
    let fail = |error, log| PretrainFailure { error, log };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, vec![]));
    }
    if train.is_empty() {
        return Err(fail(Error::Param("training corpus is empty".into()), vec![]));
    }
    let mut rs = RandomState::new(cfg.seed);
    let mut theta = match init_network(&mut rs.derive(0), arch) {
        Ok(t) => t,
        Err(e) => return Err(fail(e, vec![])),
    };
    let mut adam = AdamState::new(&theta.params, AdamConfig::default());
    let mut log = Vec::new();
    let batches = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rs.shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = (|| -> Result<f64> {
                let mut total = theta.params.zeros_like();
                let mut loss = 0.0;
                for &i in chunk {
                    let gt = &train[i];
                    let m = training_mask(&mut rs, gt.height(), gt.width(), cfg)?;
                    let x = compose_network_input(&apply_mask(gt, &m)?, &m)?;
                    let (v, g) = crate::network::gradients(&theta, &x, |p| full_mse(p, gt))?;
                    loss += v;
                    total.add_scaled(&g, 1.0 / chunk.len() as f64);
                }
                optimizer_step(&mut theta.params, &total, cfg.learning_rate, &mut adam)?;
                Ok(loss / chunk.len() as f64)
            })();
            let loss = match step {
                Ok(v) => v,
                Err(e) => return Err(fail(e, log)),
            };
            let measure = (epoch == 0 && b == 0) || b + 1 == batches;
            let heldout_psnr = if measure && !heldout.is_empty() {
                match self::heldout_psnr(&theta, heldout) {
                    Ok(v) => Some(v),
                    Err(e) => return Err(fail(e, log)),
                }
            } else {
                None
            };
            log.push(PretrainLogRow { epoch, batch: b, loss, heldout_psnr });
        }
    }
    Ok((theta, log))
}

fn full_mse(pred: &Image, gt: &Image) -> Result<(f64, FeatureMap)> {
    let n = pred.data().len() as f64;
    let mut grad = pred.to_feature_map();
    let mut sum = 0.0;
    for (g, (&p, &t)) in grad.data.iter_mut().zip(pred.data().iter().zip(gt.data())) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Best NCC between a tile window and any other tile window of the grid,
/// averaged over tiles.
pub fn mean_best_tile_ncc(image: &Image, tile: usize) -> f64 {
    let rows = image.height() / tile;
    let cols = image.width() / tile;
    let windows: Vec<Vec<f64>> = (0..rows * cols)
        .map(|k| image.window((k / cols) * tile, (k % cols) * tile, tile))
        .collect();
    let mut sum = 0.0;
    for (i, a) in windows.iter().enumerate() {
        let best = windows
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, b)| crate::image::ncc(a, b))
            .fold(f64::NEG_INFINITY, f64::max);
        sum += best;
    }
    sum / windows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ncc;

    fn spec(family: TextureFamily, brightness: f64, shift: f64) -> RecurrenceSpec {
        RecurrenceSpec { family, jitter: Jitter { brightness, shift }, ..RecurrenceSpec::default() }
    }

    #[test]
    fn zero_jitter_tiles_are_identical() {
        for family in TextureFamily::ALL {
            let (img, meta) = synth_recurrent(&mut RandomState::new(3), &spec(family, 0.0, 0.0)).unwrap();
            let first = img.window(0, 0, 32);
            for p in &meta.tiles {
                let w = img.window(p.y, p.x, 32);
                assert_eq!(w, first, "{family:?}");
                assert!((ncc(&first, &w) - 1.0).abs() < 1e-12);
            }
            assert_eq!(meta.base_tile.window(0, 0, 32), first);
        }
    }

    #[test]
    fn brightness_jitter_bounds_tile_distance() {
        for seed in 0..8 {
            let family = TextureFamily::ALL[seed % 4];
            let (img, meta) = synth_recurrent(&mut RandomState::new(seed as u64), &spec(family, 0.05, 0.0)).unwrap();
            let wins: Vec<Vec<f64>> = meta.tiles.iter().map(|p| img.window(p.y, p.x, 32)).collect();
            for a in &wins {
                for b in &wins {
                    let linf = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(linf <= 0.1 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let s = spec(TextureFamily::Brick, 0.03, 0.25);
        let a = synth_recurrent(&mut RandomState::new(11), &s).unwrap();
        let b = synth_recurrent(&mut RandomState::new(11), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.dims(), (128, 128));
        let c = synth_control(&mut RandomState::new(4), 64, 48, 3).unwrap();
        assert_eq!(c, synth_control(&mut RandomState::new(4), 64, 48, 3).unwrap());
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jitter_outside_bounds_rejected() {
        for (b, s) in [(0.5, 0.0), (-0.1, 0.0), (0.1, 1.0)] {
            let err = synth_recurrent(&mut RandomState::new(0), &spec(TextureFamily::Checker, b, s)).unwrap_err();
            assert!(matches!(err, Error::Param(_)));
        }
    }

    #[test]
    fn every_tile_has_recurring_matches() {
        for seed in 0..12 {
            let family = TextureFamily::ALL[seed % 4];
            let s = RecurrenceSpec { family, ..RecurrenceSpec::default() };
            let (img, meta) = synth_recurrent(&mut RandomState::new(100 + seed as u64), &s).unwrap();
            for p in &meta.tiles {
                let a = img.window(p.y, p.x, 32);
                let strong = meta
                    .tiles
                    .iter()
                    .filter(|q| (q.row, q.col) != (p.row, p.col))
                    .filter(|q| ncc(&a, &img.window(q.y, q.x, 32)) >= 0.9)
                    .count();
                assert!(strong >= s.grid_rows * s.grid_cols - 1, "{family:?} seed {seed}: {strong}");
            }
        }
    }

    #[test]
    fn control_corpus_has_lower_tile_recurrence() {
        let cfg = CorpusConfig::default();
        let mut rec = 0.0;
        let mut ctl = 0.0;
        for i in 0..20 {
            rec += mean_best_tile_ncc(&cfg.sample(7, Split::TestRecurrent, i).unwrap().image, 32);
            ctl += mean_best_tile_ncc(&cfg.sample(7, Split::TestControl, i).unwrap().image, 32);
        }
        assert!(ctl / 20.0 < rec / 20.0, "control {} vs recurrent {}", ctl / 20.0, rec / 20.0);
        assert!(ctl / 20.0 < 0.6);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let cfg = CorpusConfig::default();
        let sets: Vec<(Split, Vec<u64>)> = Split::ALL
            .iter()
            .map(|&s| (s, (0..cfg.size_of(s)).map(|i| s.seed(42, i).unwrap()).collect()))
            .collect();
        assert_disjoint(&sets).unwrap();
        let clash = vec![(Split::Train, vec![5]), (Split::TestRecurrent, vec![5])];
        assert!(assert_disjoint(&clash).is_err());
        assert!(Split::Train.seed(0, 1_000_000).is_err());
    }

    #[test]
    fn test_hole_is_one_interior_tile() {
        let cfg = CorpusConfig::default();
        for i in 0..10 {
            let s = cfg.sample(1, Split::TestRecurrent, i).unwrap();
            let (y0, x0, y1, x1) = s.mask.bounding_box().unwrap();
            assert_eq!((y1 - y0, x1 - x0), (32, 32));
            assert_eq!(s.mask.count(), 1024);
            assert!(y0 % 32 == 0 && x0 % 32 == 0 && y0 >= 32 && y0 <= 64 && x0 >= 32 && x0 <= 64);
        }
    }

    fn small_setup() -> (ArchConfig, PretrainConfig, Vec<Image>, Vec<Sample>) {
        let corpus = CorpusConfig { tile_size: 8, grid: 2, train_size: 6, validation_size: 2, ..CorpusConfig::default() };
        let train: Vec<Image> = corpus.split(3, Split::Train).unwrap().into_iter().map(|s| s.image).collect();
        let heldout = corpus.split(3, Split::Validation).unwrap();
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 4,
            rect_min: 4,
            rect_max: 8,
            coverage: CoverageRange::new(0.05, 0.6).unwrap(),
            free_form: FreeFormParams { brush_width_range: (2, 4), max_segment_length: 6.0, ..FreeFormParams::default() },
            ..PretrainConfig::default()
        };
        (ArchConfig::tiny(3), cfg, train, heldout)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (arch, cfg, train, heldout) = small_setup();
        let cfg = PretrainConfig { epochs: 0, ..cfg };
        let (theta, log) = pretrain(&arch, &cfg, &train, &heldout).unwrap();
        let init = init_network(&mut RandomState::new(cfg.seed).derive(0), &arch).unwrap();
        assert_eq!(theta, init);
        assert!(log.is_empty());
    }

    #[test]
    fn pretrain_log_shape_and_determinism() {
        let (arch, cfg, train, heldout) = small_setup();
        let (a, log) = pretrain(&arch, &cfg, &train, &heldout).unwrap();
        let (b, log2) = pretrain(&arch, &cfg, &train, &heldout).unwrap();
        assert_eq!(a, b);
        assert_eq!(log, log2);
        assert_eq!(log.len(), 2 * 2);
        let measured: Vec<(usize, usize)> =
            log.iter().filter(|r| r.heldout_psnr.is_some()).map(|r| (r.epoch, r.batch)).collect();
        assert_eq!(measured, vec![(0, 0), (0, 1), (1, 1)]);
        let csv = pretrain_log_csv(&log);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(3).unwrap().ends_with(','));
    }

    #[test]
    fn pretrain_rejects_empty_corpus() {
        let (arch, cfg, _, heldout) = small_setup();
        assert!(matches!(pretrain(&arch, &cfg, &[], &heldout).unwrap_err().error, Error::Param(_)));
    }
}
