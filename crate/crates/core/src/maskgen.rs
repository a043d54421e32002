//! Rectangular and free-form stroke masks with coverage control.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::rng::RandomState;

/// Parameters of the free-form stroke sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeFormParams {
    pub max_strokes: usize,
    pub max_vertices_per_stroke: usize,
    /// Inclusive brush width range in pixels.
    pub brush_width_range: (usize, usize),
    pub max_segment_length: f64,
    pub max_turn_angle: f64,
}

impl Default for FreeFormParams {
    fn default() -> Self {
        Self {
            max_strokes: 6,
            max_vertices_per_stroke: 8,
            brush_width_range: (6, 20),
            max_segment_length: 40.0,
            max_turn_angle: 2.0 * PI / 5.0,
        }
    }
}

impl FreeFormParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.brush_width_range;
        if self.max_strokes < 1 {
            return Err(Error::Param("max_strokes must be at least 1".into()));
        }
        if self.max_vertices_per_stroke < 1 {
            return Err(Error::Param("max_vertices_per_stroke must be at least 1".into()));
        }
        if lo < 1 || lo > hi {
            return Err(Error::Param(format!("invalid brush width range [{lo}, {hi}]")));
        }
        if !(self.max_segment_length >= 1.0) {
            return Err(Error::Param("max_segment_length must be at least 1".into()));
        }
        if !(self.max_turn_angle >= 0.0 && self.max_turn_angle.is_finite()) {
            return Err(Error::Param("max_turn_angle must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Accepted coverage interval for rejection sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for CoverageRange {
    fn default() -> Self {
        Self { lo: 0.2, hi: 0.4 }
    }
}

impl CoverageRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = Self { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::Param(format!(
                "coverage range [{}, {}] must satisfy 0 <= lo < hi <= 1",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, c: f64) -> bool {
        self.lo <= c && c <= self.hi
    }
}

/// Inclusive side-length ranges for [`rect_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideRange {
    pub height: (usize, usize),
    pub width: (usize, usize),
}

/// A polyline drawn with a round brush.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    /// `(y, x)` in continuous pixel coordinates; pixel `(i, j)` covers
    /// `[i, i+1) x [j, j+1)`.
    pub vertices: Vec<(f64, f64)>,
    pub brush_width: f64,
}

/// Fraction of ones.
pub fn coverage(mask: &Mask) -> f64 {
    mask.count() as f64 / (mask.height() * mask.width()) as f64
}

/// One filled axis-aligned rectangle with uniformly random sides and position.
pub fn rect_mask(rs: &mut RandomState, h: usize, w: usize, sides: SideRange) -> Result<Mask> {
    let (hmin, hmax) = sides.height;
    let (wmin, wmax) = sides.width;
    if hmin < 1 || wmin < 1 || hmin > hmax || wmin > wmax {
        return Err(Error::Param(format!("invalid side range {sides:?}")));
    }
    if hmax > h || wmax > w {
        return Err(Error::Param(format!("side range {sides:?} does not fit in {h}x{w}")));
    }
    let rh = rs.range(hmin..=hmax);
    let rw = rs.range(wmin..=wmax);
    let y0 = rs.range(0..=h - rh);
    let x0 = rs.range(0..=w - rw);
    Mask::rect(h, w, y0, x0, rh, rw)
}

/// Samples stroke geometry: a stroke count, then per stroke a start point,
/// heading, brush width and a chain of bounded-turn, bounded-length segments.
pub fn sample_strokes(rs: &mut RandomState, h: usize, w: usize, p: &FreeFormParams) -> Result<Vec<Stroke>> {
    p.validate()?;
    let n_strokes = rs.range(1..=p.max_strokes);
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let mut y = rs.uniform() * h as f64;
        let mut x = rs.uniform() * w as f64;
        let mut heading = rs.uniform() * 2.0 * PI;
        let brush = rs.range(p.brush_width_range.0..=p.brush_width_range.1) as f64;
        let n_vertices = rs.range(1..=p.max_vertices_per_stroke);
        let mut vertices = vec![(y, x)];
        for _ in 0..n_vertices {
            heading += (2.0 * rs.uniform() - 1.0) * p.max_turn_angle;
            let len = 1.0 + rs.uniform() * (p.max_segment_length - 1.0);
            y = (y + len * heading.sin()).clamp(0.0, h as f64);
            x = (x + len * heading.cos()).clamp(0.0, w as f64);
            vertices.push((y, x));
        }
        strokes.push(Stroke {
            vertices,
            brush_width: brush,
        });
    }
    Ok(strokes)
}

fn stamp_disk(mask: &mut Mask, cy: f64, cx: f64, radius: f64) {
    let (h, w) = mask.dims();
    let r2 = radius * radius;
    let y0 = (cy - radius - 0.5).floor().max(0.0) as usize;
    let x0 = (cx - radius - 0.5).floor().max(0.0) as usize;
    let y1 = ((cy + radius + 0.5).ceil() as usize).min(h);
    let x1 = ((cx + radius + 0.5).ceil() as usize).min(w);
    for y in y0..y1 {
        let dy = y as f64 + 0.5 - cy;
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r2 {
                mask.set(y, x, true);
            }
        }
    }
}

/// Rasterizes strokes by stamping brush-sized disks at unit steps along
/// every segment.
pub fn rasterize_strokes(h: usize, w: usize, strokes: &[Stroke]) -> Result<Mask> {
    let mut mask = Mask::empty(h, w)?;
    for s in strokes {
        let radius = s.brush_width / 2.0;
        if let [(y, x)] = s.vertices[..] {
            stamp_disk(&mut mask, y, x, radius);
        }
        for seg in s.vertices.windows(2) {
            let ((ya, xa), (yb, xb)) = (seg[0], seg[1]);
            let len = ((yb - ya).powi(2) + (xb - xa).powi(2)).sqrt();
            let steps = len.ceil().max(1.0) as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                stamp_disk(&mut mask, ya + t * (yb - ya), xa + t * (xb - xa), radius);
            }
        }
    }
    Ok(mask)
}

pub fn free_form_mask(rs: &mut RandomState, h: usize, w: usize, p: &FreeFormParams) -> Result<Mask> {
    let strokes = sample_strokes(rs, h, w, p)?;
    rasterize_strokes(h, w, &strokes)
}

/// Rejection-samples free-form masks until one has coverage in `range`.
pub fn sample_mask_in_coverage(
    rs: &mut RandomState,
    h: usize,
    w: usize,
    p: &FreeFormParams,
    range: CoverageRange,
    max_tries: usize,
) -> Result<Mask> {
    range.validate()?;
    if max_tries < 1 {
        return Err(Error::Param("max_tries must be at least 1".into()));
    }
    let mut last = 0.0;
    for _ in 0..max_tries {
        let m = free_form_mask(rs, h, w, p)?;
        last = coverage(&m);
        if range.contains(last) {
            return Ok(m);
        }
    }
    Err(Error::SamplingFailure {
        tries: max_tries,
        last_coverage: last,
    })
}
