//! Distortion metrics and before/after reports.
//!
//! SSIM uses 8x8 uniform windows at every valid position, population
//! statistics, `C1 = 0.01²`, `C2 = 0.03²` and a dynamic range of 1; the
//! per-channel means are averaged. PSNR uses a peak of 1 and reports
//! `f64::INFINITY` for identical images.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Identifies the metric conventions in every report.
pub const METRIC_SETTINGS: &str = "psnr:peak=1;ssim:uniform8x8,c1=1e-4,c2=9e-4,population;l1:percent";

pub const CSV_COLUMNS: [&str; 7] = [
    "id",
    "psnr_before",
    "psnr_after",
    "ssim_before",
    "ssim_after",
    "l1pct_before",
    "l1pct_after",
];

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / m).log10())
    }
}

/// PSNR restricted to the pixels inside `mask`.
pub fn masked_psnr(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    check_same(a, b)?;
    if a.dims() != mask.dims() {
        return Err(Error::Shape("mask and image dims differ".into()));
    }
    if mask.count() == 0 {
        return Err(Error::DegenerateMask("mask selects no pixels".into()));
    }
    let mut sum = 0.0;
    for c in 0..a.channels() {
        for ((x, y), &m) in a.plane(c).iter().zip(b.plane(c)).zip(mask.data()) {
            if m {
                sum += (x - y) * (x - y);
            }
        }
    }
    let m = sum / (mask.count() * a.channels()) as f64;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for yy in y..y + k {
                let row = yy * w;
                for i in row + x..row + x + k {
                    let (p, q) = (a[i], b[i]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean local SSIM, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let c = a.channels();
    Ok((0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), h, w)).sum::<f64>() / c as f64)
}

/// `100 · mean |a − b|`.
pub fn l1_percent(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(100.0 * a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// PSNR/SSIM/L1 of one image against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub l1pct: f64,
}

pub fn score(result: &Image, ground_truth: &Image) -> Result<Scores> {
    Ok(Scores {
        psnr: psnr(result, ground_truth)?,
        ssim: ssim(result, ground_truth)?,
        l1pct: l1_percent(result, ground_truth)?,
    })
}

/// `f64` that serializes non-finite values as the strings `"inf"`/`"-inf"`/`"nan"`.
mod lenient_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    #[serde(with = "lenient_f64")]
    pub psnr_before: f64,
    #[serde(with = "lenient_f64")]
    pub psnr_after: f64,
    pub ssim_before: f64,
    pub ssim_after: f64,
    pub l1pct_before: f64,
    pub l1pct_after: f64,
}

impl ReportRow {
    pub fn new(id: impl Into<String>, before: Scores, after: Scores) -> Self {
        Self {
            id: id.into(),
            psnr_before: before.psnr,
            psnr_after: after.psnr,
            ssim_before: before.ssim,
            ssim_after: after.ssim,
            l1pct_before: before.l1pct,
            l1pct_after: after.l1pct,
        }
    }

    pub fn psnr_gain(&self) -> f64 {
        self.psnr_after - self.psnr_before
    }

    pub fn ssim_gain(&self) -> f64 {
        self.ssim_after - self.ssim_before
    }
}

/// Mean and median of the finite entries of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub median: f64,
    /// Non-finite entries left out of the statistics.
    pub excluded: usize,
}

impl ColumnStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> ColumnStats {
        let mut finite = Vec::new();
        let mut excluded = 0;
        for v in values {
            if v.is_finite() {
                finite.push(v);
            } else {
                excluded += 1;
            }
        }
        if finite.is_empty() {
            return ColumnStats {
                mean: f64::NAN,
                median: f64::NAN,
                excluded,
            };
        }
        finite.sort_by(f64::total_cmp);
        let n = finite.len();
        let median = if n % 2 == 1 {
            finite[n / 2]
        } else {
            0.5 * (finite[n / 2 - 1] + finite[n / 2])
        };
        ColumnStats {
            mean: finite.iter().sum::<f64>() / n as f64,
            median,
            excluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_before: ColumnStats,
    pub psnr_after: ColumnStats,
    pub ssim_before: ColumnStats,
    pub ssim_after: ColumnStats,
    pub l1pct_before: ColumnStats,
    pub l1pct_after: ColumnStats,
    pub psnr_gain: ColumnStats,
    pub ssim_gain: ColumnStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Aggregates,
    pub fingerprint: String,
}

fn aggregate(rows: &[ReportRow]) -> Aggregates {
    let col = |f: fn(&ReportRow) -> f64| ColumnStats::of(rows.iter().map(f));
    Aggregates {
        psnr_before: col(|r| r.psnr_before),
        psnr_after: col(|r| r.psnr_after),
        ssim_before: col(|r| r.ssim_before),
        ssim_after: col(|r| r.ssim_after),
        l1pct_before: col(|r| r.l1pct_before),
        l1pct_after: col(|r| r.l1pct_after),
        psnr_gain: col(ReportRow::psnr_gain),
        ssim_gain: col(ReportRow::ssim_gain),
    }
}

pub fn build_report(rows: Vec<ReportRow>, fingerprint: impl Into<String>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Param("a report needs at least one row".into()));
    }
    Ok(MetricsReport {
        aggregates: aggregate(&rows),
        rows,
        fingerprint: fingerprint.into(),
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id, r.psnr_before, r.psnr_after, r.ssim_before, r.ssim_after, r.l1pct_before, r.l1pct_after
            ));
        }
        out
    }

    /// Parses rows written by [`to_csv`](Self::to_csv) and recomputes the aggregates.
    pub fn from_csv(text: &str, fingerprint: impl Into<String>) -> Result<MetricsReport> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        if headers.iter().ne(CSV_COLUMNS) {
            return Err(Error::Format(format!("unexpected report columns {headers:?}")));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("column {}: {e}", CSV_COLUMNS[i])))
            };
            rows.push(ReportRow {
                id: rec[0].to_string(),
                psnr_before: num(1)?,
                psnr_after: num(2)?,
                ssim_before: num(3)?,
                ssim_after: num(4)?,
                l1pct_before: num(5)?,
                l1pct_after: num(6)?,
            });
        }
        build_report(rows, fingerprint)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("report.json");
        std::fs::write(&json_path, self.to_json()).map_err(|e| Error::io(&json_path, e))
    }
}
