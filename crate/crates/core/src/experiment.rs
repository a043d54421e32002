//! The five pipeline stages behind the command line, plus the in-memory
//! building blocks they share with the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{fine_tune_with, AdaptConfig, AdaptSession, AdaptTrace};
use crate::config::ExperimentConfig;
use crate::corpus::{assert_disjoint, copy_zero_psnr, pretrain, pretrain_log_csv, PretrainLogRow, Sample, Split};
use crate::error::{Error, Result};
use crate::image::{apply_mask, Image, Mask};
use crate::io::{load_image, load_mask, save_image, save_mask};
use crate::metrics::{build_report, score, ssim, psnr, ColumnStats, MetricsReport, ReportRow, Scores};
use crate::network::{checkpoint, NetworkParams};

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}_{index:04}", split.name())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.json"), cfg.to_json())
}

/// One fine-tuned test image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRun {
    pub id: String,
    pub before: Scores,
    pub after: Scores,
    pub baseline: Image,
    pub adapted: Image,
    pub trace: AdaptTrace,
    pub params: NetworkParams,
}

impl ImageRun {
    pub fn row(&self) -> ReportRow {
        ReportRow::new(self.id.clone(), self.before, self.after)
    }
}

/// Fine-tunes on one sample. Ground truth is only read to score snapshots and
/// the finished result.
pub fn adapt_sample(theta0: &NetworkParams, sample: &Sample, cfg: &AdaptConfig) -> Result<ImageRun> {
    let input = apply_mask(&sample.image, &sample.mask)?;
    let gt = &sample.image;
    let out = fine_tune_with(theta0, &input, &sample.mask, cfg, |s, r| {
        let img = s.restore()?;
        r.psnr = Some(psnr(&img, gt)?);
        r.ssim = Some(ssim(&img, gt)?);
        Ok(())
    })
    .map_err(|f| f.error)?;
    Ok(ImageRun {
        id: sample_id(sample.split, sample.index),
        before: score(&out.baseline, gt)?,
        after: score(&out.image, gt)?,
        baseline: out.baseline,
        adapted: out.image,
        trace: out.trace,
        params: out.params,
    })
}

/// [`adapt_sample`] over a set, in parallel across images. Each image draws
/// its own seed from `seed_of(sample)`.
pub fn adapt_samples(
    theta0: &NetworkParams,
    samples: &[Sample],
    cfg: &AdaptConfig,
    seed_of: impl Fn(&Sample) -> u64 + Sync,
) -> Result<Vec<ImageRun>> {
    samples
        .par_iter()
        .map(|s| adapt_sample(theta0, s, &AdaptConfig { seed: seed_of(s), ..cfg.clone() }))
        .collect()
}

/// Scores of one image at every requested iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepImage {
    pub id: String,
    pub iterations: Vec<usize>,
    pub scores: Vec<Scores>,
    /// Checksums of the restorations at each iteration count.
    pub checksums: Vec<u64>,
    pub target: Image,
    /// Parameters at the `keep` iteration count, when requested.
    pub kept: Option<NetworkParams>,
    pub kept_image: Option<Image>,
}

/// Runs one session to the largest count, snapshotting along the way.
pub fn sweep_sample(
    theta0: &NetworkParams,
    sample: &Sample,
    cfg: &AdaptConfig,
    iterations: &[usize],
    keep: Option<usize>,
) -> Result<SweepImage> {
    if iterations.windows(2).any(|w| w[0] >= w[1]) || iterations.is_empty() {
        return Err(Error::Param(format!("sweep iterations {iterations:?} are not strictly increasing")));
    }
    let input = apply_mask(&sample.image, &sample.mask)?;
    let mut session = AdaptSession::new(theta0, &input, &sample.mask, cfg)?;
    let mut out = SweepImage {
        id: sample_id(sample.split, sample.index),
        iterations: iterations.to_vec(),
        scores: vec![],
        checksums: vec![],
        target: session.target().clone(),
        kept: None,
        kept_image: None,
    };
    for &t in iterations {
        while session.iteration() < t {
            session.step()?;
        }
        let img = session.restore()?;
        out.scores.push(score(&img, &sample.image)?);
        out.checksums.push(img.checksum());
        if keep == Some(t) {
            out.kept = Some(session.params().clone());
            out.kept_image = Some(img);
        }
    }
    Ok(out)
}

/// One row of the sweep curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iterations: usize,
    pub psnr: ColumnStats,
    pub ssim: ColumnStats,
    pub l1pct: ColumnStats,
}

pub const CURVE_COLUMNS: [&str; 7] =
    ["iterations", "psnr_mean", "psnr_median", "ssim_mean", "ssim_median", "l1pct_mean", "l1pct_median"];

pub fn curve(images: &[SweepImage]) -> Result<Vec<CurveRow>> {
    let first = images.first().ok_or_else(|| Error::Param("sweep over an empty set".into()))?;
    Ok(first
        .iterations
        .iter()
        .enumerate()
        .map(|(k, &t)| CurveRow {
            iterations: t,
            psnr: ColumnStats::of(images.iter().map(|i| i.scores[k].psnr)),
            ssim: ColumnStats::of(images.iter().map(|i| i.scores[k].ssim)),
            l1pct: ColumnStats::of(images.iter().map(|i| i.scores[k].l1pct)),
        })
        .collect())
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = CURVE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iterations, r.psnr.mean, r.psnr.median, r.ssim.mean, r.ssim.median, r.l1pct.mean, r.l1pct.median
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub spec: String,
    pub path: String,
    pub mask_path: String,
}

pub const MANIFEST: &str = "manifest.csv";

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Loads the samples of `split` listed in the corpus manifest.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(Sample {
                split,
                index: r.index,
                seed: r.seed,
                description: r.spec,
                image: load_image(dir.join(&r.path))?,
                mask: load_mask(dir.join(&r.mask_path))?,
            })
        })
        .collect()
}

/// Writes every split as PNGs plus a manifest.
pub fn cmd_datagen(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.corpus.validate()?;
    let dir = cfg.corpus_dir();
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for split in Split::ALL {
        let samples: Vec<Sample> = (0..cfg.corpus.size_of(split))
            .into_par_iter()
            .map(|i| cfg.corpus.sample(cfg.seed, split, i))
            .collect::<Result<_>>()?;
        seeds.push((split, samples.iter().map(|s| s.seed).collect()));
        for s in &samples {
            let path = format!("{}/{:04}.png", split.name(), s.index);
            let mask_path = format!("{}/{:04}_mask.png", split.name(), s.index);
            let full = dir.join(&path);
            fs::create_dir_all(full.parent().expect("has parent")).map_err(|e| Error::io(&dir, e))?;
            save_image(&s.image, &full)?;
            save_mask(&s.mask, dir.join(&mask_path))?;
            rows.push(ManifestRow {
                split,
                index: s.index,
                seed: s.seed,
                spec: s.description.clone(),
                path,
                mask_path,
            });
        }
    }
    assert_disjoint(&seeds)?;
    let mut w = csv::Writer::from_writer(vec![]);
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join(MANIFEST), bytes)?;
    write_resolved(cfg, &dir)?;
    Ok(dir)
}

/// Pre-trains θ0 on the training split; returns the training log.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainLogRow>> {
    let dir = cfg.corpus_dir();
    let train: Vec<Image> = load_split(&dir, Split::Train)?.into_iter().map(|s| s.image).collect();
    let heldout = load_split(&dir, Split::Validation)?;
    let (theta, log) = pretrain(&cfg.arch, &cfg.pretrain, &train, &heldout).map_err(|f| f.error)?;
    let out = cfg.output_dir.join("pretrain");
    checkpoint::save(&theta, cfg.pretrain.seed, cfg.checkpoint_path())?;
    let mut csv = pretrain_log_csv(&log);
    if !heldout.is_empty() {
        csv.push_str(&format!("# copy_zero_psnr,{}\n", copy_zero_psnr(&heldout)?));
    }
    write_file(&out.join("log.csv"), csv)?;
    write_resolved(cfg, &out)?;
    Ok(log)
}

fn load_theta(cfg: &ExperimentConfig) -> Result<NetworkParams> {
    let (theta, _) = checkpoint::load(cfg.checkpoint_path())?;
    if theta.arch != cfg.arch {
        return Err(Error::Param("checkpoint architecture differs from the config".into()));
    }
    Ok(theta)
}

/// Fine-tunes every configured test split; writes images, traces and reports.
pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<Vec<(Split, MetricsReport)>> {
    let theta = load_theta(cfg)?;
    let out = cfg.output_dir.join("adapt");
    let mut reports = Vec::new();
    for &split in &cfg.adapt_splits {
        let samples = load_split(&cfg.corpus_dir(), split)?;
        let runs = adapt_samples(&theta, &samples, &cfg.adapt, |s| cfg.image_seed(s.seed))?;
        let dir = out.join(split.name());
        for (run, s) in runs.iter().zip(&samples) {
            save_image(&run.baseline, ensure(&dir)?.join(format!("{}_baseline.png", run.id)))?;
            save_image(&run.adapted, dir.join(format!("{}_adapted.png", run.id)))?;
            save_mask(&s.mask, dir.join(format!("{}_mask.png", run.id)))?;
            write_file(&dir.join(format!("{}_trace.csv", run.id)), run.trace.to_csv())?;
        }
        let report = build_report(runs.iter().map(ImageRun::row).collect(), cfg.fingerprint())?;
        report.write(&dir)?;
        reports.push((split, report));
    }
    write_resolved(cfg, &out)?;
    Ok(reports)
}

fn ensure(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

/// Re-scores the saved restorations of `cmd_adapt` against the corpus.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<(Split, MetricsReport)>> {
    let adapted = cfg.output_dir.join("adapt");
    let out = cfg.output_dir.join("eval");
    let mut reports = Vec::new();
    for &split in &cfg.adapt_splits {
        let samples = load_split(&cfg.corpus_dir(), split)?;
        let dir = adapted.join(split.name());
        let rows = samples
            .iter()
            .map(|s| {
                let id = sample_id(split, s.index);
                let before = load_image(dir.join(format!("{id}_baseline.png")))?;
                let after = load_image(dir.join(format!("{id}_adapted.png")))?;
                let mask: Mask = load_mask(dir.join(format!("{id}_mask.png")))?;
                if mask != s.mask {
                    return Err(Error::Format(format!("{id}: saved mask differs from the corpus")));
                }
                Ok(ReportRow::new(id, score(&before, &s.image)?, score(&after, &s.image)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = build_report(rows, cfg.fingerprint())?;
        report.write(out.join(split.name()))?;
        reports.push((split, report));
    }
    write_resolved(cfg, &out)?;
    Ok(reports)
}

/// Aggregate metrics at each configured iteration count, all from the same θ0
/// and per-image seeds.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<CurveRow>> {
    cfg.sweep.validate()?;
    let theta = load_theta(cfg)?;
    let samples = load_split(&cfg.corpus_dir(), cfg.sweep.split)?;
    let images: Vec<SweepImage> = samples
        .par_iter()
        .map(|s| {
            let c = AdaptConfig { seed: cfg.image_seed(s.seed), ..cfg.adapt.clone() };
            sweep_sample(&theta, s, &c, &cfg.sweep.iterations, None)
        })
        .collect::<Result<_>>()?;
    let rows = curve(&images)?;
    let out = cfg.output_dir.join("sweep");
    write_file(&out.join("curve.csv"), curve_csv(&rows))?;
    write_resolved(cfg, &out)?;
    Ok(rows)
}
