//! Test-time fine-tuning: the network's own first restoration becomes the
//! training target, re-masked with fresh holes every iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{apply_mask, compose_network_input, composite_output, ncc, Image, Mask, Transform};
use crate::losses::{disc_bce, gen_bce, rec_loss_with_grad, total_loss, LossWeights};
use crate::maskgen::{sample_mask_in_coverage, CoverageRange, FreeFormParams};
use crate::network::{
    forward, init_discriminator, optimizer_step, AdamConfig, AdamState, ConvNet, DiscConfig, DiscParams, GradientSet,
    NetworkParams,
};
use crate::rng::RandomState;

/// Where the per-iteration fine-tuning masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskSource {
    /// Free-form masks resampled for every replica.
    Random,
    /// One window of the restoration that best matches the hole's content.
    SelfSimilar { patch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub coverage: CoverageRange,
    pub free_form: FreeFormParams,
    pub max_mask_tries: usize,
    pub transforms: bool,
    pub adversarial: bool,
    pub loss_weights: LossWeights,
    pub disc: DiscConfig,
    pub disc_learning_rate: f64,
    pub mask_source: MaskSource,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 1e-4,
            batch_size: 4,
            coverage: CoverageRange::default(),
            free_form: FreeFormParams::default(),
            max_mask_tries: 1000,
            transforms: true,
            adversarial: false,
            loss_weights: LossWeights::default(),
            disc: DiscConfig::default(),
            disc_learning_rate: 1e-4,
            mask_source: MaskSource::Random,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate {} invalid", self.learning_rate)));
        }
        if !(self.disc_learning_rate >= 0.0 && self.disc_learning_rate.is_finite()) {
            return Err(Error::Param(format!("disc learning rate {} invalid", self.disc_learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Param("checkpoint_every must be at least 1".into()));
        }
        if self.max_mask_tries < 1 {
            return Err(Error::Param("max_mask_tries must be at least 1".into()));
        }
        self.coverage.validate()?;
        self.free_form.validate()?;
        self.loss_weights.validate()?;
        if self.adversarial {
            self.disc.validate()?;
        }
        Ok(())
    }
}

/// Losses of one completed iteration, plus optional snapshot metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    /// Number of completed iterations.
    pub iteration: usize,
    pub rec_loss: f64,
    pub adv_loss: f64,
    pub total: f64,
    pub target_checksum: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_COLUMNS: [&str; 6] = ["iteration", "rec_loss", "adv_loss", "total", "psnr", "ssim"];

impl AdaptTrace {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = TRACE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                r.rec_loss,
                r.adv_loss,
                r.total,
                opt(r.psnr),
                opt(r.ssim)
            ));
        }
        out
    }
}

/// `composite(f_θ0(Ĩ, M))`: the fixed fine-tuning target.
pub fn initial_restore(theta0: &NetworkParams, input: &Image, mask: &Mask) -> Result<Image> {
    if input.dims() != mask.dims() {
        return Err(Error::Shape("input and mask dims differ".into()));
    }
    for c in 0..input.channels() {
        if input.plane(c).iter().zip(mask.data()).any(|(&v, &m)| m && v != 0.0) {
            return Err(Error::Param("input is not zeroed inside the mask".into()));
        }
    }
    let out = forward(theta0, &compose_network_input(input, mask)?)?;
    composite_output(&out, input, mask)
}

/// One training replica: the re-masked target, the target itself, the
/// original hole and the fine-tuning hole.
#[derive(Clone, Debug, PartialEq)]
pub struct Replica {
    pub input: Image,
    pub target: Image,
    pub orig_mask: Mask,
    pub ft_mask: Mask,
}

impl Replica {
    pub fn transformed(&self, t: Transform) -> Replica {
        Replica {
            input: self.input.transformed(t),
            target: self.target.transformed(t),
            orig_mask: self.orig_mask.transformed(t),
            ft_mask: self.ft_mask.transformed(t),
        }
    }
}

pub fn sample_transform(rs: &mut RandomState) -> Transform {
    Transform::ALL[rs.range(0..Transform::ALL.len())]
}

/// Applies one uniformly drawn transform to every element of the replica.
pub fn random_transform(replica: Replica, rs: &mut RandomState) -> Replica {
    match sample_transform(rs) {
        Transform::Identity => replica,
        t => replica.transformed(t),
    }
}

/// Window of `restored` most similar (NCC) to the patch centred on the hole's
/// bounding box, among windows that do not touch the hole. Ties go to the
/// first window in scan order.
pub fn self_similar_mask(restored: &Image, mask: &Mask, patch: usize) -> Result<Mask> {
    let (h, w) = restored.dims();
    if mask.dims() != (h, w) {
        return Err(Error::Shape("image and mask dims differ".into()));
    }
    if patch < 1 || patch > h.min(w) / 2 {
        return Err(Error::Param(format!("patch {patch} must be in 1..={}", h.min(w) / 2)));
    }
    let (y0, x0, y1, x1) = mask
        .bounding_box()
        .ok_or_else(|| Error::DegenerateMask("mask selects no pixels".into()))?;
    let ty = ((y0 + y1) / 2).saturating_sub(patch / 2).min(h - patch);
    let tx = ((x0 + x1) / 2).saturating_sub(patch / 2).min(w - patch);
    let template = restored.window(ty, tx, patch);

    // summed-area table of the hole for O(1) overlap tests
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                mask.get(y, x) as usize + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let holes = |y: usize, x: usize| {
        let (a, b) = (y + patch, x + patch);
        sat[a * (w + 1) + b] + sat[y * (w + 1) + x] - sat[y * (w + 1) + b] - sat[a * (w + 1) + x]
    };

    let mut best: Option<(f64, usize, usize)> = None;
    for y in 0..=h - patch {
        for x in 0..=w - patch {
            if holes(y, x) > 0 {
                continue;
            }
            let score = ncc(&template, &restored.window(y, x, patch));
            if best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, y, x));
            }
        }
    }
    let (_, y, x) = best.ok_or_else(|| Error::SearchFailure(format!("no {patch}px window avoids the hole")))?;
    Mask::rect(h, w, y, x, patch, patch)
}

/// Averaged parameter gradient over a batch of replicas.
struct BatchGradients {
    rec: f64,
    adv: f64,
    theta: GradientSet,
    disc: Option<GradientSet>,
}

/// Running state of one fine-tuning run. The random stream does not depend
/// on the iteration count, so a longer run passes through every state of a
/// shorter one.
#[derive(Clone, Debug)]
pub struct AdaptSession {
    cfg: AdaptConfig,
    net: ConvNet,
    theta: NetworkParams,
    adam: AdamState,
    disc: Option<(DiscParams, AdamState)>,
    rs: RandomState,
    input: Image,
    mask: Mask,
    target: Image,
    target_checksum: u64,
    fixed_mask: Option<Mask>,
    iteration: usize,
}

impl AdaptSession {
    pub fn new(theta0: &NetworkParams, input: &Image, mask: &Mask, cfg: &AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        if mask.count() == mask.data().len() {
            return Err(Error::DegenerateMask("original mask covers the whole image".into()));
        }
        let target = initial_restore(theta0, input, mask)?;
        let rs = RandomState::new(cfg.seed);
        let disc = if cfg.adversarial {
            let config = DiscConfig { image_channels: input.channels(), ..cfg.disc.clone() };
            let d = init_discriminator(&mut rs.derive(1), &config)?;
            let state = AdamState::new(&d.params, AdamConfig::default());
            Some((d, state))
        } else {
            None
        };
        let fixed_mask = match cfg.mask_source {
            MaskSource::Random => None,
            MaskSource::SelfSimilar { patch } => Some(self_similar_mask(&target, mask, patch)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            net: theta0.net()?,
            theta: theta0.clone(),
            adam: AdamState::new(&theta0.params, AdamConfig::default()),
            disc,
            rs,
            input: input.clone(),
            mask: mask.clone(),
            target_checksum: target.checksum(),
            target,
            fixed_mask,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.theta
    }

    pub fn target(&self) -> &Image {
        &self.target
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// The fine-tuning mask used for every replica, when one is fixed.
    pub fn fixed_mask(&self) -> Option<&Mask> {
        self.fixed_mask.as_ref()
    }

    /// `composite(f_θ(Ĩ, M))` with the current parameters.
    pub fn restore(&self) -> Result<Image> {
        let out = forward(&self.theta, &compose_network_input(&self.input, &self.mask)?)?;
        composite_output(&out, &self.input, &self.mask)
    }

    /// Draws the next batch of replicas.
    pub fn sample_replicas(&mut self) -> Result<Vec<Replica>> {
        let (h, w) = self.target.dims();
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let ft_mask = match &self.fixed_mask {
                Some(m) => m.clone(),
                None => sample_mask_in_coverage(
                    &mut self.rs,
                    h,
                    w,
                    &self.cfg.free_form,
                    self.cfg.coverage,
                    self.cfg.max_mask_tries,
                )?,
            };
            let replica = Replica {
                input: apply_mask(&self.target, &ft_mask)?,
                target: self.target.clone(),
                orig_mask: self.mask.clone(),
                ft_mask,
            };
            out.push(if self.cfg.transforms {
                random_transform(replica, &mut self.rs)
            } else {
                replica
            });
        }
        Ok(out)
    }

    fn batch_gradients(&self, replicas: &[Replica]) -> Result<BatchGradients> {
        let scale = 1.0 / replicas.len() as f64;
        let wts = self.cfg.loss_weights;
        let mut acc = BatchGradients {
            rec: 0.0,
            adv: 0.0,
            theta: self.theta.params.zeros_like(),
            disc: self.disc.as_ref().map(|(d, _)| d.params.zeros_like()),
        };
        for r in replicas {
            let x = compose_network_input(&r.input, &r.ft_mask)?;
            let (out, tape) = self.net.forward_train(&self.theta.params, x.as_feature_map())?;
            if !out.is_finite() {
                return Err(Error::Numeric("inpainter output".into()));
            }
            let pred = Image::from_feature_map(out)?;
            let (rec, mut dpred) = rec_loss_with_grad(&r.target, &pred, &r.orig_mask)?;
            for g in dpred.data.iter_mut() {
                *g *= wts.w_rec;
            }
            acc.rec += scale * rec;
            if let (Some((d, _)), Some(dgrad)) = (&self.disc, acc.disc.as_mut()) {
                let dnet = d.net()?;
                let (sf, tf) = dnet.forward_train(&d.params, &pred.to_feature_map())?;
                let (adv, dscore) = gen_bce(&sf)?;
                acc.adv += scale * adv;
                let mut scratch = d.params.zeros_like();
                let dimg = dnet
                    .backward(&d.params, &tf, &dscore, &mut scratch, true)?
                    .expect("input gradient requested");
                for (g, a) in dpred.data.iter_mut().zip(&dimg.data) {
                    *g += wts.w_adv * a;
                }
                // discriminator step treats the current prediction as fake
                let (sr, tr) = dnet.forward_train(&d.params, &r.target.to_feature_map())?;
                let (_, dr, df) = disc_bce(&sr, &sf)?;
                let mut dg = d.params.zeros_like();
                dnet.backward(&d.params, &tr, &dr, &mut dg, false)?;
                dnet.backward(&d.params, &tf, &df, &mut dg, false)?;
                dgrad.add_scaled(&dg, scale);
            }
            let mut g = self.theta.params.zeros_like();
            self.net.backward(&self.theta.params, &tape, &dpred, &mut g, false)?;
            acc.theta.add_scaled(&g, scale);
        }
        if let Some(name) = acc.theta.first_non_finite() {
            return Err(Error::Numeric(format!("gradient of {name}")));
        }
        if !acc.rec.is_finite() || !acc.adv.is_finite() {
            return Err(Error::Numeric(format!("loss rec {} adv {}", acc.rec, acc.adv)));
        }
        Ok(acc)
    }

    /// Runs one iteration on an already sampled batch.
    pub fn step_with(&mut self, replicas: &[Replica]) -> Result<TraceRecord> {
        if replicas.is_empty() {
            return Err(Error::Param("empty replica batch".into()));
        }
        let g = self.batch_gradients(replicas)?;
        if let (Some((d, state)), Some(dg)) = (self.disc.as_mut(), g.disc.as_ref()) {
            optimizer_step(&mut d.params, dg, self.cfg.disc_learning_rate, state)?;
        }
        optimizer_step(&mut self.theta.params, &g.theta, self.cfg.learning_rate, &mut self.adam)?;
        self.iteration += 1;
        let adv = if self.disc.is_some() { g.adv } else { 0.0 };
        Ok(TraceRecord {
            iteration: self.iteration,
            rec_loss: g.rec,
            adv_loss: adv,
            total: total_loss(g.rec, adv, &self.cfg.loss_weights),
            target_checksum: self.target_checksum,
            psnr: None,
            ssim: None,
        })
    }

    pub fn step(&mut self) -> Result<TraceRecord> {
        let replicas = self.sample_replicas()?;
        self.step_with(&replicas)
    }

    /// Checksum of the fine-tuning target when the session was created.
    pub fn target_checksum(&self) -> u64 {
        self.target_checksum
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub params: NetworkParams,
    pub baseline: Image,
    pub image: Image,
    pub trace: AdaptTrace,
}

#[derive(Debug)]
pub struct AdaptFailure {
    pub error: Error,
    pub trace: AdaptTrace,
}

impl From<Error> for AdaptFailure {
    fn from(error: Error) -> Self {
        Self { error, trace: AdaptTrace::default() }
    }
}

/// Fine-tunes `theta0` on the masked input for `cfg.iterations` steps.
///
/// `on_checkpoint` is called every `checkpoint_every` iterations and after the
/// last one; it may fill the record's snapshot metrics.
pub fn fine_tune_with(
    theta0: &NetworkParams,
    input: &Image,
    mask: &Mask,
    cfg: &AdaptConfig,
    mut on_checkpoint: impl FnMut(&AdaptSession, &mut TraceRecord) -> Result<()>,
) -> std::result::Result<AdaptOutcome, AdaptFailure> {
    let mut session = AdaptSession::new(theta0, input, mask, cfg)?;
    let baseline = session.target().clone();
    let mut trace = AdaptTrace::default();
    for i in 0..cfg.iterations {
        let mut rec = match session.step() {
            Ok(r) => r,
            Err(error) => return Err(AdaptFailure { error, trace }),
        };
        if (i + 1) % cfg.checkpoint_every == 0 || i + 1 == cfg.iterations {
            if let Err(error) = on_checkpoint(&session, &mut rec) {
                return Err(AdaptFailure { error, trace });
            }
            trace.records.push(rec);
        }
    }
    let image = match session.restore() {
        Ok(img) => img,
        Err(error) => return Err(AdaptFailure { error, trace }),
    };
    Ok(AdaptOutcome { params: session.theta, baseline, image, trace })
}

pub fn fine_tune(
    theta0: &NetworkParams,
    input: &Image,
    mask: &Mask,
    cfg: &AdaptConfig,
) -> std::result::Result<AdaptOutcome, AdaptFailure> {
    fine_tune_with(theta0, input, mask, cfg, |_, _| Ok(()))
}
