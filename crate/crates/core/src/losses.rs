//! Fine-tuning objectives: the reconstruction loss that ignores the original
//! hole, the adversarial terms that treat the initial restoration as the real
//! sample, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::network::{DiscParams, GradientSet};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_rec: 1.0, w_adv: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_rec > 0.0 && self.w_rec.is_finite()) {
            return Err(Error::Param(format!("w_rec must be positive, got {}", self.w_rec)));
        }
        if !(self.w_adv >= 0.0 && self.w_adv.is_finite()) {
            return Err(Error::Param(format!("w_adv must be non-negative, got {}", self.w_adv)));
        }
        Ok(())
    }
}

fn check_triplet(target: &Image, pred: &Image, mask: &Mask) -> Result<usize> {
    if target.dims() != pred.dims() || target.channels() != pred.channels() || target.dims() != mask.dims() {
        return Err(Error::Shape("reconstruction loss inputs differ in shape".into()));
    }
    let valid = mask.data().iter().filter(|&&m| !m).count();
    if valid == 0 {
        return Err(Error::DegenerateMask("original mask covers every pixel".into()));
    }
    Ok(valid * target.channels())
}

/// Mean squared difference over the pixels outside `orig_mask`. Pixels inside
/// the mask are never read.
pub fn rec_loss(target: &Image, pred: &Image, orig_mask: &Mask) -> Result<f64> {
    Ok(rec_loss_with_grad(target, pred, orig_mask)?.0)
}

/// [`rec_loss`] and its gradient with respect to `pred`.
pub fn rec_loss_with_grad(target: &Image, pred: &Image, orig_mask: &Mask) -> Result<(f64, FeatureMap)> {
    let count = check_triplet(target, pred, orig_mask)? as f64;
    let n = orig_mask.data().len();
    let mut grad = FeatureMap::zeros(pred.channels(), pred.height(), pred.width());
    let mut sum = 0.0;
    for c in 0..pred.channels() {
        let (t, p) = (target.plane(c), pred.plane(c));
        let g = &mut grad.data[c * n..(c + 1) * n];
        for (i, &m) in orig_mask.data().iter().enumerate() {
            if m {
                continue;
            }
            let d = p[i] - t[i];
            sum += d * d;
            g[i] = 2.0 * d / count;
        }
    }
    let value = sum / count;
    if !value.is_finite() {
        return Err(Error::Numeric("rec_loss".into()));
    }
    Ok((value, grad))
}

/// `softplus(x) = ln(1 + eˣ)`, computed without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_scores(scores: &FeatureMap, what: &str) -> Result<()> {
    if scores.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} discriminator scores")))
    }
}

/// Discriminator BCE on raw score maps:
/// `−mean log σ(real) − mean log(1 − σ(fake))`, with gradients w.r.t. both maps.
pub fn disc_bce(real: &FeatureMap, fake: &FeatureMap) -> Result<(f64, FeatureMap, FeatureMap)> {
    check_scores(real, "real")?;
    check_scores(fake, "fake")?;
    let (nr, nf) = (real.data.len() as f64, fake.data.len() as f64);
    let mut d_real = real.clone();
    let mut d_fake = fake.clone();
    let mut loss = 0.0;
    for (g, &s) in d_real.data.iter_mut().zip(&real.data) {
        loss += softplus(-s) / nr;
        *g = (sigmoid(s) - 1.0) / nr;
    }
    for (g, &s) in d_fake.data.iter_mut().zip(&fake.data) {
        loss += softplus(s) / nf;
        *g = sigmoid(s) / nf;
    }
    Ok((loss, d_real, d_fake))
}

/// Non-saturating generator BCE `−mean log σ(fake)` and its score gradient.
pub fn gen_bce(fake: &FeatureMap) -> Result<(f64, FeatureMap)> {
    check_scores(fake, "fake")?;
    let n = fake.data.len() as f64;
    let mut grad = fake.clone();
    let mut loss = 0.0;
    for (g, &s) in grad.data.iter_mut().zip(&fake.data) {
        loss += softplus(-s) / n;
        *g = (sigmoid(s) - 1.0) / n;
    }
    Ok((loss, grad))
}

/// Discriminator loss with the initial restoration `real` as the real sample
/// and the current prediction `fake` (no generator gradient) as the fake one.
pub fn adv_loss_d(d: &DiscParams, real: &Image, fake: &Image) -> Result<f64> {
    Ok(adv_loss_d_with_grads(d, real, fake)?.0)
}

/// [`adv_loss_d`] and its gradient w.r.t. the discriminator parameters.
pub fn adv_loss_d_with_grads(d: &DiscParams, real: &Image, fake: &Image) -> Result<(f64, GradientSet)> {
    let net = d.net()?;
    let (sr, tr) = net.forward_train(&d.params, &real.to_feature_map())?;
    let (sf, tf) = net.forward_train(&d.params, &fake.to_feature_map())?;
    let (loss, dr, df) = disc_bce(&sr, &sf)?;
    let mut grads = d.params.zeros_like();
    net.backward(&d.params, &tr, &dr, &mut grads, false)?;
    net.backward(&d.params, &tf, &df, &mut grads, false)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("adv_loss_d gradient of {name}")));
    }
    Ok((loss, grads))
}

pub fn adv_loss_g(d: &DiscParams, fake: &Image) -> Result<f64> {
    Ok(adv_loss_g_with_grad(d, fake)?.0)
}

/// [`adv_loss_g`] and its gradient w.r.t. the generated image.
pub fn adv_loss_g_with_grad(d: &DiscParams, fake: &Image) -> Result<(f64, FeatureMap)> {
    let net = d.net()?;
    let (sf, tf) = net.forward_train(&d.params, &fake.to_feature_map())?;
    let (loss, dscore) = gen_bce(&sf)?;
    // discriminator gradients are discarded here; only the image gradient is used
    let mut scratch = d.params.zeros_like();
    let dimg = net
        .backward(&d.params, &tf, &dscore, &mut scratch, true)?
        .expect("input gradient requested");
    if !dimg.is_finite() {
        return Err(Error::Numeric("adv_loss_g image gradient".into()));
    }
    Ok((loss, dimg))
}

/// `w_rec · rec + w_adv · adv`.
pub fn total_loss(rec: f64, adv_g: f64, w: &LossWeights) -> f64 {
    w.w_rec * rec + w.w_adv * adv_g
}
