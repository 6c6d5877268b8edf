//! Training objectives: class-weighted binary cross-entropy, the
//! deep-supervision aggregate with weight decay, the uncertainty-masked
//! pseudo-label loss and the Gaussian KL divergence.

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hcnet::NetworkOutput;
use crate::nn::Tensor;
use crate::uncertainty::LatentGaussian;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-channel weights for (vessel, subtype 1, subtype 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(pub [f64; 3]);

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights([3.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0])
    }
}

impl ClassWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config(format!("class weights must be positive, got {:?}", self.0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub class_weights: ClassWeights,
    /// Weight-decay coefficient; the penalty is `lambda / 2 * ||theta||^2`.
    pub lambda_wd: f64,
    /// Weight of each of the three deep-supervision terms.
    pub ds_weight: f64,
    /// Pixels with normalized uncertainty `u >= threshold` are ignored.
    pub threshold: f64,
    pub beta_kl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: ClassWeights::default(),
            lambda_wd: 5e-4,
            ds_weight: 1.0 / 3.0,
            threshold: 0.7,
            beta_kl: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.class_weights.validate()?;
        if !(self.lambda_wd >= 0.0) {
            return Err(Error::Config(format!("lambda_wd must be >= 0, got {}", self.lambda_wd)));
        }
        if !(self.ds_weight >= 0.0) {
            return Err(Error::Config(format!("ds_weight must be >= 0, got {}", self.ds_weight)));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1], got {}", self.threshold)));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(Error::Config(format!("beta_kl must be >= 0, got {}", self.beta_kl)));
        }
        Ok(())
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.dim().1 != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", pred.dim().1)));
    }
    Ok(())
}

fn check_binary(target: &Tensor) -> Result<()> {
    match target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(Error::Domain(format!("target value {t} is not binary"))),
        None => Ok(()),
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn bce_term(p: f64, t: f64) -> f64 {
    let p = clamp_prob(p);
    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
}

/// d bce / d p, zero where the clamp is active.
#[inline]
fn bce_grad(p: f64, t: f64) -> f64 {
    if p < PROB_EPS || p > 1.0 - PROB_EPS {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// `(N, H, W)` map of `sum_c mu_c * bce(p_c, t_c)`.
pub fn per_pixel_bce(pred: &Tensor, target: &Tensor, mu: &ClassWeights) -> Result<Array3<f64>> {
    check_pair(pred, target)?;
    let (n, _, h, w) = pred.dim();
    let mut out = Array3::zeros((n, h, w));
    for (c, &m) in mu.0.iter().enumerate() {
        Zip::from(&mut out)
            .and(pred.index_axis(Axis(1), c))
            .and(target.index_axis(Axis(1), c))
            .for_each(|o, &p, &t| *o += m * bce_term(p, t));
    }
    Ok(out)
}

/// Mean over pixels of the class-weighted two-sided binary cross-entropy.
pub fn weighted_bce(pred: &Tensor, target: &Tensor, mu: &ClassWeights) -> Result<f64> {
    check_binary(target)?;
    let map = per_pixel_bce(pred, target, mu)?;
    Ok(map.mean().unwrap_or(0.0))
}

/// [`weighted_bce`] and its gradient with respect to `pred`.
pub fn weighted_bce_grad(pred: &Tensor, target: &Tensor, mu: &ClassWeights) -> Result<(f64, Tensor)> {
    let value = weighted_bce(pred, target, mu)?;
    let (n, _, h, w) = pred.dim();
    let scale = 1.0 / (n * h * w) as f64;
    let mut grad = Tensor::zeros(pred.dim());
    for (c, &m) in mu.0.iter().enumerate() {
        Zip::from(grad.index_axis_mut(Axis(1), c))
            .and(pred.index_axis(Axis(1), c))
            .and(target.index_axis(Axis(1), c))
            .for_each(|g, &p, &t| *g = m * scale * bce_grad(p, t));
    }
    Ok((value, grad))
}

/// `main + ds_weight * sum(deep) + lambda / 2 * sq_norm`; `deep` must have three entries.
pub fn combine_deep_supervision(main: f64, deep: &[f64], ds_weight: f64, lambda: f64, sq_norm: f64) -> Result<f64> {
    if deep.len() != 3 {
        return Err(Error::Contract(format!(
            "deep supervision needs exactly 3 branches, got {}",
            deep.len()
        )));
    }
    Ok(main + ds_weight * deep.iter().sum::<f64>() + 0.5 * lambda * sq_norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepSupervisedLoss {
    pub total: f64,
    pub main: f64,
    pub deep: [f64; 3],
    pub decay: f64,
}

impl DeepSupervisedLoss {
    /// Weighted sum of the auxiliary terms.
    pub fn deep_weighted(&self, cfg: &LossConfig) -> f64 {
        cfg.ds_weight * self.deep.iter().sum::<f64>()
    }
}

/// Main-output BCE plus deep-supervision BCEs plus weight decay.
/// `sq_norm` is `||theta||^2` over all trainable parameters.
pub fn deep_supervised_loss(out: &NetworkOutput, target: &Tensor, sq_norm: f64, cfg: &LossConfig) -> Result<DeepSupervisedLoss> {
    let mu = &cfg.class_weights;
    let main = weighted_bce(&out.main_stack(), target, mu)?;
    let mut deep = [0.0; 3];
    for (d, p) in deep.iter_mut().zip(&out.deep) {
        *d = weighted_bce(p, target, mu)?;
    }
    let total = combine_deep_supervision(main, &deep, cfg.ds_weight, cfg.lambda_wd, sq_norm)?;
    Ok(DeepSupervisedLoss {
        total,
        main,
        deep,
        decay: 0.5 * cfg.lambda_wd * sq_norm,
    })
}

/// Result of the uncertainty-masked pseudo-label loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredLoss {
    pub value: f64,
    /// Fraction of pixels admitted by the mask.
    pub mask_fraction: f64,
    /// Set when no pixel passed the threshold; `value` is then 0.
    pub fully_uncertain: bool,
}

fn check_uncertainty(pred: &Tensor, u: &Tensor) -> Result<()> {
    let (n, _, h, w) = pred.dim();
    if u.dim() != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "uncertainty map {:?} does not match prediction {:?}",
            u.shape(),
            pred.shape()
        )));
    }
    if let Some(bad) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("uncertainty {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Mean class-weighted BCE against soft pseudo-labels over pixels with `u < threshold`.
pub fn uncertainty_filtered_loss(
    pred: &Tensor,
    pseudo: &Tensor,
    u: &Tensor,
    threshold: f64,
    mu: &ClassWeights,
) -> Result<FilteredLoss> {
    Ok(uncertainty_filtered_loss_grad(pred, pseudo, u, threshold, mu)?.0)
}

/// [`uncertainty_filtered_loss`] with its gradient with respect to `pred`.
pub fn uncertainty_filtered_loss_grad(
    pred: &Tensor,
    pseudo: &Tensor,
    u: &Tensor,
    threshold: f64,
    mu: &ClassWeights,
) -> Result<(FilteredLoss, Tensor)> {
    check_pair(pred, pseudo)?;
    check_uncertainty(pred, u)?;
    if let Some(bad) = pseudo.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("pseudo-label {bad} outside [0, 1]")));
    }
    let per_pixel = per_pixel_bce(pred, pseudo, mu)?;
    let mask = u.index_axis(Axis(1), 0).mapv(|v| v < threshold);
    let admitted = mask.iter().filter(|&&m| m).count();
    let mut grad = Tensor::zeros(pred.dim());
    if admitted == 0 {
        return Ok((
            FilteredLoss {
                value: 0.0,
                mask_fraction: 0.0,
                fully_uncertain: true,
            },
            grad,
        ));
    }
    let mut sum = 0.0;
    Zip::from(&per_pixel).and(&mask).for_each(|&l, &m| {
        if m {
            sum += l;
        }
    });
    let inv = 1.0 / admitted as f64;
    for (c, &m) in mu.0.iter().enumerate() {
        Zip::from(grad.index_axis_mut(Axis(1), c))
            .and(pred.index_axis(Axis(1), c))
            .and(pseudo.index_axis(Axis(1), c))
            .and(&mask)
            .for_each(|g, &p, &t, &keep| {
                if keep {
                    *g = m * inv * bce_grad(p, t);
                }
            });
    }
    Ok((
        FilteredLoss {
            value: sum * inv,
            mask_fraction: admitted as f64 / mask.len() as f64,
            fully_uncertain: false,
        },
        grad,
    ))
}

/// `KL(q || p)` between axis-aligned Gaussians.
pub fn kl_gaussians(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!("latent dims differ: {} vs {}", q.dim(), p.dim())));
    }
    for g in [q, p] {
        if let Some(v) = g.var.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("variance {v} is not positive")));
        }
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, vq, mp, vp) = (q.mu[i], q.var[i], p.mu[i], p.var[i]);
        kl += 0.5 * (vq / vp + (mp - mq) * (mp - mq) / vp - 1.0 + (vp / vq).ln());
    }
    Ok(kl)
}

/// KL in log-variance parameterization and its partial derivatives,
/// one latent dimension at a time. Returns `(kl, d_mu_q, d_lv_q, d_mu_p, d_lv_p)`.
#[inline]
pub(crate) fn kl_logvar_terms(mu_q: f64, lv_q: f64, mu_p: f64, lv_p: f64) -> (f64, f64, f64, f64, f64) {
    let ratio = (lv_q - lv_p).exp();
    let inv_vp = (-lv_p).exp();
    let diff = mu_p - mu_q;
    let kl = 0.5 * (ratio + diff * diff * inv_vp - 1.0 + lv_p - lv_q);
    let d_mu_q = -diff * inv_vp;
    let d_mu_p = diff * inv_vp;
    let d_lv_q = 0.5 * (ratio - 1.0);
    let d_lv_p = 0.5 * (1.0 - ratio - diff * diff * inv_vp);
    (kl, d_mu_q, d_lv_q, d_mu_p, d_lv_p)
}
