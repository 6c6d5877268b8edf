//! Training and inference workflow: supervised pretraining, Monte-Carlo
//! self-labeling of unlabeled images, uncertainty-filtered retraining and
//! whole-image prediction.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{self, AvReport};
use crate::model::{LossParts, Objective, VesselModel};
use crate::nn::{Gradients, Mode, ParamGroup, Tensor};
use crate::preprocess::{self, PreprocessConfig};
use crate::synth::Record;
use crate::tiler::{self, Crop, LogitCanvas, PatchSpec};
use crate::uncertainty::{self, PseudoLabelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub momentum: f64,
    pub lr0: f64,
    pub lr_halving_period: u64,
    pub batch_size: usize,
    pub t_pre: u64,
    pub t_re: u64,
    pub seed: u64,
    /// Alternate pseudo-labeled and labeled batches during retraining.
    pub mix_labeled: bool,
    /// Windows per forward pass during whole-image inference.
    pub inference_batch: usize,
    /// Emit a progress line every this many steps (0 disables).
    pub log_every: u64,
    /// Rescale the gradient of the trained groups to at most this L2 norm (0 disables).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            lr0: 0.05,
            lr_halving_period: 5000,
            batch_size: 16,
            t_pre: 5000,
            t_re: 2000,
            seed: 0,
            mix_labeled: true,
            inference_batch: 16,
            log_every: 100,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::Config(format!("grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        if self.batch_size == 0 || self.lr_halving_period == 0 || self.inference_batch == 0 {
            return Err(Error::Config("batch sizes and the halving period must be at least 1".into()));
        }
        Ok(())
    }

    /// Step-decay schedule `lr0 * 2^-floor(step / period)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let halvings = step / self.lr_halving_period;
        self.lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

/// SGD with classical momentum: `v = m v + g; theta -= lr v`, with optional
/// global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    clip: f64,
    velocity: Vec<Array1<f64>>,
}

impl Sgd {
    pub fn new(model: &VesselModel, momentum: f64, clip: f64) -> Self {
        Self {
            momentum,
            clip,
            velocity: model.store().params().iter().map(|p| Array1::zeros(p.value.len())).collect(),
        }
    }

    /// Updates the parameters of `groups`; other groups stay frozen.
    pub fn step(&mut self, model: &mut VesselModel, grads: &Gradients, lr: f64, groups: &[ParamGroup]) {
        let m = self.momentum;
        let mut scale = 1.0;
        if self.clip > 0.0 {
            let sq: f64 = model
                .store()
                .params()
                .iter()
                .enumerate()
                .filter(|(_, p)| groups.contains(&p.group))
                .map(|(i, _)| grads.by_index(i).iter().map(|g| g * g).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > self.clip {
                scale = self.clip / norm;
            }
        }
        for (i, p) in model.store_mut().params_mut().iter_mut().enumerate() {
            if !groups.contains(&p.group) {
                continue;
            }
            let g = grads.by_index(i);
            let v = &mut self.velocity[i];
            ndarray::Zip::from(&mut p.value).and(v).and(g).for_each(|w, v, &g| {
                *v = m * *v + scale * g;
                *w -= lr * *v;
            });
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub parts: LossParts,
    /// Set when the batch was skipped because every pixel was filtered out.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
    /// Number of all-filtered batches that were skipped.
    pub skipped_batches: u64,
}

impl LossLog {
    pub const HEADER: &'static str = "step,lr,loss_main,loss_ds,loss_kl,loss_decay,loss_pseudo,mask_fraction,total,skipped";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let p = &r.parts;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.lr,
                p.main,
                p.deep,
                p.kl,
                p.decay,
                p.pseudo,
                p.mask_fraction,
                p.total(),
                r.skipped as u8
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Moving averages of the total loss over `window` consecutive steps.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.records.iter().map(|r| r.parts.total()).collect();
        totals.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

/// A preprocessed image ready for patch sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub id: String,
    /// `(C, H, W)` network input planes.
    pub stack: Array3<f64>,
    pub targets: Option<Array3<f64>>,
    pub fov: Option<Array2<bool>>,
}

/// Runs preprocessing on every record and checks the channel count.
pub fn prepare(records: &[Record], cfg: &PreprocessConfig, in_channels: usize) -> Result<Vec<PreparedImage>> {
    records
        .iter()
        .map(|r| {
            let stack = preprocess::preprocess(&r.image, cfg)?;
            if stack.len() != in_channels {
                return Err(Error::Config(format!(
                    "image {} yields {} input channels but the network expects {in_channels}",
                    r.id,
                    stack.len()
                )));
            }
            Ok(PreparedImage {
                id: r.id.clone(),
                stack: stack.channels().clone(),
                targets: r.targets.clone(),
                fov: r.fov.clone(),
            })
        })
        .collect()
}

fn stack_batch(items: Vec<Array3<f64>>) -> Tensor {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).expect("equal patch shapes")
}

fn sample_labeled_batch<R: Rng>(
    images: &[PreparedImage],
    patch: &PatchSpec,
    batch: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(batch);
    let mut ts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let img = &images[rng.random_range(0..images.len())];
        let targets = img
            .targets
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("image {} has no targets", img.id)))?;
        let (x, t) = tiler::sample_training_patch_with(img.stack.view(), targets.view(), patch, rng)?;
        xs.push(x);
        ts.push(t);
    }
    Ok((stack_batch(xs), stack_batch(ts)))
}

fn check_finite(obj: &Objective, step: u64, lr: f64) -> Result<()> {
    let grads_ok = obj.grads.as_ref().is_none_or(|g| g.all_finite());
    if !obj.parts.is_finite() || !grads_ok {
        return Err(Error::NonFinite {
            step,
            lr,
            parts: format!(
                "main={} ds={} kl={} decay={} pseudo={} (gradients finite: {grads_ok})",
                obj.parts.main, obj.parts.deep, obj.parts.kl, obj.parts.decay, obj.parts.pseudo
            ),
        });
    }
    Ok(())
}

fn latent_noise<R: Rng>(model: &VesselModel, n: usize, rng: &mut R) -> Option<Tensor> {
    model
        .latent()
        .map(|_| Array4::from_shape_simple_fn((n, model.config().latent.dim, 1, 1), || rng.sample(StandardNormal)))
}

fn progress(phase: &str, cfg: &TrainConfig, rec: &LossRecord) {
    if cfg.log_every > 0 && (rec.step + 1) % cfg.log_every == 0 {
        let p = &rec.parts;
        log::info!(
            "{phase} step {} lr {:.4e} total {:.5} main {:.5} ds {:.5} kl {:.5} pseudo {:.5} mask {:.3}",
            rec.step + 1,
            rec.lr,
            p.total(),
            p.main,
            p.deep,
            p.kl,
            p.pseudo,
            p.mask_fraction
        );
    }
}

/// Supervised pretraining of all parameters on labeled crops, with the
/// latent code drawn from the posterior and a KL penalty towards the prior.
pub fn pretrain(
    model: &mut VesselModel,
    labeled: &[PreparedImage],
    patch: &PatchSpec,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    loss.validate()?;
    patch.validate(model.config().backbone.size_multiple())?;
    if labeled.is_empty() {
        return Err(Error::Config("pretraining needs at least one labeled image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model, cfg.momentum, cfg.grad_clip);
    let mut log = LossLog::default();
    let groups = [ParamGroup::Segmentor, ParamGroup::Latent];
    for step in 0..cfg.t_pre {
        let lr = cfg.lr_at(step);
        let (x, t) = sample_labeled_batch(labeled, patch, cfg.batch_size, &mut rng)?;
        let eps = latent_noise(model, cfg.batch_size, &mut rng);
        let obj = model.supervised_objective(&x, &t, eps.as_ref(), loss, Mode::Train, true, true)?;
        check_finite(&obj, step, lr)?;
        model.apply_stat_updates(&obj.stat_updates);
        opt.step(model, obj.grads.as_ref().expect("gradients requested"), lr, &groups);
        let rec = LossRecord {
            step,
            lr,
            parts: obj.parts,
            skipped: false,
        };
        progress("pretrain", cfg, &rec);
        log.records.push(rec);
    }
    model.set_step(model.step() + cfg.t_pre);
    Ok(log)
}

/// An unlabeled image paired with its pseudo-label bundle.
#[derive(Debug, Clone)]
pub struct PseudoImage {
    pub stack: Array3<f64>,
    pub bundle: PseudoLabelBundle,
}

/// Retraining of the segmentor on uncertainty-filtered pseudo-labels.
///
/// The prior/posterior encoders stay frozen. With `mix_labeled`, odd steps
/// use a labeled batch with the pretraining objective instead. Pseudo
/// batches in which no pixel passes the threshold are skipped without
/// touching parameters or normalization statistics.
pub fn retrain(
    model: &mut VesselModel,
    pseudo: &[PseudoImage],
    labeled: &[PreparedImage],
    patch: &PatchSpec,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    loss.validate()?;
    patch.validate(model.config().backbone.size_multiple())?;
    if pseudo.is_empty() {
        return Err(Error::Config("retraining needs at least one pseudo-labeled image".into()));
    }
    for p in pseudo {
        let (_, h, w) = p.stack.dim();
        if p.bundle.mean_map.dim() != (3, h, w) || p.bundle.u_map.dim() != (h, w) {
            return Err(Error::Shape("pseudo-label bundle does not match its image".into()));
        }
    }
    let mix = cfg.mix_labeled && !labeled.is_empty();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_2E7A_1B);
    let mut opt = Sgd::new(model, cfg.momentum, cfg.grad_clip);
    let mut log = LossLog::default();
    let groups = [ParamGroup::Segmentor];
    // pseudo-label and uncertainty planes cropped together
    let label_planes: Vec<Array3<f64>> = pseudo
        .iter()
        .map(|p| concatenate(Axis(0), &[p.bundle.mean_map.view(), p.bundle.u_map.view().insert_axis(Axis(0))]).unwrap())
        .collect();
    for step in 0..cfg.t_re {
        let lr = cfg.lr_at(step);
        let obj = if mix && step % 2 == 1 {
            let (x, t) = sample_labeled_batch(labeled, patch, cfg.batch_size, &mut rng)?;
            let eps = latent_noise(model, cfg.batch_size, &mut rng);
            model.supervised_objective(&x, &t, eps.as_ref(), loss, Mode::Train, false, true)?
        } else {
            let mut xs = Vec::with_capacity(cfg.batch_size);
            let mut ys = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let k = rng.random_range(0..pseudo.len());
                let (_, h, w) = pseudo[k].stack.dim();
                let crop = Crop::sample(patch, h, w, &mut rng)?;
                xs.push(crop.bilinear(pseudo[k].stack.view()));
                ys.push(crop.nearest(label_planes[k].view()));
            }
            let x = stack_batch(xs);
            let y = stack_batch(ys);
            let target = y.slice(s![.., 0..3, .., ..]).to_owned();
            let u = y.slice(s![.., 3..4, .., ..]).to_owned();
            // probe the mask before running the network so skipped batches leave no trace
            if !u.iter().any(|&v| v < loss.threshold) {
                log.skipped_batches += 1;
                log::warn!("retrain step {step}: every pixel filtered out, batch skipped");
                log.records.push(LossRecord {
                    step,
                    lr,
                    parts: LossParts::default(),
                    skipped: true,
                });
                continue;
            }
            model.pseudo_objective(&x, &target, &u, loss, Mode::Train, true)?
        };
        check_finite(&obj, step, lr)?;
        model.apply_stat_updates(&obj.stat_updates);
        opt.step(model, obj.grads.as_ref().expect("gradients requested"), lr, &groups);
        let rec = LossRecord {
            step,
            lr,
            parts: obj.parts,
            skipped: false,
        };
        progress("retrain", cfg, &rec);
        log.records.push(rec);
    }
    model.set_step(model.step() + cfg.t_re);
    Ok(log)
}

/// Whole-image outputs of [`predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(3, H, W)` probabilities: vessel, subtype 1, subtype 2.
    pub probs: Array3<f64>,
    /// `(3, H, W)` binary masks, `probs > 0.5`.
    pub masks: Array3<f64>,
    /// `(H, W)` spatial-activation map, averaged like the probabilities.
    pub attention: Array2<f64>,
}

fn window_batches(stack: ArrayView3<f64>, patch: &PatchSpec, batch: usize) -> Result<Vec<(Vec<(usize, usize)>, Tensor)>> {
    let windows = tiler::extract_windows(stack, patch)?;
    let mut out = Vec::new();
    for chunk in windows.chunks(batch) {
        let pos = chunk.iter().map(|(p, _)| *p).collect();
        let views: Vec<_> = chunk.iter().map(|(_, a)| a.view().insert_axis(Axis(0))).collect();
        out.push((pos, concatenate(Axis(0), &views).expect("equal window shapes")));
    }
    Ok(out)
}

fn repeat_rows(z: &Array1<f64>, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, z.len()), |(_, j)| z[j])
}

/// Sliding-window inference with window outputs averaged in probability
/// space. The latent code is the prior mean of the whole image.
pub fn predict(model: &VesselModel, stack: &Array3<f64>, patch: &PatchSpec, batch: usize) -> Result<Prediction> {
    let (c, h, w) = stack.dim();
    if h < patch.canonical_size || w < patch.canonical_size {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {0}x{0} window",
            patch.canonical_size
        )));
    }
    if c != model.config().backbone.in_channels {
        return Err(Error::Shape(format!(
            "stack has {c} channels, network expects {}",
            model.config().backbone.in_channels
        )));
    }
    let z = match model.latent() {
        Some(_) => Some(uncertainty::encode_prior(model, stack)?.mu),
        None => None,
    };
    let mut canvas = LogitCanvas::new(4, h, w);
    for (pos, x) in window_batches(stack.view(), patch, batch)? {
        let zb = z.as_ref().map(|z| repeat_rows(z, pos.len()).insert_axis(Axis(2)).insert_axis(Axis(3)));
        let out = model.forward(&x, zb.as_ref(), &Default::default())?;
        let main = out.main_stack();
        for (i, &p) in pos.iter().enumerate() {
            let both = concatenate(Axis(0), &[main.index_axis(Axis(0), i), out.attention.index_axis(Axis(0), i)])
                .expect("same window size");
            canvas.add(p, both.view())?;
        }
    }
    let merged = canvas.finalize()?;
    let probs = merged.slice(s![0..3, .., ..]).to_owned();
    let masks = probs.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });
    let attention = merged.index_axis(Axis(0), 3).to_owned();
    Ok(Prediction { probs, masks, attention })
}

/// Monte-Carlo pseudo-labels for one whole image: `samples` latent codes are
/// drawn from the image prior; each produces a stitched probability map.
pub fn self_label_image(
    model: &VesselModel,
    stack: &Array3<f64>,
    patch: &PatchSpec,
    samples: usize,
    seed: u64,
    batch: usize,
) -> Result<PseudoLabelBundle> {
    if samples < 2 {
        return Err(Error::Config(format!("need at least 2 latent samples, got {samples}")));
    }
    let prior = uncertainty::encode_prior(model, stack)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Array1<f64>> = (0..samples).map(|_| uncertainty::sample_latent_with(&prior, &mut rng)).collect();
    let (_, h, w) = stack.dim();
    let mut canvases: Vec<LogitCanvas> = (0..samples).map(|_| LogitCanvas::new(3, h, w)).collect();
    for (pos, x) in window_batches(stack.view(), patch, batch)? {
        let cache = uncertainty::cache_trunk(model, &x)?;
        for (z, canvas) in zs.iter().zip(canvases.iter_mut()) {
            let out = uncertainty::inject_latent(model, &cache, &repeat_rows(z, pos.len()))?;
            let main = out.main_stack();
            for (i, &p) in pos.iter().enumerate() {
                canvas.add(p, main.index_axis(Axis(0), i))?;
            }
        }
    }
    let maps = canvases.into_iter().map(LogitCanvas::finalize).collect::<Result<Vec<_>>>()?;
    uncertainty::summarize_samples(&maps)
}

/// Seed used for the `i`-th image of a self-labeling run.
pub fn image_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Pseudo-labels every unlabeled image.
pub fn self_label(
    model: &VesselModel,
    unlabeled: &[PreparedImage],
    patch: &PatchSpec,
    samples: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<PseudoLabelBundle>> {
    if model.latent().is_none() {
        return Err(Error::Contract("self-labeling needs a model with a latent path".into()));
    }
    unlabeled
        .iter()
        .enumerate()
        .map(|(i, img)| self_label_image(model, &img.stack, patch, samples, image_seed(seed, i), batch))
        .collect()
}

/// Pooled metrics of [`predict`] over labeled images.
pub fn evaluate(model: &VesselModel, images: &[PreparedImage], patch: &PatchSpec, batch: usize) -> Result<AvReport> {
    let mut pairs = Vec::with_capacity(images.len());
    for img in images {
        let targets = img
            .targets
            .clone()
            .ok_or_else(|| Error::Contract(format!("image {} has no targets", img.id)))?;
        let pred = predict(model, &img.stack, patch, batch)?;
        pairs.push((pred.probs, targets, img.fov.clone()));
    }
    metrics::av_report_pooled(&pairs)
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub dataset_checksums: std::collections::BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_checksum: Option<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
