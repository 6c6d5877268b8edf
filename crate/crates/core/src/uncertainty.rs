//! Latent-variable uncertainty: prior/posterior encoders, latent injection
//! into the output block, and Monte-Carlo pseudo-label generation.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::hcnet::{collect_output, ForwardOptions, NetworkOutput};
use crate::model::VesselModel;
use crate::nn::{Conv2d, Graph, Mode, ParamGroup, ParamStore, Tensor, Var};

/// Raw variance of `[0, 1]`-valued samples never exceeds this.
pub const MAX_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    /// Latent dimensionality; 0 disables the latent path entirely.
    pub dim: usize,
    /// Feature width of the prior/posterior encoders.
    pub encoder_width: usize,
    /// Default number of Monte-Carlo samples for pseudo-labels.
    pub samples: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            dim: 6,
            encoder_width: 16,
            samples: 8,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim > 0 && self.encoder_width == 0 {
            return Err(Error::Config("latent encoder_width must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config(format!("need at least 2 latent samples, got {}", self.samples)));
        }
        Ok(())
    }
}

/// Axis-aligned Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Array1<f64>, var: Array1<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(Error::Shape(format!("mean has {} dims, variance {}", mu.len(), var.len())));
        }
        if let Some(v) = var.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("variance {v} is not positive")));
        }
        Ok(Self { mu, var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = mu + sqrt(var) * eps` with `eps` drawn from `rng`.
pub fn sample_latent_with<R: Rng>(g: &LatentGaussian, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(g.dim(), |i| {
        let eps: f64 = rng.sample(StandardNormal);
        g.mu[i] + g.var[i].sqrt() * eps
    })
}

/// Reparameterized draw, reproducible for a given seed.
pub fn sample_latent(g: &LatentGaussian, seed: u64) -> Array1<f64> {
    sample_latent_with(g, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Small convolutional encoder producing `(mu, log var)` heads after global pooling.
#[derive(Debug, Clone)]
pub struct LatentEncoder {
    convs: [Conv2d; 3],
    head: Conv2d,
    dim: usize,
}

impl LatentEncoder {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, width: usize, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Latent;
        let convs = [
            Conv2d::new(store, &format!("{name}.conv0"), in_channels, width, 3, true, g, rng),
            Conv2d::new(store, &format!("{name}.conv1"), width, 2 * width, 3, true, g, rng),
            Conv2d::new(store, &format!("{name}.conv2"), 2 * width, 2 * width, 3, true, g, rng),
        ];
        let head = Conv2d::new(store, &format!("{name}.head"), 2 * width, 2 * dim, 1, true, g, rng);
        Self { convs, head, dim }
    }

    /// Returns `(mu, log_var)`, each `(N, dim, 1, 1)`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = g.value(h).dim();
                if hh >= 2 && ww >= 2 {
                    h = g.max_pool2(h);
                }
            }
            h = g.conv2d(h, conv);
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        let out = g.conv2d(pooled, &self.head);
        let mu = g.slice_channels(out, 0, self.dim);
        let raw = g.slice_channels(out, self.dim, self.dim);
        let log_var = g.soft_clamp(raw, LOG_VAR_BOUND);
        (mu, log_var)
    }
}

/// Log-variances are squashed into (-b, b) so exp(-log_var) stays finite.
pub const LOG_VAR_BOUND: f64 = 5.0;

/// Three 1x1 convolutions merging broadcast latent codes into decoder features.
#[derive(Debug, Clone)]
pub struct LatentFusion {
    convs: [Conv2d; 3],
}

impl LatentFusion {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, features: usize, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Segmentor;
        let convs = [
            Conv2d::new(store, "fusion.0", features + dim, features, 1, true, g, rng),
            Conv2d::new(store, "fusion.1", features, features, 1, true, g, rng),
            Conv2d::new(store, "fusion.2", features, features, 1, true, g, rng),
        ];
        Self { convs }
    }

    pub fn apply(&self, g: &mut Graph, features: Var, z: Var) -> Var {
        let (_, _, h, w) = g.value(features).dim();
        let zmap = g.broadcast_spatial(z, h, w);
        let mut x = g.concat(&[features, zmap]);
        for conv in &self.convs {
            x = g.conv2d(x, conv);
            x = g.relu(x);
        }
        x
    }
}

/// Convert `(N, L, 1, 1)` mean/log-variance tensors into per-sample Gaussians.
pub(crate) fn gaussians_from(mu: &Tensor, log_var: &Tensor) -> Vec<LatentGaussian> {
    (0..mu.dim().0)
        .map(|i| LatentGaussian {
            mu: mu.slice(ndarray::s![i, .., 0, 0]).to_owned(),
            var: log_var.slice(ndarray::s![i, .., 0, 0]).mapv(f64::exp),
        })
        .collect()
}

fn single(input: &Array3<f64>) -> Tensor {
    input.clone().insert_axis(Axis(0))
}

/// Prior distribution of one image, `(C, H, W)`.
pub fn encode_prior(model: &VesselModel, image: &Array3<f64>) -> Result<LatentGaussian> {
    let mut v = model.encode_prior_batch(&single(image))?;
    Ok(v.remove(0))
}

/// Posterior distribution from an image and its `(3, H, W)` targets.
pub fn encode_posterior(model: &VesselModel, image: &Array3<f64>, targets: &Array3<f64>) -> Result<LatentGaussian> {
    let mut v = model.encode_posterior_batch(&single(image), &single(targets))?;
    Ok(v.remove(0))
}

/// Segmentor activations that do not depend on the latent code.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub(crate) features: Tensor,
    pub(crate) deep: [Tensor; 3],
    pub(crate) revision: u64,
}

impl TrunkCache {
    pub fn batch_len(&self) -> usize {
        self.features.dim().0
    }
}

/// Runs the trunk once so that latent samples only re-execute the fusion and output block.
pub fn cache_trunk(model: &VesselModel, x: &Tensor) -> Result<TrunkCache> {
    model.net().check_input(x.dim())?;
    let mut g = Graph::new(model.store(), Mode::Inference);
    let xv = g.input(x.as_standard_layout().into_owned());
    let trunk = model.net().trunk(&mut g, xv);
    let ds = model.net().deep_supervision(&mut g, &trunk.taps);
    Ok(TrunkCache {
        features: g.value(trunk.features).clone(),
        deep: [0, 1, 2].map(|i| g.value(ds[i]).clone()),
        revision: model.revision(),
    })
}

/// Fusion + output block for latent codes `z`, one row per cached sample.
pub fn inject_latent(model: &VesselModel, cache: &TrunkCache, z: &Array2<f64>) -> Result<NetworkOutput> {
    let Some(parts) = model.latent() else {
        return Err(Error::Contract("model has no latent path".into()));
    };
    if cache.revision != model.revision() {
        return Err(Error::Contract(format!(
            "trunk cache is stale (cached at revision {}, model at {})",
            cache.revision,
            model.revision()
        )));
    }
    let n = cache.batch_len();
    if z.dim() != (n, model.config().latent.dim) {
        return Err(Error::Shape(format!(
            "latent codes {:?} do not match batch {n} x dim {}",
            z.shape(),
            model.config().latent.dim
        )));
    }
    let mut g = Graph::new(model.store(), Mode::Inference);
    let feat = g.input(cache.features.clone());
    let zt = z.clone().insert_axis(Axis(2)).insert_axis(Axis(3));
    let zv = g.input(zt);
    let fused = parts.fusion.apply(&mut g, feat, zv);
    let heads = model.net().output_block(&mut g, fused, &ForwardOptions::default());
    let mut out = collect_output(&g, &heads, &[heads.whole; 3]);
    out.deep = cache.deep.clone();
    Ok(out)
}

/// Per-pixel mean and normalized variance of `M` sampled probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBundle {
    /// `(3, H, W)` mean probabilities: vessel, subtype 1, subtype 2.
    pub mean_map: Array3<f64>,
    /// `(H, W)` normalized uncertainty in `[0, 1]`.
    pub u_map: Array2<f64>,
    pub samples: usize,
}

/// Reduces `M >= 2` sampled `(C, H, W)` maps to a pseudo-label bundle.
///
/// The uncertainty of a pixel is the largest per-channel population variance
/// divided by [`MAX_VARIANCE`]. Values are sorted per pixel before reduction so
/// the result does not depend on sample order.
pub fn summarize_samples(samples: &[Array3<f64>]) -> Result<PseudoLabelBundle> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {m}")));
    }
    let dims = samples[0].dim();
    if samples.iter().any(|s| s.dim() != dims) {
        return Err(Error::Shape("sample maps differ in shape".into()));
    }
    let (c, h, w) = dims;
    let mut mean_map = Array3::zeros(dims);
    let mut u_map = Array2::<f64>::zeros((h, w));
    let mut buf = vec![0.0; m];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                for (b, s) in buf.iter_mut().zip(samples) {
                    *b = s[[ch, y, x]];
                }
                buf.sort_by(f64::total_cmp);
                let mean = buf.iter().sum::<f64>() / m as f64;
                let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                mean_map[[ch, y, x]] = mean;
                let u = (var / MAX_VARIANCE).clamp(0.0, 1.0);
                if u > u_map[[y, x]] {
                    u_map[[y, x]] = u;
                }
            }
        }
    }
    Ok(PseudoLabelBundle {
        mean_map,
        u_map,
        samples: m,
    })
}

/// Samples `M` latent codes from the prior of a network-sized `(C, H, W)`
/// input and summarizes the resulting main-output maps.
pub fn generate_pseudo_labels(model: &VesselModel, image: &Array3<f64>, samples: usize, seed: u64) -> Result<PseudoLabelBundle> {
    if samples < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {samples}")));
    }
    let prior = encode_prior(model, image)?;
    let cache = cache_trunk(model, &single(image))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z = sample_latent_with(&prior, &mut rng).insert_axis(Axis(0));
        let out = inject_latent(model, &cache, &z)?;
        maps.push(out.main_stack().index_axis_move(Axis(0), 0));
    }
    summarize_samples(&maps)
}

/// Provenance written next to a persisted bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSidecar {
    pub image_id: String,
    #[serde(rename = "M")]
    pub samples: usize,
    pub seed: u64,
    pub model_checksum: String,
    #[serde(rename = "H_used")]
    pub h_used: f64,
}

pub const MEAN_LABELS: [&str; 3] = ["vessel", "subtype1", "subtype2"];

/// Writes `<stem>.mean.vfcs`, `<stem>.u.vfcs` and `<stem>.json` into `dir`.
pub fn write_bundle(dir: &Path, stem: &str, bundle: &PseudoLabelBundle, sidecar: &BundleSidecar) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels: Vec<String> = MEAN_LABELS.iter().map(|s| s.to_string()).collect();
    container::write(&dir.join(format!("{stem}.mean.vfcs")), &labels, &bundle.mean_map)?;
    let u = bundle.u_map.clone().insert_axis(Axis(0));
    container::write(&dir.join(format!("{stem}.u.vfcs")), &["uncertainty".to_string()], &u)?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_bundle(dir: &Path, stem: &str) -> Result<(PseudoLabelBundle, BundleSidecar)> {
    let path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: BundleSidecar = serde_json::from_str(&text)?;
    let (_, mean_map) = container::read(&dir.join(format!("{stem}.mean.vfcs")))?;
    let (_, u) = container::read(&dir.join(format!("{stem}.u.vfcs")))?;
    if mean_map.dim().0 != 3 || u.dim().0 != 1 || (mean_map.dim().1, mean_map.dim().2) != (u.dim().1, u.dim().2) {
        return Err(Error::Format {
            path: dir.join(stem),
            message: "bundle maps have inconsistent shapes".into(),
        });
    }
    Ok((
        PseudoLabelBundle {
            mean_map,
            u_map: u.index_axis_move(Axis(0), 0),
            samples: sidecar.samples,
        },
        sidecar,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_hand_case() {
        let a = Array3::from_elem((3, 1, 1), 0.4);
        let b = Array3::from_elem((3, 1, 1), 0.6);
        let bundle = summarize_samples(&[a, b]).unwrap();
        assert!((bundle.mean_map[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((bundle.u_map[[0, 0]] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_have_zero_uncertainty() {
        let a = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| ((c + y * x) % 7) as f64 / 7.0);
        let bundle = summarize_samples(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(bundle.u_map.iter().all(|&u| u == 0.0));
        assert_eq!(bundle.mean_map, a);
    }

    #[test]
    fn extreme_disagreement_saturates() {
        let a = Array3::zeros((3, 2, 2));
        let b = Array3::ones((3, 2, 2));
        let bundle = summarize_samples(&[a, b]).unwrap();
        assert!(bundle.u_map.iter().all(|&u| u == 1.0));
    }

    #[test]
    fn rejects_single_sample() {
        let a = Array3::zeros((3, 2, 2));
        assert!(matches!(summarize_samples(&[a]), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_gaussian_sample_is_mean() {
        let g = LatentGaussian::new(Array1::from(vec![0.3, -1.2, 2.0]), Array1::from_elem(3, 1e-12)).unwrap();
        let z = sample_latent(&g, 5);
        for (a, b) in z.iter().zip(g.mu.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(sample_latent(&g, 9), sample_latent(&g, 9));
    }

    #[test]
    fn gaussian_rejects_bad_variance() {
        assert!(LatentGaussian::new(Array1::zeros(2), Array1::from(vec![1.0, 0.0])).is_err());
        assert!(LatentGaussian::new(Array1::zeros(2), Array1::ones(3)).is_err());
    }
}
