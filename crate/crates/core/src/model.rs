//! The full trainable model: segmentation network plus optional latent path,
//! its training objectives, and the checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hcnet::{collect_output, ActivationParams, BackboneConfig, ForwardOptions, HcNet, HeadVars, NetworkOutput};
use crate::losses::{self, LossConfig};
use crate::nn::{BatchNorm, Gradients, Graph, Mode, ParamGroup, ParamStore, StatsId, Tensor, Var};
use crate::uncertainty::{gaussians_from, LatentConfig, LatentEncoder, LatentFusion, LatentGaussian};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub activation: ActivationParams,
    pub latent: LatentConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.activation.validate()?;
        self.latent.validate()
    }
}

#[derive(Debug, Clone)]
pub struct LatentParts {
    pub prior: LatentEncoder,
    pub posterior: LatentEncoder,
    pub fusion: LatentFusion,
}

/// Scalar components of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub main: f64,
    /// Deep-supervision terms, already weighted.
    pub deep: f64,
    /// `beta * KL`, averaged over the batch.
    pub kl: f64,
    pub decay: f64,
    pub pseudo: f64,
    pub mask_fraction: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.main + self.deep + self.kl + self.decay + self.pseudo
    }

    pub fn is_finite(&self) -> bool {
        [self.main, self.deep, self.kl, self.decay, self.pseudo].iter().all(|v| v.is_finite())
    }
}

/// Result of evaluating a training objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub parts: LossParts,
    pub grads: Option<Gradients>,
    pub stat_updates: Vec<(StatsId, Array1<f64>, Array1<f64>)>,
    /// True when the uncertainty mask admitted no pixel.
    pub fully_uncertain: bool,
}

#[derive(Debug, Clone)]
pub struct VesselModel {
    cfg: ModelConfig,
    store: ParamStore,
    net: HcNet,
    latent: Option<LatentParts>,
    step: u64,
    revision: u64,
}

impl VesselModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = HcNet::new(&mut store, cfg.backbone, cfg.activation, &mut rng)?;
        let latent = (cfg.latent.dim > 0).then(|| {
            let b = &cfg.backbone;
            let l = &cfg.latent;
            LatentParts {
                prior: LatentEncoder::new(&mut store, "prior", b.in_channels, l.encoder_width, l.dim, &mut rng),
                posterior: LatentEncoder::new(&mut store, "posterior", b.in_channels + 3, l.encoder_width, l.dim, &mut rng),
                fusion: LatentFusion::new(&mut store, b.base_width, l.dim, &mut rng),
            }
        });
        Ok(Self {
            cfg,
            store,
            net,
            latent,
            step: 0,
            revision: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access; invalidates trunk caches.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.revision += 1;
        &mut self.store
    }

    pub fn net(&self) -> &HcNet {
        &self.net
    }

    pub fn latent(&self) -> Option<&LatentParts> {
        self.latent.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Incremented on every parameter mutation.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn apply_stat_updates(&mut self, updates: &[(StatsId, Array1<f64>, Array1<f64>)]) {
        self.store_mut().apply_stat_updates(updates, BatchNorm::MOMENTUM);
    }

    fn check_targets(&self, x: &Tensor, target: &Tensor) -> Result<()> {
        let (n, _, h, w) = x.dim();
        if target.dim() != (n, 3, h, w) {
            return Err(Error::Shape(format!(
                "targets {:?} do not match input {:?}",
                target.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn require_latent(&self) -> Result<&LatentParts> {
        self.latent
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without a latent path".into()))
    }

    pub fn encode_prior_batch(&self, x: &Tensor) -> Result<Vec<LatentGaussian>> {
        let parts = self.require_latent()?;
        if x.dim().1 != self.cfg.backbone.in_channels {
            return Err(Error::Shape(format!(
                "prior expects {} channels, got {}",
                self.cfg.backbone.in_channels,
                x.dim().1
            )));
        }
        let mut g = Graph::new(&self.store, Mode::Inference);
        let xv = g.input(x.as_standard_layout().into_owned());
        let (mu, lv) = parts.prior.encode(&mut g, xv);
        Ok(gaussians_from(g.value(mu), g.value(lv)))
    }

    pub fn encode_posterior_batch(&self, x: &Tensor, target: &Tensor) -> Result<Vec<LatentGaussian>> {
        let parts = self.require_latent()?;
        self.check_targets(x, target)?;
        let mut g = Graph::new(&self.store, Mode::Inference);
        let xv = g.input(x.as_standard_layout().into_owned());
        let tv = g.input(target.as_standard_layout().into_owned());
        let cat = g.concat(&[xv, tv]);
        let (mu, lv) = parts.posterior.encode(&mut g, cat);
        Ok(gaussians_from(g.value(mu), g.value(lv)))
    }

    /// Network pass with an externally supplied latent code `z` of shape `(N, L)`.
    fn heads_with_latent(&self, g: &mut Graph, x: Var, z: Option<Var>, opts: &ForwardOptions) -> (HeadVars, [Var; 3]) {
        let trunk = self.net.trunk(g, x);
        let features = match (&self.latent, z) {
            (Some(parts), Some(z)) => parts.fusion.apply(g, trunk.features, z),
            _ => trunk.features,
        };
        let heads = self.net.output_block(g, features, opts);
        let ds = self.net.deep_supervision(g, &trunk.taps);
        (heads, ds)
    }

    /// Deterministic evaluation pass. With a latent path, `z` defaults to the prior mean.
    pub fn forward(&self, x: &Tensor, z: Option<&Tensor>, opts: &ForwardOptions) -> Result<NetworkOutput> {
        self.net.check_input(x.dim())?;
        let z = match (&self.latent, z) {
            (None, _) => None,
            (Some(_), Some(z)) => Some(z.clone()),
            (Some(_), None) => Some(self.prior_means(x)?),
        };
        let mut g = Graph::new(&self.store, Mode::Inference);
        let xv = g.input(x.as_standard_layout().into_owned());
        let zv = z.map(|z| g.input(z));
        let (heads, ds) = self.heads_with_latent(&mut g, xv, zv, opts);
        Ok(collect_output(&g, &heads, &ds))
    }

    /// `(N, L, 1, 1)` prior means.
    pub fn prior_means(&self, x: &Tensor) -> Result<Tensor> {
        let parts = self.require_latent()?;
        let mut g = Graph::new(&self.store, Mode::Inference);
        let xv = g.input(x.as_standard_layout().into_owned());
        let (mu, _) = parts.prior.encode(&mut g, xv);
        Ok(g.value(mu).clone())
    }

    /// Supervised objective: deep-supervised BCE + weight decay, plus
    /// `beta * KL(posterior || prior)` when the latent path is trained.
    ///
    /// `eps` holds the `(N, L, 1, 1)` standard-normal draws for the
    /// reparameterized posterior sample. When `train_latent` is false the
    /// encoders are treated as frozen: the KL term and their weight decay are
    /// omitted from the objective.
    pub fn supervised_objective(
        &self,
        x: &Tensor,
        target: &Tensor,
        eps: Option<&Tensor>,
        cfg: &LossConfig,
        mode: Mode,
        train_latent: bool,
        want_grads: bool,
    ) -> Result<Objective> {
        self.net.check_input(x.dim())?;
        self.check_targets(x, target)?;
        let n = x.dim().0;
        let mut g = Graph::new(&self.store, if want_grads && mode == Mode::Inference { Mode::Eval } else { mode });
        let xv = g.input(x.as_standard_layout().into_owned());
        let mut kl_seeds = Vec::new();
        let mut kl_value = 0.0;
        let z = if let Some(parts) = &self.latent {
            let dim = self.cfg.latent.dim;
            let eps = eps.ok_or_else(|| Error::Contract("latent model needs posterior noise".into()))?;
            if eps.dim() != (n, dim, 1, 1) {
                return Err(Error::Shape(format!("noise {:?} must be ({n}, {dim}, 1, 1)", eps.shape())));
            }
            let tv = g.input(target.as_standard_layout().into_owned());
            let cat = g.concat(&[xv, tv]);
            let (mu_q, lv_q) = parts.posterior.encode(&mut g, cat);
            let half = g.scale(lv_q, 0.5);
            let std = g.exp(half);
            let ev = g.input(eps.clone());
            let noise = g.mul(std, ev);
            let z = g.add(mu_q, noise);
            if train_latent {
                let (mu_p, lv_p) = parts.prior.encode(&mut g, xv);
                let mut d = [0, 1, 2, 3].map(|_| Tensor::zeros((n, dim, 1, 1)));
                let scale = cfg.beta_kl / n as f64;
                for i in 0..n {
                    for j in 0..dim {
                        let at = [i, j, 0, 0];
                        let (kl, a, b, c, e) = losses::kl_logvar_terms(
                            g.value(mu_q)[at],
                            g.value(lv_q)[at],
                            g.value(mu_p)[at],
                            g.value(lv_p)[at],
                        );
                        kl_value += kl;
                        d[0][at] = a * scale;
                        d[1][at] = b * scale;
                        d[2][at] = c * scale;
                        d[3][at] = e * scale;
                    }
                }
                kl_value *= scale;
                let [a, b, c, e] = d;
                kl_seeds = vec![(mu_q, a), (lv_q, b), (mu_p, c), (lv_p, e)];
            }
            Some(z)
        } else {
            None
        };
        let (heads, ds) = self.heads_with_latent(&mut g, xv, z, &ForwardOptions::default());
        let mu = &cfg.class_weights;
        let main_pred = concat_main(g.value(heads.whole), g.value(heads.subtypes));
        let (main, main_grad) = losses::weighted_bce_grad(&main_pred, target, mu)?;
        let mut deep = 0.0;
        let mut seeds = Vec::new();
        for &d in &ds {
            let (v, grad) = losses::weighted_bce_grad(g.value(d), target, mu)?;
            deep += cfg.ds_weight * v;
            seeds.push((d, grad * cfg.ds_weight));
        }
        let groups: &[ParamGroup] = if train_latent && self.latent.is_some() {
            &[ParamGroup::Segmentor, ParamGroup::Latent]
        } else {
            &[ParamGroup::Segmentor]
        };
        let decay = 0.5 * cfg.lambda_wd * self.store.sq_norm(groups);
        let parts = LossParts {
            main,
            deep,
            kl: kl_value,
            decay,
            ..LossParts::default()
        };
        let grads = if want_grads {
            let (gw, gs) = split_main(&main_grad);
            seeds.push((heads.whole, gw));
            seeds.push((heads.subtypes, gs));
            seeds.extend(kl_seeds);
            let mut grads = g.backward(seeds);
            grads.add_weight_decay(&self.store, groups, cfg.lambda_wd);
            Some(grads)
        } else {
            None
        };
        Ok(Objective {
            parts,
            grads,
            stat_updates: g.take_stat_updates(),
            fully_uncertain: false,
        })
    }

    /// Uncertainty-masked pseudo-label objective on the main output plus
    /// weight decay of the segmentor. The latent code is the prior mean.
    pub fn pseudo_objective(
        &self,
        x: &Tensor,
        pseudo: &Tensor,
        u: &Tensor,
        cfg: &LossConfig,
        mode: Mode,
        want_grads: bool,
    ) -> Result<Objective> {
        self.net.check_input(x.dim())?;
        self.check_targets(x, pseudo)?;
        let z = match &self.latent {
            Some(_) => Some(self.prior_means(x)?),
            None => None,
        };
        let mut g = Graph::new(&self.store, if want_grads && mode == Mode::Inference { Mode::Eval } else { mode });
        let xv = g.input(x.as_standard_layout().into_owned());
        let zv = z.map(|z| g.input(z));
        let (heads, _) = self.heads_with_latent(&mut g, xv, zv, &ForwardOptions::default());
        let main_pred = concat_main(g.value(heads.whole), g.value(heads.subtypes));
        let (filtered, grad) =
            losses::uncertainty_filtered_loss_grad(&main_pred, pseudo, u, cfg.threshold, &cfg.class_weights)?;
        let groups = [ParamGroup::Segmentor];
        let decay = 0.5 * cfg.lambda_wd * self.store.sq_norm(&groups);
        let parts = LossParts {
            decay,
            pseudo: filtered.value,
            mask_fraction: filtered.mask_fraction,
            ..LossParts::default()
        };
        let grads = if want_grads {
            let (gw, gs) = split_main(&grad);
            let mut grads = g.backward(vec![(heads.whole, gw), (heads.subtypes, gs)]);
            grads.add_weight_decay(&self.store, &groups, cfg.lambda_wd);
            Some(grads)
        } else {
            None
        };
        Ok(Objective {
            parts,
            grads,
            stat_updates: g.take_stat_updates(),
            fully_uncertain: filtered.fully_uncertain,
        })
    }

    /// SHA-256 over parameter names and values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.store.params() {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for s in self.store.stats() {
            h.update(s.name.as_bytes());
            for v in s.mean.iter().chain(s.var.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

fn concat_main(whole: &Tensor, subtypes: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(1), &[whole.view(), subtypes.view()])
        .expect("batch dims match")
        .as_standard_layout()
        .into_owned()
}

fn split_main(grad: &Tensor) -> (Tensor, Tensor) {
    (
        grad.slice(s![.., 0..1, .., ..]).to_owned(),
        grad.slice(s![.., 1.., .., ..]).to_owned(),
    )
}

mod checkpoint {
    //! `VNCK` container: magic, u32 version, u64 header length, JSON header,
    //! then little-endian f64 payload in header order.

    use super::*;

    const MAGIC: &[u8; 4] = b"VNCK";
    pub const VERSION: u32 = 1;

    #[derive(Serialize, Deserialize)]
    struct Header {
        version: u32,
        config: ModelConfig,
        step: u64,
        params: Vec<Entry>,
        stats: Vec<Entry>,
    }

    #[derive(Serialize, Deserialize)]
    struct Entry {
        name: String,
        len: usize,
    }

    pub fn save(model: &VesselModel, path: &Path) -> Result<()> {
        let header = Header {
            version: VERSION,
            config: model.cfg,
            step: model.step,
            params: model
                .store
                .params()
                .iter()
                .map(|p| Entry {
                    name: p.name.clone(),
                    len: p.value.len(),
                })
                .collect(),
            stats: model
                .store
                .stats()
                .iter()
                .map(|s| Entry {
                    name: s.name.clone(),
                    len: s.mean.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * model.store.scalar_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in model.store.params() {
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in model.store.stats() {
            for v in s.mean.iter().chain(s.var.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<VesselModel> {
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut model = VesselModel::new(header.config, 0)?;
        let mut floats = bytes[16 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        if header.params.len() != model.store.params().len() || header.stats.len() != model.store.stats().len() {
            return Err(bad("parameter layout does not match the configuration"));
        }
        for (entry, p) in header.params.iter().zip(model.store.params_mut()) {
            if entry.name != p.name || entry.len != p.value.len() {
                return Err(bad(&format!("parameter {} does not match {}", entry.name, p.name)));
            }
            for v in p.value.iter_mut() {
                *v = floats.next().ok_or_else(|| bad("truncated payload"))?;
            }
        }
        for (entry, s) in header.stats.iter().zip(model.store.stats_mut()) {
            if entry.name != s.name || entry.len != s.mean.len() {
                return Err(bad(&format!("statistics {} do not match {}", entry.name, s.name)));
            }
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = floats.next().ok_or_else(|| bad("truncated payload"))?;
            }
        }
        if floats.next().is_some() {
            return Err(bad("trailing data"));
        }
        model.step = header.step;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn mini() -> VesselModel {
        let mut cfg = ModelConfig::default();
        cfg.backbone.base_width = 4;
        cfg.backbone.depth = 3;
        cfg.latent.encoder_width = 4;
        VesselModel::new(cfg, 4).unwrap()
    }

    fn input(n: usize, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Array4::from_shape_simple_fn((n, 8, size, size), || rng.random::<f64>())
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let model = mini();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = VesselModel::load(&path).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back.config(), model.config());
        let x = input(1, 64);
        let z = Array4::zeros((1, model.config().latent.dim, 1, 1));
        let a = model.forward(&x, Some(&z), &ForwardOptions::default()).unwrap();
        let b = back.forward(&x, Some(&z), &ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(VesselModel::load(&path), Err(Error::Format { .. })));
        let good = dir.path().join("good.ckpt");
        mini().save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(VesselModel::load(&path).is_err());
    }

    #[test]
    fn fully_filtered_pseudo_batch_has_no_gradient() {
        let model = mini();
        let x = input(2, 8);
        let pseudo = Array4::from_elem((2, 3, 8, 8), 0.5);
        let u = Array4::from_elem((2, 1, 8, 8), 0.9);
        let cfg = LossConfig {
            lambda_wd: 0.0,
            threshold: 0.7,
            ..Default::default()
        };
        let obj = model.pseudo_objective(&x, &pseudo, &u, &cfg, Mode::Train, true).unwrap();
        assert!(obj.fully_uncertain);
        assert_eq!(obj.parts.total(), 0.0);
        let grads = obj.grads.unwrap();
        assert!((0..grads.len()).all(|i| grads.by_index(i).iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn latent_model_requires_noise() {
        let model = mini();
        let x = input(1, 8);
        let t = Array4::zeros((1, 3, 8, 8));
        let r = model.supervised_objective(&x, &t, None, &LossConfig::default(), Mode::Train, true, false);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
