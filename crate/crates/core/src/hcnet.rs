//! U-shaped segmentation backbone with the hierarchical two-stream output block.
//!
//! The output block predicts the whole-vessel map first; its probabilities are
//! turned into a per-pixel attention map by [`spatial_activation`], which then
//! re-weights the features feeding the sub-type head. Three auxiliary sigmoid
//! heads on the coarse decoder levels provide deep supervision.

use ndarray::{Array, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Graph, Mode, ParamGroup, ParamStore, Tensor, Var};

/// Channels of every deep-supervision output: vessel, subtype 1, subtype 2.
pub const DS_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    pub subtype_count: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            base_width: 32,
            depth: 4,
            subtype_count: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("in_channels and base_width must be positive".into()));
        }
        if self.depth < 3 {
            return Err(Error::Config(format!(
                "depth must be at least 3 to host three deep-supervision taps, got {}",
                self.depth
            )));
        }
        if self.subtype_count == 0 {
            return Err(Error::Config("subtype_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Gain applied to the bump of the activation curve; 1.0 is the identity factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationParams {
    pub gain: f64,
}

impl Default for ActivationParams {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

impl ActivationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("activation gain must be positive, got {}", self.gain)));
        }
        Ok(())
    }

    /// Largest attention weight, reached at probability 1/2.
    pub fn peak(&self) -> f64 {
        1.0 + self.gain * (1.0 - (-0.25f64).exp())
    }
}

#[inline]
pub(crate) fn activation_value(x: f64, gain: f64) -> f64 {
    let t = x - 0.5;
    gain * ((-(t * t)).exp() - (-0.25f64).exp()) + 1.0
}

/// Attention map `m(x) = gain * (exp(-(x - 1/2)^2) - exp(-1/4)) + 1` of a
/// probability map. Equals 1 at x = 0 and x = 1 and peaks at x = 1/2.
pub fn spatial_activation<D: Dimension>(x: &Array<f64, D>, params: &ActivationParams) -> Result<Array<f64, D>> {
    if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("activation input {bad} outside [0, 1]")));
    }
    Ok(x.mapv(|v| activation_value(v, params.gain)))
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, false, ParamGroup::Segmentor, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, ParamGroup::Segmentor, rng),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.conv2d(x, &self.conv);
        g.batch_norm(h, &self.bn)
    }

    fn apply_relu(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.apply(g, x);
        g.relu(h)
    }
}

/// Test hooks for the output block.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace the whole-vessel probabilities by this constant before the
    /// attention map is computed.
    pub whole_override: Option<f64>,
    /// Skip the activation and weight features by exactly 1.
    pub uniform_attention: bool,
}

/// Graph handles of one output-block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub whole: Var,
    pub attention: Var,
    pub subtypes: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TrunkVars {
    /// Final decoder features, input of the output block.
    pub features: Var,
    /// Deep-supervision taps, coarsest first.
    pub taps: [Var; 3],
}

/// Parameter handles of the segmentation network.
#[derive(Debug, Clone)]
pub struct HcNet {
    cfg: BackboneConfig,
    activation: ActivationParams,
    encoder: Vec<[ConvBn; 2]>,
    /// `decoder[l]` produces level `l` features, `l < depth - 1`.
    decoder: Vec<[ConvBn; 2]>,
    chunk_a: ConvBn,
    chunk_b: ConvBn,
    whole_head: ConvBn,
    subtype_head: ConvBn,
    ds_heads: [Conv2d; 3],
}

/// Concrete outputs of a forward pass, all `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub whole: Tensor,
    pub subtypes: Tensor,
    pub deep: [Tensor; 3],
    pub attention: Tensor,
}

impl NetworkOutput {
    /// `concat(whole, subtypes)` along channels.
    pub fn main_stack(&self) -> Tensor {
        ndarray::concatenate(ndarray::Axis(1), &[self.whole.view(), self.subtypes.view()])
            .expect("matching batch/spatial dims")
            .as_standard_layout()
            .into_owned()
    }
}

impl HcNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: BackboneConfig,
        activation: ActivationParams,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        activation.validate()?;
        let d = cfg.depth;
        let mut encoder = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 { cfg.in_channels } else { cfg.width_at(l - 1) };
            let w = cfg.width_at(l);
            encoder.push([
                ConvBn::new(store, &format!("enc{l}.0"), cin, w, 3, rng),
                ConvBn::new(store, &format!("enc{l}.1"), w, w, 3, rng),
            ]);
        }
        let mut decoder = Vec::with_capacity(d - 1);
        for l in 0..d - 1 {
            let w = cfg.width_at(l);
            let cin = cfg.width_at(l + 1) + w;
            decoder.push([
                ConvBn::new(store, &format!("dec{l}.0"), cin, w, 3, rng),
                ConvBn::new(store, &format!("dec{l}.1"), w, w, 3, rng),
            ]);
        }
        let b = cfg.base_width;
        let chunk_a = ConvBn::new(store, "out.chunk_a", b, b, 3, rng);
        let chunk_b = ConvBn::new(store, "out.chunk_b", b, b, 3, rng);
        let whole_head = ConvBn::new(store, "out.whole", b, 1, 1, rng);
        let subtype_head = ConvBn::new(store, "out.subtype", 2 * b, cfg.subtype_count, 1, rng);
        let tap_levels = Self::tap_levels(&cfg);
        let ds_heads = [0, 1, 2].map(|i| {
            let cin = cfg.width_at(tap_levels[i]);
            Conv2d::new(store, &format!("ds{i}"), cin, DS_CHANNELS, 1, true, ParamGroup::Segmentor, rng)
        });
        Ok(Self {
            cfg,
            activation,
            encoder,
            decoder,
            chunk_a,
            chunk_b,
            whole_head,
            subtype_head,
            ds_heads,
        })
    }

    /// Resolution levels of the three coarsest decoder outputs (bottleneck included).
    fn tap_levels(cfg: &BackboneConfig) -> [usize; 3] {
        let d = cfg.depth;
        [d - 1, d - 2, d - 3]
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn activation(&self) -> &ActivationParams {
        &self.activation
    }

    pub fn check_input(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = dims;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let m = self.cfg.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input extent {h}x{w} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    /// Encoder-decoder pass up to, but excluding, the output block.
    pub fn trunk(&self, g: &mut Graph, x: Var) -> TrunkVars {
        let d = self.cfg.depth;
        let mut skips = Vec::with_capacity(d);
        let mut h = x;
        for (l, [c0, c1]) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h);
            }
            h = c0.apply_relu(g, h);
            h = c1.apply_relu(g, h);
            skips.push(h);
        }
        let mut levels = vec![h; d];
        for l in (0..d - 1).rev() {
            let up = g.upsample(h, 2);
            let cat = g.concat(&[up, skips[l]]);
            let [c0, c1] = &self.decoder[l];
            h = c0.apply_relu(g, cat);
            h = c1.apply_relu(g, h);
            levels[l] = h;
        }
        let t = Self::tap_levels(&self.cfg);
        TrunkVars {
            features: h,
            taps: [levels[t[0]], levels[t[1]], levels[t[2]]],
        }
    }

    /// Two-stream output block on top of `features`.
    pub fn output_block(&self, g: &mut Graph, features: Var, opts: &ForwardOptions) -> HeadVars {
        let a = self.chunk_a.apply_relu(g, features);
        let b = self.chunk_b.apply_relu(g, features);
        let whole_logit = self.whole_head.apply(g, a);
        let mut whole = g.sigmoid(whole_logit);
        if let Some(v) = opts.whole_override {
            let dims = g.value(whole).dim();
            whole = g.input(Tensor::from_elem(dims, v));
        }
        let attention = if opts.uniform_attention {
            let dims = g.value(whole).dim();
            g.input(Tensor::ones(dims))
        } else {
            g.spatial_activation(whole, self.activation.gain)
        };
        let both = g.concat(&[a, b]);
        let weighted = g.mul_map(both, attention);
        let sub_logit = self.subtype_head.apply(g, weighted);
        let subtypes = g.sigmoid(sub_logit);
        HeadVars {
            whole,
            attention,
            subtypes,
        }
    }

    /// Auxiliary heads, each upsampled to the input resolution.
    pub fn deep_supervision(&self, g: &mut Graph, taps: &[Var; 3]) -> [Var; 3] {
        let full = g.value(taps[2]).dim().2 << Self::tap_levels(&self.cfg)[2];
        let mut out = [taps[0]; 3];
        for (i, (&tap, head)) in taps.iter().zip(&self.ds_heads).enumerate() {
            let logit = g.conv2d(tap, head);
            let p = g.sigmoid(logit);
            let f = full / g.value(tap).dim().2;
            out[i] = g.upsample(p, f);
        }
        out
    }

    /// Full forward pass without latent injection.
    pub fn forward_vars(&self, g: &mut Graph, x: Var, opts: &ForwardOptions) -> (HeadVars, [Var; 3]) {
        let trunk = self.trunk(g, x);
        let heads = self.output_block(g, trunk.features, opts);
        let ds = self.deep_supervision(g, &trunk.taps);
        (heads, ds)
    }

    /// Evaluation-mode forward pass returning concrete maps.
    pub fn forward(&self, store: &ParamStore, patch: &Tensor, opts: &ForwardOptions) -> Result<NetworkOutput> {
        self.check_input(patch.dim())?;
        let mut g = Graph::new(store, Mode::Inference);
        let x = g.input(patch.as_standard_layout().into_owned());
        let (heads, ds) = self.forward_vars(&mut g, x, opts);
        Ok(collect_output(&g, &heads, &ds))
    }
}

pub(crate) fn collect_output(g: &Graph, heads: &HeadVars, ds: &[Var; 3]) -> NetworkOutput {
    NetworkOutput {
        whole: g.value(heads.whole).clone(),
        subtypes: g.value(heads.subtypes).clone(),
        deep: [0, 1, 2].map(|i| g.value(ds[i]).clone()),
        attention: g.value(heads.attention).clone(),
    }
}
