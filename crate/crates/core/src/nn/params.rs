use ndarray::Array1;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// Which optimizer population a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The segmentation network.
    Segmentor,
    /// Prior and posterior latent encoders.
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub value: Array1<f64>,
}

/// Batch-normalization running statistics. Not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
}

pub(crate) enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Const(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let value = match init {
            Init::He(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                Array1::from_shape_fn(len, |_| {
                    let s: f64 = StandardNormal.sample(rng);
                    s * std
                })
            }
            Init::Const(c) => Array1::from_elem(len, c),
        };
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn running(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    /// Number of scalar trainable values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Squared L2 norm over the parameters of the selected groups.
    pub fn sq_norm(&self, groups: &[ParamGroup]) -> f64 {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self.params.iter().map(|p| Array1::zeros(p.value.len())).collect(),
        }
    }

    /// Blend batch statistics into the running estimates.
    pub(crate) fn apply_stat_updates(&mut self, updates: &[(StatsId, Array1<f64>, Array1<f64>)], momentum: f64) {
        for (id, mean, var) in updates {
            let s = &mut self.stats[id.0];
            s.mean.zip_mut_with(mean, |r, &b| *r = (1.0 - momentum) * *r + momentum * b);
            s.var.zip_mut_with(var, |r, &b| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }
}

/// Parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array1<f64> {
        &self.grads[id.0]
    }

    pub fn by_index(&self, index: usize) -> &Array1<f64> {
        &self.grads[index]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Array1<f64> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    /// Adds `coef * θ` for every parameter in `groups` (gradient of `coef/2 ‖θ‖²`).
    pub fn add_weight_decay(&mut self, store: &ParamStore, groups: &[ParamGroup], coef: f64) {
        if coef == 0.0 {
            return;
        }
        for (g, p) in self.grads.iter_mut().zip(store.params()) {
            if groups.contains(&p.group) {
                g.scaled_add(coef, &p.value);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
