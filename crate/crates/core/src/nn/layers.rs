use rand::Rng;

use super::params::{Init, ParamGroup, ParamId, ParamStore, StatsId};

/// Square convolution with "same" zero padding and unit stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::He(fan_in),
            group,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_channels], Init::Const(0.0), group, rng));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub channels: usize,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[channels], Init::Const(1.0), group, rng);
        let beta = store.add(format!("{name}.beta"), &[channels], Init::Const(0.0), group, rng);
        let stats = store.add_stats(format!("{name}.running"), channels);
        Self {
            gamma,
            beta,
            stats,
            channels,
        }
    }
}
