//! Fixtures shared by the benchmarks.

use ndarray::{Array3, Array4, Axis};
use vesselnet::{preprocess, PhantomSpec, PreprocessConfig, RunConfig, VesselModel};

/// A rendered phantom of the given size.
pub fn phantom(size: usize, seed: u64) -> vesselnet::Phantom {
    let spec = PhantomSpec {
        height: size,
        width: size,
        seed,
        ..Default::default()
    };
    vesselnet::synth::generate_phantom(&spec).expect("valid phantom spec")
}

/// Preprocessed input planes of a phantom.
pub fn stack(size: usize) -> Array3<f64> {
    let p = phantom(size, 1);
    preprocess::preprocess(&p.image, &PreprocessConfig::default())
        .expect("preprocessing succeeds")
        .channels()
        .clone()
}

/// The small configuration used for desk-scale training.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone.base_width = 8;
    cfg.backbone.depth = 3;
    cfg.latent.encoder_width = 8;
    cfg.train.batch_size = 4;
    cfg
}

pub fn desk_model() -> VesselModel {
    VesselModel::new(desk_config().model(), 0).expect("valid model config")
}

/// `n` copies of one 64x64 phantom window and its targets.
pub fn batch(n: usize) -> (Array4<f64>, Array4<f64>) {
    let p = phantom(128, 2);
    let s = preprocess::preprocess(&p.image, &PreprocessConfig::default()).unwrap();
    let x = s.channels().slice(ndarray::s![.., 32..96, 32..96]).to_owned();
    let t = p.targets.slice(ndarray::s![.., 32..96, 32..96]).to_owned();
    let rep = |a: &Array3<f64>| {
        let views: Vec<_> = (0..n).map(|_| a.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    };
    (rep(&x), rep(&t))
}
