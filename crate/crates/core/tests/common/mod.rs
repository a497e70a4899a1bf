#![allow(dead_code)]

use epitoken::backbone::{BackboneConfig, BackboneMode};
use epitoken::epidata::{synth_sir, DatasetOptions, EpidemicDataset, Normalization, SirParams};
use epitoken::model::ModelConfig;

pub fn dataset(n: usize, t: usize, w: usize, seed: u64) -> EpidemicDataset<f64> {
    let opts = DatasetOptions {
        window: w,
        epsilon: 0.0,
        normalize: Normalization::PerRegionMax,
        scale_days: None,
    };
    synth_sir(n, t, SirParams::default(), seed, opts).unwrap()
}

pub fn config(n: usize, w: usize, width: usize, mode: BackboneMode) -> ModelConfig {
    let backbone = BackboneConfig {
        mode,
        depth: 2,
        width,
        heads: 2,
        max_positions: 32,
        seed: 3,
    };
    ModelConfig::new(n, w, backbone, 17)
}
