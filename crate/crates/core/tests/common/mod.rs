#![allow(dead_code)]

use supforge::scene::{generate_dataset, SceneConfig, StereoSample};
use supforge::{StereoNet, StereoNetConfig};

pub fn small_scene() -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 64,
        d_max: 8,
        ..SceneConfig::default()
    }
}

pub fn small_net_config(seed: u64) -> StereoNetConfig {
    StereoNetConfig {
        channels: 4,
        d_max: 8,
        seed,
        ..StereoNetConfig::default()
    }
}

pub fn small_samples(n: usize, base_seed: u64) -> Vec<StereoSample> {
    generate_dataset(&small_scene(), n, base_seed).unwrap()
}

/// An untrained net flagged as trained so attack code accepts it.
pub fn pretend_trained(cfg: &StereoNetConfig) -> StereoNet {
    let mut net = StereoNet::init(cfg).unwrap();
    net.trained = true;
    net
}
