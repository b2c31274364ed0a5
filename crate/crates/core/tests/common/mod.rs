#![allow(dead_code)]

use deshadow::backbone::BackboneMode;
use deshadow::config::Config;
use deshadow::net::mix_seed;
use deshadow::phantom::{self, PhantomSpec, ShadowStart};
use deshadow::trainer::TrainSample;

/// 256x256 inputs (the remover needs eight halvings) with very narrow
/// networks so a whole cycle runs in seconds.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.phantom.height = 256;
    cfg.phantom.width = 256;
    cfg.augment.out_size = (256, 256);
    cfg.train.lr = 1e-3;
    cfg.train.cycles = 1;
    cfg.detector.width_divisor = 16;
    cfg.remover.width_divisor = 32;
    cfg.backbone.mode = BackboneMode::RandomSeeded;
    cfg.backbone.width_divisor = 16;
    cfg
}

pub struct PhantomCase {
    pub sample: TrainSample,
    pub ground_truth: deshadow::imaging::BScan,
    pub layer_map: phantom::LayerMap,
}

/// Shadowed phantoms with masks and ground truth, sized per `spec`.
pub fn phantom_cases(spec: &PhantomSpec, n: usize, seed: u64) -> Vec<PhantomCase> {
    (0..n)
        .map(|i| {
            let ph = phantom::generate_phantom(&PhantomSpec {
                rng_seed: mix_seed(seed, i as u64),
                ..spec.clone()
            })
            .unwrap();
            let pair = phantom::make_validation_pair(
                &ph.image,
                2,
                mix_seed(seed ^ 0xabc, i as u64),
                ShadowStart::Surface(&ph.layer_map),
            )
            .unwrap();
            let stem = format!("p{i:03}");
            PhantomCase {
                sample: TrainSample {
                    stem: stem.clone(),
                    image: pair.shadowed.with_source_id(&stem),
                    mask: pair.mask,
                },
                ground_truth: pair.ground_truth,
                layer_map: ph.layer_map,
            }
        })
        .collect()
}

pub fn samples(cfg: &Config, n: usize, seed: u64) -> Vec<TrainSample> {
    phantom_cases(&cfg.phantom, n, seed)
        .into_iter()
        .map(|c| c.sample)
        .collect()
}
