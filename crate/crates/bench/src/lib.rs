//! Shared fixtures for the criterion benches.

use std::collections::BTreeMap;

use madm_core::models::{Denoiser25D, Denoiser25DConfig, EpsModel, Prior3D, Prior3DConfig, PriorModel};
use madm_core::sampler::ModelBank;
use madm_core::volume::{ViewAxis, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub denoisers: BTreeMap<ViewAxis, Denoiser25D<f32>>,
    pub prior: Prior3D<f32>,
    pub input: Volume,
}

impl Fixture {
    pub fn desk_like() -> Fixture {
        let mut denoisers = BTreeMap::new();
        for (i, v) in ViewAxis::ALL.into_iter().enumerate() {
            let cfg = Denoiser25DConfig {
                context_radius: 4,
                base_channels: 8,
                depth: 2,
                temb_dim: 32,
                seed: 40 + i as u64,
            };
            denoisers.insert(v, Denoiser25D::new_with(cfg, false));
        }
        let prior =
            Prior3D::new_with(Prior3DConfig { base_channels: 4, depth: 2, seed: 50 }, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut input = Volume::random_normal((48, 48, 48), &mut rng);
        input.set_meta_f64("norm_lo", 0.0);
        input.set_meta_f64("norm_hi", 2.0);
        Fixture { denoisers, prior, input }
    }

    pub fn bank(&self) -> ModelBank<'_> {
        let mut views: BTreeMap<ViewAxis, &dyn EpsModel> = BTreeMap::new();
        for (v, m) in &self.denoisers {
            views.insert(*v, m as &dyn EpsModel);
        }
        ModelBank { views, prior: Some(&self.prior as &dyn PriorModel) }
    }
}
