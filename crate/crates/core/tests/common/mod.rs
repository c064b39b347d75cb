#![allow(dead_code)]

use gnolr_core::data::{build_bundle, DatasetBundle, IngestConfig, RawInteraction, RawLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Planted progressive preference: one latent affinity `s = p_u · q_i`
/// drives both levels; a click needs `s + noise > τ₁`, a purchase needs a
/// click and `s + noise' > τ₂`.
#[derive(Debug, Clone)]
pub struct Synth {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    pub impressions_per_user: usize,
    pub noise: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub seed: u64,
}

impl Default for Synth {
    fn default() -> Self {
        Self {
            users: 300,
            items: 200,
            latent_dim: 4,
            impressions_per_user: 60,
            noise: 0.15,
            tau1: 0.35,
            tau2: 0.7,
            seed: 17,
        }
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Coarse cluster id of a latent vector: sign pattern of its first three
/// coordinates.
fn cluster(v: &[f64]) -> String {
    v.iter().take(3).map(|x| if *x >= 0.0 { '1' } else { '0' }).collect()
}

impl Synth {
    pub fn log(&self) -> RawLog {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let p: Vec<Vec<f64>> = (0..self.users).map(|_| unit(&mut rng, self.latent_dim)).collect();
        let q: Vec<Vec<f64>> = (0..self.items).map(|_| unit(&mut rng, self.latent_dim)).collect();
        let mut rows = Vec::new();
        for (u, pu) in p.iter().enumerate() {
            for _ in 0..self.impressions_per_user {
                let i = rng.gen_range(0..self.items);
                let s: f64 = pu.iter().zip(&q[i]).map(|(a, b)| a * b).sum();
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                let click = s + self.noise * e1 > self.tau1;
                let buy = click && s + self.noise * e2 > self.tau2;
                rows.push(RawInteraction {
                    user_id: format!("u{u}"),
                    item_id: format!("i{i}"),
                    timestamp: Some(rng.gen_range(0..1_000_000)),
                    user_features: vec![cluster(pu)],
                    item_features: vec![cluster(&q[i])],
                    feedback: vec![click as u8, buy as u8],
                });
            }
        }
        RawLog {
            user_feature_names: vec!["uf_cluster".into()],
            item_feature_names: vec!["if_cluster".into()],
            feedback_names: vec!["click".into(), "buy".into()],
            rows,
        }
    }

    pub fn bundle(&self) -> DatasetBundle {
        let log = self.log();
        let cfg = IngestConfig {
            feedback: log.feedback_names.clone(),
            seed: self.seed,
            ..IngestConfig::default()
        };
        build_bundle(&log, &cfg).expect("synthetic bundle")
    }
}
