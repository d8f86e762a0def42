//! Synthetic labelled dataset with a fixed per-class train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{make_shape, PointCloud, ShapeKind};

/// Salt separating held-out evaluation clouds from the training corpus.
pub const HELD_OUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct Sample {
    pub cloud: PointCloud,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Generator seed of the `index`-th cloud of `kind`.
pub fn cloud_seed(seed: u64, kind: ShapeKind, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(kind.name().as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for &(kind, count) in &cfg.dataset {
            let mut samples = (0..count)
                .map(|i| {
                    Ok(Sample {
                        cloud: make_shape(kind, cfg.n_points, cloud_seed(cfg.seed, kind, i))?,
                        class: kind.class_id(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            samples.shuffle(&mut split_rng);
            let n_train = ((count as f64) * cfg.train_fraction).round() as usize;
            val.extend(samples.split_off(n_train.min(count)));
            train.extend(samples);
        }
        Ok(Dataset { train, val })
    }

    /// Hash over every point, label and class, in order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.val) {
            h.update((s.class as u64).to_le_bytes());
            for p in &s.cloud.points {
                for v in p {
                    h.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .map(|s| s.class + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Fresh clouds of one kind that never appear in the training corpus.
pub fn held_out(cfg: &RunConfig, kind: ShapeKind, count: usize) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| {
            make_shape(
                kind,
                cfg.n_points,
                cloud_seed(cfg.seed ^ HELD_OUT_SALT, kind, i),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_deterministic() {
        let cfg = RunConfig::toy();
        let a = Dataset::generate(&cfg).unwrap();
        let b = Dataset::generate(&cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.val.len(), 4);
        assert_eq!(a.classes(), 4);
        for class in 0..4 {
            assert_eq!(a.val.iter().filter(|s| s.class == class).count(), 1);
        }
    }

    #[test]
    fn held_out_differs_from_training() {
        let cfg = RunConfig::toy();
        let data = Dataset::generate(&cfg).unwrap();
        let fresh = held_out(&cfg, ShapeKind::Plane, 2).unwrap();
        for s in data.train.iter().chain(&data.val) {
            assert!(fresh.iter().all(|c| c.points != s.cloud.points));
        }
    }
}
