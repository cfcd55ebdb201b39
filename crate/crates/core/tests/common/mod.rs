#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tdfn::data::{Dataset, Split};
use tdfn::geometry::{Architecture, Geometry};
use tdfn::model::{is_fpg_param, TdfnModel};

/// Full geometry with a shallow, narrow network so tests stay fast.
pub fn small_arch() -> Architecture {
    Architecture {
        layers: 1,
        heads: 2,
        ff_dim: 16,
        classifier_hidden: 8,
        reconstructor_hidden: 8,
        fpg_hidden: 8,
    }
}

pub fn small_model(seed: u64) -> TdfnModel {
    TdfnModel::new(Geometry::default(), small_arch(), seed).unwrap()
}

/// Random images whose brightest quadrant encodes the label mod 4.
pub fn synthetic_dataset(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * 1024);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..10usize);
        let quad = label % 4;
        for r in 0..32 {
            for c in 0..32 {
                let q = (r / 16) * 2 + c / 16;
                let base: f32 = if q == quad { 0.8 } else { 0.1 };
                images.push((base + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(32, Split::Train, images, labels).unwrap()
}

pub fn random_image(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1024).map(|_| rng.random::<f32>()).collect()
}

/// Hash of the bytes of every parameter accepted by `filter`, in store
/// order, names included.
pub fn param_hash(model: &TdfnModel, filter: impl Fn(&str) -> bool) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in model.store.iter().filter(|(n, _)| filter(n)) {
        h.update(name.as_bytes());
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn non_fpg_hash(model: &TdfnModel) -> [u8; 32] {
    param_hash(model, |n| !is_fpg_param(n))
}
