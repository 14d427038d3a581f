//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a root
//! seed and a named purpose. ChaCha is counter based, so a stream is fully
//! determined by `(key, stream index)` and per-chain or per-worker streams are
//! reproducible regardless of scheduling.
//!
//! Sub-stream names are part of the reproducibility contract: `data`, `init`,
//! `training`, `sampling`, `diagnostics` and `perturbation`. Changing a name
//! changes every downstream number.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Data,
    Init,
    Training,
    Sampling,
    Diagnostics,
    Perturbation,
}

impl Purpose {
    pub fn name(self) -> &'static str {
        match self {
            Purpose::Data => "data",
            Purpose::Init => "init",
            Purpose::Training => "training",
            Purpose::Sampling => "sampling",
            Purpose::Diagnostics => "diagnostics",
            Purpose::Perturbation => "perturbation",
        }
    }
}

/// Root of all randomness for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream `index` of the sub-stream named by `purpose`.
    pub fn stream(&self, purpose: Purpose, index: u64) -> StreamRng {
        keyed_stream(&[&self.seed.to_le_bytes(), purpose.name().as_bytes()], index)
    }

    /// A derived 64-bit key, used where a component needs its own key space.
    pub fn derive_key(&self, purpose: Purpose, label: &str) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(purpose.name().as_bytes())
            .chain_update(label.as_bytes())
            .finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// ChaCha8 stream keyed by the SHA-256 of `parts`, positioned at stream `index`.
pub fn keyed_stream(parts: &[&[u8]], index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}
