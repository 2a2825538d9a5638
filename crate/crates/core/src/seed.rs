//! Deterministic seed derivation. Every random stream in a run descends from
//! one master seed through named labels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Stable 64-bit seed for `label` under `master`.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// The named sub-seeds of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub generation: u64,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub background: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            generation: derive(master, "generation"),
            split: derive(master, "split"),
            init: derive(master, "init"),
            shuffle: derive(master, "shuffle"),
            dropout: derive(master, "dropout"),
            background: derive(master, "background"),
        }
    }

    /// Seeds for one training run identified by `key` (config and fold).
    pub fn training(&self, key: &str) -> TrainSeeds {
        TrainSeeds {
            init: derive(self.init, key),
            shuffle: derive(self.shuffle, key),
            dropout: derive(self.dropout, key),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl TrainSeeds {
    pub fn from_one(seed: u64) -> Self {
        SeedPlan::from_master(seed).training("")
    }
}
