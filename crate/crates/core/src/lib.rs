//! Vector map priors: encoding polylines with masked intra/inter-instance
//! attention, denoising pre-training, fusion of encoded priors into query
//! grids, and the Chamfer-AP / IoU metrics used to score vector maps.

pub mod autodiff;
pub mod eval;
pub mod fusion;
pub mod map_io;
pub mod pipeline;
pub mod pretrain;
pub mod uve;
pub mod vector;

use sha2::{Digest, Sha256};

/// Per-stage seed: the first 8 bytes (little endian) of
/// `sha256("{seed}:{stage}")`.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
