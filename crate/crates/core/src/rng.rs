use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Algorithm name recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha, seed_from_u64)";

pub type LabRng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream for parallel worker `index`: seed = base + index.
pub fn worker_rng(base_seed: u64, index: u64) -> LabRng {
    rng_from_seed(base_seed.wrapping_add(index))
}
