//! Crate-wide deterministic random number generation.
//!
//! Everything stochastic in this workspace draws from a ChaCha stream cipher
//! seeded explicitly, so every experiment is exactly reproducible from its
//! seed across platforms.

pub use rand::Rng;
pub use rand::SeedableRng;

pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
