pub mod data;
pub mod error;
pub mod interpret;
pub mod kan;
pub mod metrics;
pub mod mcr;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

use rand::SeedableRng;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, Var};

/// Portable seeded generator used for initialisation, dropout and data.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
