//! Named, independent random streams derived from one user seed.
//!
//! Weights, inputs and sampled initial states each draw from their own
//! ChaCha stream, so a micro run and a macro run can share the weight stream
//! while the input sequence stays independent of it.
//!
//! SGD inputs dominate the cost of a micro run (one normal draw per input
//! coordinate per step), so they come from a faster Xoshiro256++ generator
//! seeded from the ChaCha input stream.

use rand::rngs::SmallRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Weights,
    Inputs,
    InitState,
    Oracle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Weights => 1,
            Stream::Inputs => 2,
            Stream::InitState => 3,
            Stream::Oracle => 4,
        }
    }
}

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Generator for SGD input vectors.
pub type InputRng = SmallRng;

pub fn input_stream(seed: u64) -> InputRng {
    SmallRng::from_rng(&mut stream(seed, Stream::Inputs))
}
