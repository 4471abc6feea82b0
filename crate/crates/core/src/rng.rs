//! Reproducible random streams.
//!
//! Every replicate of every experiment is driven by a `(seed, stream_id)` pair. The
//! generator is ChaCha8 keyed by the seed with the stream id selecting one of its
//! 2^64 independent streams, so replicates can be run on any number of threads and
//! still produce identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn generator(&self) -> StreamRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(self.stream_id);
        StreamRng { inner }
    }
}

/// The generator behind an [`RngStream`].
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Exponential with the given rate by inversion, `-ln(1 - U) / rate`.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        let u = self.uniform();
        -(1.0 - u).ln() / rate
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}
