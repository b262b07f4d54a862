//! Keyed, stateless Gaussian and Poisson draws.
//!
//! Every draw is a pure function of `(seed, tag, index, counter)`: the tag
//! selects a ChaCha8 key, the index (trajectory number) selects the ChaCha
//! stream and the counter (step number) selects the block position inside the
//! stream. Nothing is consumed sequentially, so the measurement record does not
//! depend on how many trajectories exist, which solvers run, or how work is
//! split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};

/// 32-bit words reserved per draw. Rejection samplers (ziggurat, PTRS) may
/// consume more than one word pair; 64 words keeps neighbouring counters from
/// ever overlapping in practice.
const WORDS_PER_DRAW: u128 = 64;

/// Independent noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    /// Measurement innovation `dW`, shared by every method.
    Measurement,
    /// First fictitious noise `dV1`, one stream per trajectory.
    Fictitious1,
    /// Second fictitious noise `dV2`, one stream per trajectory.
    Fictitious2,
    /// Initial number sampling of the number-phase ensemble.
    InitialNumber,
}

impl StreamTag {
    pub fn label(self) -> &'static str {
        match self {
            StreamTag::Measurement => "W",
            StreamTag::Fictitious1 => "V1",
            StreamTag::Fictitious2 => "V2",
            StreamTag::InitialNumber => "N0",
        }
    }

    fn code(self) -> u64 {
        self.label().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, tag: StreamTag) -> [u8; 32] {
    let mut state = seed ^ tag.code().rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// One keyed stream: `(seed, tag, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: [u8; 32],
    index: u64,
    tag: StreamTag,
}

impl Stream {
    pub fn tag(&self) -> StreamTag {
        self.tag
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    fn rng_at(&self, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.index);
        rng.set_word_pos(counter as u128 * WORDS_PER_DRAW);
        rng
    }

    /// Standard normal draw for `counter`.
    pub fn standard_normal(&self, counter: u64) -> f64 {
        self.rng_at(counter).sample(StandardNormal)
    }
}

/// Factory for the streams of one seed.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    seed: u64,
    measurement_key: [u8; 32],
    v1_key: [u8; 32],
    v2_key: [u8; 32],
    initial_key: [u8; 32],
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        NoiseStreams {
            seed,
            measurement_key: derive_key(seed, StreamTag::Measurement),
            v1_key: derive_key(seed, StreamTag::Fictitious1),
            v2_key: derive_key(seed, StreamTag::Fictitious2),
            initial_key: derive_key(seed, StreamTag::InitialNumber),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, tag: StreamTag, index: u64) -> Stream {
        let key = match tag {
            StreamTag::Measurement => self.measurement_key,
            StreamTag::Fictitious1 => self.v1_key,
            StreamTag::Fictitious2 => self.v2_key,
            StreamTag::InitialNumber => self.initial_key,
        };
        Stream { key, index, tag }
    }

    /// The shared measurement stream.
    pub fn measurement(&self) -> Stream {
        self.stream(StreamTag::Measurement, 0)
    }

    /// Measurement increments `dW_1..=dW_steps`; element `k - 1` drives the
    /// step from `t_{k-1}` to `t_k`.
    pub fn measurement_path(&self, steps: usize, dt: f64) -> Result<Vec<f64>> {
        let w = self.measurement();
        (0..steps)
            .map(|k| wiener_increment(&w, k as u64, dt))
            .collect()
    }

    /// Fills `out[j]` with the increment of trajectory `first + j` at `step`.
    pub fn fill_fictitious(
        &self,
        tag: StreamTag,
        first: usize,
        step: usize,
        dt: f64,
        out: &mut [f64],
    ) {
        let scale = dt.sqrt();
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = scale
                * self
                    .stream(tag, (first + j) as u64)
                    .standard_normal(step as u64);
        }
    }
}

/// Wiener increment `~ Normal(0, dt)` for `step_index` of `stream`.
pub fn wiener_increment(stream: &Stream, step_index: u64, dt: f64) -> Result<f64> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::Usage(format!(
            "wiener increment needs dt > 0, got {dt}"
        )));
    }
    Ok(dt.sqrt() * stream.standard_normal(step_index))
}

/// Poisson(`lambda`) draw number `draw_index` of `stream`.
pub fn sample_poisson(lambda: f64, stream: &Stream, draw_index: u64) -> Result<u64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Usage(format!(
            "poisson rate must be finite and >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(lambda).map_err(|e| Error::Usage(e.to_string()))?;
    let mut rng = stream.rng_at(draw_index);
    let draw: f64 = dist.sample(&mut rng);
    Ok(draw as u64)
}
