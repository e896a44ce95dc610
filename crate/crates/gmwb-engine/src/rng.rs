//! Deterministic, splittable random streams.
//!
//! Every draw in the engine is keyed by (master seed, particle id, purpose,
//! step), so the output of a run is a pure function of its configuration, no
//! matter how particles are scheduled across threads. Child particles created
//! by resampling receive fresh ids and therefore fresh streams; parent
//! sequences are never reused.
//!
//! Gaussian draws can optionally be pregenerated into a [`NormalPool`], which
//! replays the exact per-step keyed sequence and is therefore bit-identical
//! to streaming mode.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Error;

/// Reserved particle id for ensemble-level draws (resampling uniforms and
/// permutations), which belong to no single particle.
pub const ENSEMBLE_STREAM_ID: u64 = u64::MAX;

/// What a stream's draws are used for. Separating purposes keeps draw counts
/// in one role from shifting the sequences of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    /// Gaussian increments of the Ornstein-Uhlenbeck variance components.
    OuIncrement,
    /// The extra Gaussian driving the kernel's stochastic integral.
    StochIntegral,
    /// Poisson jump counts.
    JumpCount,
    /// Gaussian log jump sizes.
    JumpSize,
    /// Stratified uniforms consumed by resampling.
    BranchUniform,
    /// Random permutations assigning strata to particles.
    Permutation,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::OuIncrement => 1,
            StreamPurpose::StochIntegral => 2,
            StreamPurpose::JumpCount => 3,
            StreamPurpose::JumpSize => 4,
            StreamPurpose::BranchUniform => 5,
            StreamPurpose::Permutation => 6,
        }
    }
}

/// Identity of one substream: (master seed, particle id, purpose). Stepping
/// is folded in by [`StreamKey::rng_at`].
#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    pub master_seed: u64,
    pub particle_id: u64,
    pub purpose: StreamPurpose,
}

/// 64-bit avalanche mix (the splitmix64 finalizer).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

impl StreamKey {
    pub fn new(master_seed: u64, particle_id: u64, purpose: StreamPurpose) -> Self {
        StreamKey {
            master_seed,
            particle_id,
            purpose,
        }
    }

    /// Generator for this stream at a given step (for ensemble purposes, the
    /// resampling round). Each state word is an independent hash of the full
    /// key, so distinct keys collide only with negligible probability.
    pub fn rng_at(&self, step: u32) -> Xoshiro256PlusPlus {
        let tag = (self.purpose.tag() << 40) ^ u64::from(step);
        let mut seed_bytes = [0u8; 32];
        for (j, chunk) in seed_bytes.chunks_exact_mut(8).enumerate() {
            let lane = mix64(self.master_seed ^ GOLDEN.wrapping_mul(j as u64 + 1));
            let word = mix64(mix64(lane ^ self.particle_id) ^ tag);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Xoshiro256PlusPlus::from_seed(seed_bytes)
    }
}

/// One standard-normal draw.
#[inline]
pub fn draw_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One uniform draw on `[lo, hi)`.
#[inline]
pub fn draw_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// One Poisson draw. A zero mean returns 0 without consuming randomness.
#[inline]
pub fn draw_poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite Poisson mean");
    dist.sample(rng) as u64
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(rng);
    idx
}

/// A pregenerated block of standard-normal draws consumed in order.
///
/// The pool replays exactly the per-step sequences that streaming mode would
/// draw, in consecutive blocks of `per_step` values keyed to steps 1, 2, ...
/// Exhaustion is an error, never a silent wraparound.
#[derive(Debug, Clone)]
pub struct NormalPool {
    values: Vec<f64>,
    per_step: usize,
    cursor: usize,
}

impl NormalPool {
    /// Pregenerate `count` draws for `key`, laid out in step order with
    /// `per_step` draws per step (the last block may be partial).
    pub fn pregenerate(key: &StreamKey, count: usize, per_step: usize) -> NormalPool {
        assert!(per_step > 0, "per_step must be positive");
        let mut values = Vec::with_capacity(count);
        let mut step = 1u32;
        while values.len() < count {
            let mut rng = key.rng_at(step);
            let take = per_step.min(count - values.len());
            for _ in 0..take {
                values.push(draw_normal(&mut rng));
            }
            step += 1;
        }
        NormalPool {
            values,
            per_step,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.values.len() - self.cursor
    }

    fn take(&mut self, count: usize, out: &mut [f64]) -> Result<(), Error> {
        if self.cursor + count > self.values.len() {
            return Err(Error::PoolExhausted {
                requested: count,
                available: self.values.len() - self.cursor,
            });
        }
        out[..count].copy_from_slice(&self.values[self.cursor..self.cursor + count]);
        self.cursor += count;
        Ok(())
    }
}

/// Where a kernel purpose gets its Gaussian draws: generated on the fly from
/// the keyed stream, or served from a pregenerated pool.
#[derive(Debug)]
pub enum NormalSource<'a> {
    Streaming(StreamKey),
    Pooled(&'a mut NormalPool),
}

impl NormalSource<'_> {
    /// Fill `out[..count]` with this purpose's draws for one step. Pooled
    /// sources rely on the caller visiting steps in order with a consistent
    /// per-step count; streaming sources key the generator by `step` directly.
    pub fn step_draws(&mut self, step: u32, count: usize, out: &mut [f64]) -> Result<(), Error> {
        match self {
            NormalSource::Streaming(key) => {
                let mut rng = key.rng_at(step);
                for slot in out[..count].iter_mut() {
                    *slot = draw_normal(&mut rng);
                }
                Ok(())
            }
            NormalSource::Pooled(pool) => {
                debug_assert_eq!(
                    count, pool.per_step,
                    "pooled step draws must match the pregenerated layout"
                );
                pool.take(count, out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(id: u64, purpose: StreamPurpose) -> StreamKey {
        StreamKey::new(0x5eed_0123, id, purpose)
    }

    #[test]
    fn same_key_same_sequence() {
        let k = key(7, StreamPurpose::OuIncrement);
        let a: Vec<f64> = {
            let mut rng = k.rng_at(3);
            (0..10).map(|_| draw_normal(&mut rng)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = k.rng_at(3);
            (0..10).map(|_| draw_normal(&mut rng)).collect()
        };
        assert_eq!(a, b, "a keyed stream must be perfectly repeatable");
    }

    #[test]
    fn distinct_keys_distinct_sequences() {
        let base = key(7, StreamPurpose::OuIncrement);
        let other_id = key(8, StreamPurpose::OuIncrement);
        let other_purpose = key(7, StreamPurpose::StochIntegral);
        let first = |k: &StreamKey, s: u32| {
            let mut rng = k.rng_at(s);
            draw_normal(&mut rng)
        };
        assert_ne!(first(&base, 1), first(&other_id, 1));
        assert_ne!(first(&base, 1), first(&other_purpose, 1));
        assert_ne!(first(&base, 1), first(&base, 2));
    }

    #[test]
    fn substreams_are_empirically_uncorrelated() {
        // Correlation between different particle ids over 1e5 draws.
        let n = 100_000;
        let ka = key(1, StreamPurpose::OuIncrement);
        let kb = key(2, StreamPurpose::OuIncrement);
        let mut ra = ka.rng_at(1);
        let mut rb = kb.rng_at(1);
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let a = draw_normal(&mut ra);
            let b = draw_normal(&mut rb);
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let var_a = saa / nf - (sa / nf) * (sa / nf);
        let var_b = sbb / nf - (sb / nf) * (sb / nf);
        let corr = cov / (var_a * var_b).sqrt();
        assert!(
            corr.abs() < 0.01,
            "cross-stream correlation {corr} should be within +/- 0.01"
        );
    }

    #[test]
    fn normal_moments() {
        let k = key(3, StreamPurpose::StochIntegral);
        let mut rng = k.rng_at(1);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = draw_normal(&mut rng);
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let bound = 4.0 / (n as f64).sqrt();
        assert!(mean.abs() < bound, "sample mean {mean} outside CLT bound {bound}");
        assert!((var - 1.0).abs() < 0.01, "sample variance {var} should be near 1");
    }

    #[test]
    fn poisson_zero_mean() {
        let mut rng = key(4, StreamPurpose::JumpCount).rng_at(1);
        assert_eq!(draw_poisson(&mut rng, 0.0), 0);
    }

    #[test]
    fn poisson_small_mean_moments() {
        let mut rng = key(5, StreamPurpose::JumpCount).rng_at(1);
        let mean = 0.21 / 250.0;
        let n = 2_000_000;
        let total: u64 = (0..n).map(|_| draw_poisson(&mut rng, mean)).sum();
        let sample_mean = total as f64 / n as f64;
        let se = (mean / n as f64).sqrt();
        assert!(
            (sample_mean - mean).abs() < 5.0 * se,
            "Poisson sample mean {sample_mean} should be near {mean}"
        );
    }

    #[test]
    fn permutation_of_one_is_identity() {
        let mut rng = key(6, StreamPurpose::Permutation).rng_at(1);
        assert_eq!(random_permutation(&mut rng, 1), vec![0]);
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = key(6, StreamPurpose::Permutation).rng_at(2);
        let mut p = random_permutation(&mut rng, 100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<u32>>());
    }

    #[test]
    fn uniform_range() {
        let mut rng = key(9, StreamPurpose::BranchUniform).rng_at(1);
        for _ in 0..1000 {
            let u = draw_uniform(&mut rng, 0.25, 0.5);
            assert!((0.25..0.5).contains(&u));
        }
    }

    #[test]
    fn pool_matches_streaming_bitwise() {
        let k = key(11, StreamPurpose::OuIncrement);
        let per_step = 4;
        let steps = 25;
        let mut pool = NormalPool::pregenerate(&k, per_step * steps, per_step);
        let mut pooled = NormalSource::Pooled(&mut pool);
        let mut streaming = NormalSource::Streaming(k);
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        for step in 1..=steps as u32 {
            pooled.step_draws(step, per_step, &mut a).unwrap();
            streaming.step_draws(step, per_step, &mut b).unwrap();
            assert_eq!(a, b, "pooled draws must replay the streaming sequence exactly");
        }
    }

    #[test]
    fn pool_exhaustion_is_an_error() {
        let k = key(12, StreamPurpose::OuIncrement);
        let mut pool = NormalPool::pregenerate(&k, 1, 1);
        let mut out = [0.0; 1];
        pool.take(1, &mut out).unwrap();
        let err = pool.take(1, &mut out).unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { .. }));
    }

    #[test]
    fn pool_full_consumption_moves_cursor_to_count() {
        let k = key(13, StreamPurpose::OuIncrement);
        let count = 1000;
        let mut pool = NormalPool::pregenerate(&k, count, 8);
        let mut buf = [0.0; 8];
        let mut taken = 0;
        while taken < count {
            let step = 8.min(count - taken);
            pool.take(step, &mut buf).unwrap();
            taken += step;
        }
        assert_eq!(pool.cursor(), count);
        assert_eq!(pool.remaining(), 0);
    }
}
