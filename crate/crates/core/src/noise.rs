//! Counter-based noise streams.
//!
//! Every draw is a pure function of `(seed, replicate, substream, member, t)`:
//! the first four select a ChaCha8 key and `t` selects the ChaCha stream, so
//! any member/time pair can be sampled in any order or in parallel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::SystemModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Substream {
    TruthInit,
    TruthProcess,
    TruthMeasurement,
    CopyInit,
    CopyProcess,
    CopyMeasurement,
}

impl Substream {
    fn id(self) -> u64 {
        match self {
            Substream::TruthInit => 1,
            Substream::TruthProcess => 2,
            Substream::TruthMeasurement => 3,
            Substream::CopyInit => 101,
            Substream::CopyProcess => 102,
            Substream::CopyMeasurement => 103,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseStreams {
    seed: u64,
    replicate: u64,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed, replicate: 0 }
    }

    /// Streams for replicate `r`, keyed by `(seed, r)`.
    pub fn for_replicate(self, replicate: u64) -> Self {
        Self { replicate, ..self }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicate(&self) -> u64 {
        self.replicate
    }

    fn rng(&self, sub: Substream, member: u64, t: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replicate.to_le_bytes());
        key[16..24].copy_from_slice(&sub.id().to_le_bytes());
        key[24..32].copy_from_slice(&member.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(t);
        rng
    }

    /// `dim` i.i.d. standard normals for the given key.
    pub fn standard_normals(&self, sub: Substream, member: u64, t: u64, dim: usize) -> DVector<f64> {
        let mut rng = self.rng(sub, member, t);
        DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
    }

    /// A draw from `N(0, factor·factorᵀ)`.
    pub fn gaussian(&self, sub: Substream, member: u64, t: u64, factor: &DMatrix<f64>) -> DVector<f64> {
        factor * self.standard_normals(sub, member, t, factor.ncols())
    }
}

/// Process- and measurement-noise copies `(ξ̃_t, ζ̃_t)` for one ensemble member.
pub fn draw_copies(
    streams: &NoiseStreams,
    model: &SystemModel,
    member: usize,
    t: usize,
) -> (DVector<f64>, DVector<f64>) {
    let step = model.at(t);
    let xi = streams.gaussian(Substream::CopyProcess, member as u64, t as u64, step.q_sqrt);
    let zeta = streams.gaussian(Substream::CopyMeasurement, member as u64, t as u64, step.r_sqrt);
    (xi, zeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_reproducible() {
        let s = NoiseStreams::new(7);
        let a = s.standard_normals(Substream::CopyProcess, 3, 11, 4);
        let b = s.standard_normals(Substream::CopyProcess, 3, 11, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn keys_separate_streams() {
        let s = NoiseStreams::new(7);
        let base = s.standard_normals(Substream::CopyProcess, 3, 11, 4);
        assert_ne!(base, s.standard_normals(Substream::CopyProcess, 4, 11, 4));
        assert_ne!(base, s.standard_normals(Substream::CopyProcess, 3, 12, 4));
        assert_ne!(base, s.standard_normals(Substream::CopyMeasurement, 3, 11, 4));
        assert_ne!(base, s.for_replicate(1).standard_normals(Substream::CopyProcess, 3, 11, 4));
        assert_ne!(base, NoiseStreams::new(8).standard_normals(Substream::CopyProcess, 3, 11, 4));
    }

    #[test]
    fn zero_q_gives_exact_zero_copies() {
        let model = SystemModel::scalar_benchmark();
        let (xi, _) = draw_copies(&NoiseStreams::new(1), &model, 0, 0);
        assert_eq!(xi[0], 0.0);
    }

    #[test]
    fn members_are_uncorrelated() {
        let s = NoiseStreams::new(2024);
        let n = 100_000;
        let (mut sxy, mut sxx, mut syy, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for t in 0..n {
            let x = s.standard_normals(Substream::CopyProcess, 0, t, 1)[0];
            let y = s.standard_normals(Substream::CopyProcess, 1, t, 1)[0];
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
            sx += x;
            sy += y;
        }
        let nf = n as f64;
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
        assert!(corr.abs() < 3.0 / nf.sqrt(), "corr = {corr}");
    }

    #[test]
    fn truth_and_copy_streams_uncorrelated() {
        let s = NoiseStreams::new(99);
        let n = 100_000u64;
        let mut sxy = 0.0;
        for t in 0..n {
            let x = s.standard_normals(Substream::TruthProcess, 0, t, 1)[0];
            let y = s.standard_normals(Substream::CopyProcess, 0, t, 1)[0];
            sxy += x * y;
        }
        let corr = sxy / n as f64;
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr = {corr}");
    }
}
