//! Counter-based noise: Brownian increments and Poisson jump counts are pure
//! functions of `(seed, stream, particle, global step, atom)`, so any worker can
//! regenerate any draw and solves on grids sharing a step size see the same
//! noise over the same calendar interval.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::TimeGrid;
use crate::model::JumpMeasure;

/// Keeps global step indices non-negative for grids starting before time 0.
const STEP_OFFSET: i64 = 1 << 32;

/// Which family of independent streams a bundle draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Baseline,
    Pinned,
}

impl Stream {
    fn key(self) -> u64 {
        match self {
            Stream::Baseline => 0x6261_7365_6c69_6e65,
            Stream::Pinned => 0x7069_6e6e_6564_0000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBundle {
    pub seed: u64,
    pub stream: Stream,
    n: usize,
    intensities: Vec<f64>,
    dt: f64,
    offset: i64,
}

/// One particle's draws for one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepNoise {
    pub db: Vec<f64>,
    pub dn: Vec<u32>,
}

impl StepNoise {
    pub fn new(n: usize, atoms: usize) -> Self {
        StepNoise { db: vec![0.0; n], dn: vec![0; atoms] }
    }
}

impl NoiseBundle {
    pub fn new(seed: u64, n: usize, jm: &JumpMeasure, grid: &TimeGrid) -> Self {
        NoiseBundle {
            seed,
            stream: Stream::Baseline,
            n,
            intensities: jm.atoms().iter().map(|a| a.weight).collect(),
            dt: grid.dt(),
            offset: grid.global_offset(),
        }
    }

    /// Bundle for another grid with the same step size; draws are keyed by calendar step.
    pub fn on_grid(&self, grid: &TimeGrid) -> Self {
        NoiseBundle { offset: grid.global_offset(), dt: grid.dt(), ..self.clone() }
    }

    /// Independent streams for tagged particles.
    pub fn pinned(&self) -> Self {
        NoiseBundle { stream: Stream::Pinned, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn atoms(&self) -> usize {
        self.intensities.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn words_per_step(&self) -> u128 {
        // Two u64 per normal pair, one u64 per atom; every u64 is two 32-bit words.
        (2 * 2 * self.n.div_ceil(2) + 2 * self.intensities.len()) as u128
    }

    /// Draws for `particle` at local step `step` into `out`.
    pub fn fill(&self, particle: usize, step: usize, out: &mut StepNoise) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.stream.key());
        rng.set_stream(particle as u64);
        let global = (self.offset + step as i64 + STEP_OFFSET) as u128;
        rng.set_word_pos(global * self.words_per_step());
        let sd = self.dt.sqrt();
        let mut c = 0;
        while c < self.n {
            let u1 = open_unit(rng.next_u64());
            let u2 = open_unit(rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let th = std::f64::consts::TAU * u2;
            out.db[c] = sd * r * th.cos();
            if c + 1 < self.n {
                out.db[c + 1] = sd * r * th.sin();
            }
            c += 2;
        }
        for (a, lam) in self.intensities.iter().enumerate() {
            out.dn[a] = poisson_inverse(lam * self.dt, open_unit(rng.next_u64()));
        }
    }

    pub fn draw(&self, particle: usize, step: usize) -> StepNoise {
        let mut s = StepNoise::new(self.n, self.atoms());
        self.fill(particle, step, &mut s);
        s
    }
}

/// Uniform in the open interval (0, 1).
fn open_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn poisson_inverse(mean: f64, u: f64) -> u32 {
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        if p == 0.0 {
            break;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(seed: u64) -> NoiseBundle {
        let jm = JumpMeasure::single(1.0, 3.0).unwrap();
        NoiseBundle::new(seed, 3, &jm, &TimeGrid::new(0.0, 1.0, 100).unwrap())
    }

    #[test]
    fn draws_are_reproducible_and_distinct() {
        let b = bundle(7);
        assert_eq!(b.draw(4, 10), b.draw(4, 10));
        assert_ne!(b.draw(4, 10).db, b.draw(5, 10).db);
        assert_ne!(b.draw(4, 10).db, b.draw(4, 11).db);
        assert_ne!(b.draw(4, 10).db, b.pinned().draw(4, 10).db);
        assert_ne!(b.draw(4, 10).db, bundle(8).draw(4, 10).db);
    }

    #[test]
    fn shifted_grid_sees_the_same_calendar_noise() {
        let b = bundle(1);
        let later = b.on_grid(&TimeGrid::new(0.2, 1.0, 80).unwrap());
        assert_eq!(b.draw(3, 25), later.draw(3, 5));
        let earlier = b.on_grid(&TimeGrid::new(-0.02, 1.0, 102).unwrap());
        assert_eq!(b.draw(3, 0), earlier.draw(3, 2));
    }

    #[test]
    fn moments_are_right() {
        let b = bundle(11);
        let (mut s1, mut s2, mut cnt) = (0.0, 0.0, 0.0);
        let m = 20_000;
        for i in 0..m {
            let d = b.draw(i, 0);
            s1 += d.db[0];
            s2 += d.db[0] * d.db[0];
            cnt += d.dn[0] as f64;
        }
        let dt = 0.01;
        assert!((s1 / m as f64).abs() < 4.0 * (dt / m as f64).sqrt());
        assert!((s2 / m as f64 / dt - 1.0).abs() < 4.0 * (2.0 / m as f64).sqrt());
        let lam = 3.0 * dt;
        assert!((cnt / m as f64 - lam).abs() < 4.0 * (lam / m as f64).sqrt());
    }

    #[test]
    fn poisson_inversion_matches_pmf() {
        assert_eq!(poisson_inverse(0.5, 1e-9), 0);
        assert_eq!(poisson_inverse(0.5, 0.999_999), 7);
        assert_eq!(poisson_inverse(0.0, 0.7), 0);
    }
}
