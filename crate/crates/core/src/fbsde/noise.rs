use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::TimeGrid;
use crate::rng::stream;

const NOISE_STREAM: u64 = 0x4E4F_4953;

/// Brownian increments `ΔW_k` for `paths` independent scalar Brownian
/// motions, stored node-major (`increment(k, j)` at `k * paths + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    seed: u64,
    paths: usize,
    steps: usize,
    dt: f64,
    dw: Vec<f64>,
}

impl NoiseBank {
    /// Path `j` draws its increments from its own counter-derived stream, so
    /// the bank is reproducible from `(seed, paths, grid)` alone.
    pub fn new(seed: u64, paths: usize, grid: &TimeGrid) -> Result<Self> {
        if paths == 0 {
            return Err(Error::InvalidInput("noise bank needs at least one path".into()));
        }
        let steps = grid.steps();
        let dt = grid.dt();
        let sq = dt.sqrt();
        let per_path: Vec<Vec<f64>> = (0..paths)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream(seed, NOISE_STREAM, j as u64);
                (0..steps)
                    .map(|_| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        xi * sq
                    })
                    .collect()
            })
            .collect();
        let mut dw = vec![0.0; paths * steps];
        for (j, incs) in per_path.iter().enumerate() {
            for (k, v) in incs.iter().enumerate() {
                dw[k * paths + j] = *v;
            }
        }
        Ok(Self { seed, paths, steps, dt, dw })
    }

    /// A bank built from explicit node-major increments; `seed` only labels it.
    pub fn from_increments(seed: u64, paths: usize, grid: &TimeGrid, dw: Vec<f64>) -> Result<Self> {
        if paths == 0 || dw.len() != paths * grid.steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} increments for {paths} paths and {} steps",
                dw.len(),
                grid.steps()
            )));
        }
        Ok(Self {
            seed,
            paths,
            steps: grid.steps(),
            dt: grid.dt(),
            dw,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    pub fn increment(&self, k: usize, j: usize) -> f64 {
        self.dw[k * self.paths + j]
    }

    /// All increments of step `k`.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.dw[k * self.paths..(k + 1) * self.paths]
    }

    /// Identity used to check that two solutions share their noise.
    pub fn fingerprint(&self) -> (u64, usize, usize, u64) {
        (self.seed, self.paths, self.steps, self.dt.to_bits())
    }

    pub fn matches_grid(&self, grid: &TimeGrid) -> bool {
        self.steps == grid.steps() && self.dt.to_bits() == grid.dt().to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_seed_dependent() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let a = NoiseBank::new(3, 100, &grid).unwrap();
        let b = NoiseBank::new(3, 100, &grid).unwrap();
        let c = NoiseBank::new(4, 100, &grid).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.node(0), c.node(0));
        // Path j does not depend on how many paths were requested.
        let d = NoiseBank::new(3, 50, &grid).unwrap();
        for k in 0..10 {
            assert_eq!(a.increment(k, 17), d.increment(k, 17));
        }
    }

    #[test]
    fn increments_have_brownian_moments() {
        let grid = TimeGrid::new(2.0, 20).unwrap();
        let paths = 20_000;
        let bank = NoiseBank::new(11, paths, &grid).unwrap();
        let dt = grid.dt();
        for k in 0..20 {
            let col = bank.node(k);
            let mean = col.iter().sum::<f64>() / paths as f64;
            assert!(mean.abs() <= 5.0 / (paths as f64).sqrt() * dt.sqrt());
            let var = col.iter().map(|v| v * v).sum::<f64>() / paths as f64;
            assert!((var / dt - 1.0).abs() < 5.0 * (2.0 / paths as f64).sqrt());
        }
    }
}
