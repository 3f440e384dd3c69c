//! Standard-normal draws for simulated likelihoods, one block per user.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawKind {
    /// Seeded pseudo-random normals.
    #[default]
    Pseudo,
    /// Halton points mapped through the inverse normal CDF, one prime base
    /// per dimension, consecutive blocks of `draws` points per user.
    Halton,
}

/// Per-user `R x K` blocks of standard-normal draws, row-major by draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    pub seed: u64,
    pub draws: usize,
    pub dims: usize,
    pub kind: DrawKind,
    per_user: Vec<Vec<f64>>,
}

const PRIMES: [u64; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103,
    107, 109, 113, 127, 131,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

impl DrawMatrix {
    pub fn generate(n_users: usize, draws: usize, dims: usize, seed: u64, kind: DrawKind) -> Self {
        assert!(dims <= PRIMES.len(), "at most {} dimensions supported", PRIMES.len());
        let per_user = match kind {
            DrawKind::Pseudo => (0..n_users)
                .map(|u| {
                    let mut r = rng::stream(seed, &[0xD4A5, u as u64]);
                    (0..draws * dims).map(|_| StandardNormal.sample(&mut r)).collect()
                })
                .collect(),
            DrawKind::Halton => {
                let normal = Normal::standard();
                // skip the first few points, which are highly correlated across bases
                let burn = 10 + (seed % 1000);
                (0..n_users)
                    .map(|u| {
                        let mut block = Vec::with_capacity(draws * dims);
                        for r in 0..draws {
                            let index = burn + (u * draws + r) as u64 + 1;
                            for &p in &PRIMES[..dims] {
                                block.push(normal.inverse_cdf(radical_inverse(index, p)));
                            }
                        }
                        block
                    })
                    .collect()
            }
        };
        Self { seed, draws, dims, kind, per_user }
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    /// Draw `r` of user `u`, a slice of length `dims`.
    pub fn draw(&self, u: usize, r: usize) -> &[f64] {
        &self.per_user[u][r * self.dims..(r + 1) * self.dims]
    }

    pub fn user_block(&self, u: usize) -> &[f64] {
        &self.per_user[u]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_user_specific() {
        let a = DrawMatrix::generate(3, 10, 13, 42, DrawKind::Pseudo);
        let b = DrawMatrix::generate(3, 10, 13, 42, DrawKind::Pseudo);
        assert_eq!(a, b);
        assert_ne!(a.draw(0, 0), a.draw(1, 0));
        let c = DrawMatrix::generate(3, 10, 13, 43, DrawKind::Pseudo);
        assert_ne!(a.draw(0, 0), c.draw(0, 0));
    }

    #[test]
    fn moments_are_standard() {
        for kind in [DrawKind::Pseudo, DrawKind::Halton] {
            let d = DrawMatrix::generate(20, 500, 4, 1, kind);
            let vals: Vec<f64> = (0..20).flat_map(|u| d.user_block(u).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.03, "{kind:?} mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "{kind:?} var {var}");
        }
    }

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }
}
