//! Seeded 2-D toy distributions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toy2d {
    EightGaussians,
    TwoMoons,
    Checkerboard,
}

impl Toy2d {
    /// `n` points, row-major `[n, 2]`.
    pub fn sample(self, rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (x, y) = match self {
                Toy2d::EightGaussians => {
                    let k = rng.below(8) as f64;
                    let (s, c) = (k * PI / 4.0).sin_cos();
                    let x = 4.0 * c + 0.5 * rng.normal();
                    let y = 4.0 * s + 0.5 * rng.normal();
                    (x / 1.414, y / 1.414)
                }
                Toy2d::TwoMoons => {
                    let a = rng.uniform() * PI;
                    let (x, y) = if rng.below(2) == 0 {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    };
                    (
                        2.0 * x - 1.0 + 0.1 * rng.normal(),
                        2.0 * y - 0.5 + 0.1 * rng.normal(),
                    )
                }
                Toy2d::Checkerboard => {
                    let x1 = rng.uniform() * 4.0 - 2.0;
                    let x2 = rng.uniform() - 2.0 * rng.below(2) as f64 + x1.floor().rem_euclid(2.0);
                    (x1, x2)
                }
            };
            out.push(x);
            out.push(y);
        }
        out
    }
}
