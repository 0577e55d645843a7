//! Toy 2-D target densities and the energy distance between sample sets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDensity {
    Crescent,
    Spiral,
    Checkerboard,
}

pub const CRESCENT_INNER: f64 = 0.5;
pub const CRESCENT_OUTER: f64 = 1.0;
/// Angular extent of the arc; the gap faces the positive x axis.
pub const CRESCENT_ARC: (f64, f64) = (PI / 4.0, 7.0 * PI / 4.0);
pub const CRESCENT_NOISE: f64 = 0.05;

/// Arm `r = SPIRAL_PITCH * theta` for `theta` in `SPIRAL_THETA`.
pub const SPIRAL_PITCH: f64 = 0.5 / PI;
pub const SPIRAL_THETA: (f64, f64) = (PI / 2.0, 3.5 * PI);
pub const SPIRAL_NOISE: f64 = 0.1;

pub const CHECKER_CELLS: usize = 8;
pub const CHECKER_HALF_WIDTH: f64 = 2.0;

impl ToyDensity {
    pub const ALL: [ToyDensity; 3] = [ToyDensity::Crescent, ToyDensity::Spiral, ToyDensity::Checkerboard];

    pub fn from_name(name: &str) -> Result<ToyDensity> {
        match name {
            "crescent" => Ok(ToyDensity::Crescent),
            "spiral" => Ok(ToyDensity::Spiral),
            "checkerboard" => Ok(ToyDensity::Checkerboard),
            other => Err(Error::UnknownName(format!("density {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyDensity::Crescent => "crescent",
            ToyDensity::Spiral => "spiral",
            ToyDensity::Checkerboard => "checkerboard",
        }
    }

    /// Axis-aligned box `[lo, hi]^2` containing every sample.
    pub fn support(self) -> (f64, f64) {
        match self {
            ToyDensity::Crescent => {
                let r = CRESCENT_OUTER + 3.0 * CRESCENT_NOISE;
                (-r, r)
            }
            ToyDensity::Spiral => {
                let r = SPIRAL_PITCH * SPIRAL_THETA.1 + 4.0 * SPIRAL_NOISE;
                (-r, r)
            }
            ToyDensity::Checkerboard => (-CHECKER_HALF_WIDTH, CHECKER_HALF_WIDTH),
        }
    }

    /// `n` i.i.d. samples as an `[n, 2]` tensor.
    pub fn sample(self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let p = match self {
                ToyDensity::Crescent => crescent_point(&mut rng),
                ToyDensity::Spiral => spiral_point(&mut rng),
                ToyDensity::Checkerboard => checker_point(&mut rng),
            };
            out.extend(p);
        }
        Ok(Tensor::matrix(n, 2, out))
    }
}

fn crescent_point<R: Rng>(rng: &mut R) -> [f64; 2] {
    let noise = Normal::new(0.0, CRESCENT_NOISE).expect("positive std");
    loop {
        // uniform over the annular sector, then jittered
        let r2 = rng.random_range(CRESCENT_INNER.powi(2)..CRESCENT_OUTER.powi(2));
        let th = rng.random_range(CRESCENT_ARC.0..CRESCENT_ARC.1);
        let r = r2.sqrt();
        let p = [r * th.cos() + noise.sample(rng), r * th.sin() + noise.sample(rng)];
        let n = p[0].hypot(p[1]);
        if (CRESCENT_INNER..=CRESCENT_OUTER + 3.0 * CRESCENT_NOISE).contains(&n) {
            return p;
        }
    }
}

fn spiral_point<R: Rng>(rng: &mut R) -> [f64; 2] {
    let noise = Normal::new(0.0, SPIRAL_NOISE).expect("positive std");
    let th = rng.random_range(SPIRAL_THETA.0..SPIRAL_THETA.1);
    let r = SPIRAL_PITCH * th;
    let mut jitter = || loop {
        let z: f64 = noise.sample(rng);
        if z.abs() <= 4.0 * SPIRAL_NOISE {
            return z;
        }
    };
    [r * th.cos() + jitter(), r * th.sin() + jitter()]
}

fn checker_point<R: Rng>(rng: &mut R) -> [f64; 2] {
    let cell = 2.0 * CHECKER_HALF_WIDTH / CHECKER_CELLS as f64;
    // pick one of the 32 even-parity cells
    let k = rng.random_range(0..CHECKER_CELLS * CHECKER_CELLS / 2);
    let row = k / (CHECKER_CELLS / 2);
    let col = 2 * (k % (CHECKER_CELLS / 2)) + row % 2;
    let x = -CHECKER_HALF_WIDTH + (col as f64 + rng.random::<f64>()) * cell;
    let y = -CHECKER_HALF_WIDTH + (row as f64 + rng.random::<f64>()) * cell;
    [x, y]
}

/// V-statistic `2 E|a - b| - E|a - a'| - E|b - b'|` over all pairs,
/// including self-pairs. Rows are points.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.rows(), b.cols()],
            actual: a.shape().to_vec(),
        });
    }
    // canonical argument order makes the result exactly symmetric
    let (a, b) = if (a.rows(), a.data()) <= (b.rows(), b.data()) { (a, b) } else { (b, a) };
    let ab = mean_pairwise(a, b);
    let aa = mean_pairwise(a, a);
    let bb = mean_pairwise(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

fn mean_pairwise(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.cols();
    let mut total = 0.0;
    for i in 0..a.rows() {
        let x = a.row(i);
        let mut row = 0.0;
        for j in 0..b.rows() {
            let y = b.row(j);
            let mut s = 0.0;
            for k in 0..d {
                let e = x[k] - y[k];
                s += e * e;
            }
            row += s.sqrt();
        }
        total += row;
    }
    total / (a.rows() * b.rows()) as f64
}
