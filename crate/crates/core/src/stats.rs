//! Order-fixed reductions for Monte Carlo samples.
//!
//! Samples are always reduced from a `Vec` indexed by path, so a result never
//! depends on how paths were scheduled across workers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const LEAF: usize = 32;

/// Paths per reduction chunk. Fixed, so results do not depend on the worker count.
pub const CHUNK: usize = 512;

/// Pairwise sum with Neumaier compensation inside each leaf.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &x in xs {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        return sum + comp;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-slot means over `count` samples; `fill(p, buf)` writes sample `p` into a
/// buffer of length `width`. Chunks are summed in path order and chunk totals
/// pairwise, so the result is identical for any thread pool.
pub fn slot_means<F>(count: usize, width: usize, fill: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks: Vec<Vec<f64>> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Compensated::default(); width];
            let mut buf = vec![0.0; width];
            for p in c * CHUNK..((c + 1) * CHUNK).min(count) {
                fill(p, &mut buf);
                for (a, v) in acc.iter_mut().zip(&buf) {
                    a.add(*v);
                }
            }
            acc.iter().map(Compensated::value).collect()
        })
        .collect();
    (0..width)
        .map(|k| {
            let col: Vec<f64> = chunks.iter().map(|c| c[k]).collect();
            pairwise_sum(&col) / count as f64
        })
        .collect()
}

/// Collects one sample per path in path order.
pub fn collect_samples<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let count = xs.len();
        if count == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, count };
        }
        let mean = pairwise_sum(xs) / count as f64;
        let stderr = if count > 1 {
            let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&sq) / (count - 1) as f64 / count as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, stderr, count }
    }

    /// `|self - other|` measured in pooled standard errors of two independent means.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let pooled = (self.stderr.powi(2) + other.stderr.powi(2)).sqrt();
        (self.mean - other.mean).abs() / pooled
    }

    /// Distance of the mean from a reference value in standard errors.
    pub fn z_from(&self, reference: f64) -> f64 {
        (self.mean - reference).abs() / self.stderr
    }
}
