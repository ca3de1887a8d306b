//! Independent scalar oracles and random fixtures shared by the integration
//! tests and the acceptance harness.

#![allow(dead_code)]

use acan::correlation::PixelCorrelationMatrix;
use acan::losses::{
    one_hot, pcd, source_class_weights, target_class_weights, SigmaPolicy, DEFAULT_ACTIVE_THRESHOLD,
};
use acan::tensor::{Graph, Tensor};
use rand::Rng;

pub type Matrix = Vec<Vec<f64>>;

/// Random row-stochastic `n×n` matrix.
pub fn random_pcm(rng: &mut impl Rng, n: usize) -> Matrix {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-2.0..2.0f64).exp())
                .collect();
            let total: f64 = row.iter().sum();
            row.into_iter().map(|v| v / total).collect()
        })
        .collect()
}

/// Random probability vector over `classes`.
pub fn random_simplex(rng: &mut impl Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes)
        .map(|_| rng.random_range(-3.0..3.0f64).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn to_tensor(m: &Matrix) -> Tensor {
    let n = m.len();
    Tensor::new(vec![n, m[0].len()], m.iter().flatten().copied().collect()).unwrap()
}

fn sq_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for p in 0..a.len() {
        for q in 0..a[p].len() {
            let d = a[p][q] - b[p][q];
            total += d * d;
        }
    }
    total
}

pub fn kernel(a: &Matrix, b: &Matrix, sigma: f64) -> f64 {
    (-sq_frobenius(a, b) / (2.0 * sigma * sigma)).exp()
}

/// `σ = sqrt(median/2)` over all unordered pairs, by sorting.
pub fn median_sigma(all: &[&Matrix]) -> f64 {
    let mut sq = Vec::new();
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            sq.push(sq_frobenius(all[i], all[j]));
        }
    }
    sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sq.len();
    let median = if n % 2 == 1 {
        sq[n / 2]
    } else {
        (sq[n / 2 - 1] + sq[n / 2]) / 2.0
    };
    if median > 0.0 {
        (median / 2.0).sqrt()
    } else {
        1.0
    }
}

/// One PCD problem: source clips with hard labels, target clips with soft
/// pseudo-labels.
#[derive(Clone, Debug)]
pub struct PcdInstance {
    pub classes: usize,
    pub source: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub target: Vec<Matrix>,
    pub pseudo: Vec<Vec<f64>>,
}

impl PcdInstance {
    pub fn random(rng: &mut impl Rng) -> Self {
        let classes = rng.random_range(1..=3);
        let n = rng.random_range(1..=16);
        let ns = rng.random_range(1..=6);
        let nt = rng.random_range(1..=6);
        Self {
            classes,
            source: (0..ns).map(|_| random_pcm(rng, n)).collect(),
            labels: (0..ns).map(|_| rng.random_range(0..classes)).collect(),
            target: (0..nt).map(|_| random_pcm(rng, n)).collect(),
            pseudo: (0..nt).map(|_| random_simplex(rng, classes)).collect(),
        }
    }

    /// Both domains hold the same matrices with the same hard labels.
    pub fn matched(rng: &mut impl Rng) -> Self {
        let mut inst = Self::random(rng);
        inst.target = inst.source.clone();
        inst.pseudo = inst
            .labels
            .iter()
            .map(|&l| {
                (0..inst.classes)
                    .map(|c| if c == l { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        inst
    }

    /// Triple-loop evaluation: for every class present on both sides, the
    /// weighted kernel sums within source, within target and across.
    pub fn oracle(&self, sigma: f64) -> f64 {
        let mut total = 0.0;
        let mut active = 0;
        for c in 0..self.classes {
            let ws: Vec<f64> = self
                .labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { 0.0 })
                .collect();
            let wt: Vec<f64> = self.pseudo.iter().map(|p| p[c]).collect();
            let (ss, st): (f64, f64) = (ws.iter().sum(), wt.iter().sum());
            if ss <= 0.0 || st < DEFAULT_ACTIVE_THRESHOLD {
                continue;
            }
            active += 1;
            let mut term = 0.0;
            for i in 0..self.source.len() {
                for k in 0..self.source.len() {
                    term +=
                        ws[i] / ss * ws[k] / ss * kernel(&self.source[i], &self.source[k], sigma);
                }
            }
            for j in 0..self.target.len() {
                for k in 0..self.target.len() {
                    term +=
                        wt[j] / st * wt[k] / st * kernel(&self.target[j], &self.target[k], sigma);
                }
            }
            for i in 0..self.source.len() {
                for j in 0..self.target.len() {
                    term -= 2.0 * ws[i] / ss * wt[j] / st
                        * kernel(&self.source[i], &self.target[j], sigma);
                }
            }
            total += term;
        }
        if active == 0 {
            0.0
        } else {
            total / active as f64
        }
    }

    pub fn oracle_median_sigma(&self) -> f64 {
        let all: Vec<&Matrix> = self.source.iter().chain(&self.target).collect();
        median_sigma(&all)
    }

    /// The library's value and the bandwidth it used.
    pub fn evaluate(&self, policy: SigmaPolicy) -> (f64, f64) {
        let mut g = Graph::new();
        let wrap = |g: &mut Graph, m: &Matrix| PixelCorrelationMatrix {
            var: g.constant(to_tensor(m)),
            source_dims: [1, 1, m.len()],
        };
        let ms: Vec<_> = self.source.iter().map(|m| wrap(&mut g, m)).collect();
        let mt: Vec<_> = self.target.iter().map(|m| wrap(&mut g, m)).collect();
        let w_s = source_class_weights(&one_hot(&self.labels, self.classes).unwrap()).unwrap();
        let pseudo = Tensor::new(
            vec![self.pseudo.len(), self.classes],
            self.pseudo.iter().flatten().copied().collect(),
        )
        .unwrap();
        let w_t = target_class_weights(&pseudo, DEFAULT_ACTIVE_THRESHOLD).unwrap();
        let d = pcd(&mut g, &ms, &mt, &w_s, &w_t, policy).unwrap();
        (g.scalar_value(d.value), d.sigma)
    }
}
