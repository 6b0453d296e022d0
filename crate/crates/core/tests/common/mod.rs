//! Test-only oracles: an independent softmax cross-entropy, its
//! finite-difference gradient, and a damped Newton solver built on nalgebra.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Parameters laid out class-major: `theta[c * (d + 1) + j]`, with `j == d`
/// the bias.
pub struct Problem<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [usize],
    pub classes: usize,
    pub lambda: f64,
}

impl Problem<'_> {
    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    fn probs(&self, theta: &[f64], xi: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let w = &theta[c * (d + 1)..(c + 1) * (d + 1)];
                w[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + w[d]
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Mean cross-entropy plus `lambda / 2` times the squared weight norm.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let d = self.dim();
        let n = self.x.len() as f64;
        let mut total = 0.0;
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let d_logit: Vec<f64> = (0..self.classes)
                .map(|c| {
                    let w = &theta[c * (d + 1)..(c + 1) * (d + 1)];
                    w[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + w[d]
                })
                .collect();
            let m = d_logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + d_logit.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - d_logit[yi];
        }
        let reg: f64 = (0..self.classes)
            .flat_map(|c| (0..d).map(move |j| c * (d + 1) + j))
            .map(|k| theta[k] * theta[k])
            .sum();
        total / n + 0.5 * self.lambda * reg
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let n = self.x.len() as f64;
        let mut g = vec![0.0; theta.len()];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let p = self.probs(theta, xi);
            for c in 0..self.classes {
                let r = p[c] - if c == yi { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c * (d + 1) + j] += r * xi[j] / n;
                }
                g[c * (d + 1) + d] += r / n;
            }
        }
        for c in 0..self.classes {
            for j in 0..d {
                g[c * (d + 1) + j] += self.lambda * theta[c * (d + 1) + j];
            }
        }
        g
    }

    pub fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let k = self.classes * (d + 1);
        let n = self.x.len() as f64;
        let mut h = DMatrix::zeros(k, k);
        for xi in self.x {
            let p = self.probs(theta, xi);
            let xt: Vec<f64> = xi.iter().cloned().chain(std::iter::once(1.0)).collect();
            for a in 0..self.classes {
                for b in 0..self.classes {
                    let s = p[a] * ((a == b) as u8 as f64) - p[a] * p[b];
                    if s == 0.0 {
                        continue;
                    }
                    for i in 0..=d {
                        for j in 0..=d {
                            h[(a * (d + 1) + i, b * (d + 1) + j)] += s * xt[i] * xt[j] / n;
                        }
                    }
                }
            }
        }
        for c in 0..self.classes {
            for j in 0..d {
                h[(c * (d + 1) + j, c * (d + 1) + j)] += self.lambda;
            }
        }
        h
    }

    /// Damped Newton with backtracking; the damping only resolves the
    /// softmax's shift-invariant bias direction.
    pub fn newton(&self) -> Vec<f64> {
        let k = self.classes * (self.dim() + 1);
        let mut theta = vec![0.0; k];
        for _ in 0..100 {
            let g = self.gradient(&theta);
            if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-12 {
                break;
            }
            let h = self.hessian(&theta) + DMatrix::identity(k, k) * 1e-10;
            let step = h
                .cholesky()
                .expect("damped Hessian is positive definite")
                .solve(&DVector::from_vec(g.clone()));
            let f0 = self.loss(&theta);
            let slope: f64 = g.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = theta
                    .iter()
                    .zip(step.iter())
                    .map(|(a, s)| a - t * s)
                    .collect();
                if self.loss(&cand) <= f0 - 1e-4 * t * slope || t < 1e-12 {
                    theta = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        theta
    }

    pub fn predict(&self, theta: &[f64], x: &[Vec<f64>]) -> Vec<usize> {
        x.iter()
            .map(|xi| {
                let p = self.probs(theta, xi);
                let mut best = 0;
                for c in 1..p.len() {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Central differences of `f` with step `h`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = t[i];
            t[i] = orig + h;
            let up = f(&t);
            t[i] = orig - h;
            let down = f(&t);
            t[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gaussian blobs around `classes` random centers spread by `separation`.
pub fn blobs(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d)
                .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = if i < classes {
            i
        } else {
            rng.random_range(0..classes)
        };
        x.push(
            centers[c]
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        y.push(c);
    }
    (x, y)
}

/// Points labelled by a random linear teacher, keeping only points whose top
/// two teacher scores differ by at least `margin`. Separable by construction.
pub fn teacher_data(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    margin: f64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    while x.len() < n {
        let xi: Vec<f64> = (0..d)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut scores: Vec<(f64, usize)> = w
            .iter()
            .enumerate()
            .map(|(c, wc)| (wc.iter().zip(&xi).map(|(a, b)| a * b).sum(), c))
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0));
        if scores[0].0 - scores[1].0 >= margin {
            y.push(scores[0].1);
            x.push(xi);
        }
    }
    (x, y)
}

pub fn to_array(x: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let d = x[0].len();
    ndarray::Array2::from_shape_vec((x.len(), d), x.iter().flatten().cloned().collect()).unwrap()
}

pub fn labels(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("c{c}")).collect()
}

/// Whether some linear classifier fits every training point, decided by the
/// unregularized oracle reaching zero training error.
pub fn linearly_separable(x: &[Vec<f64>], y: &[usize], classes: usize) -> bool {
    let p = Problem {
        x,
        y,
        classes,
        lambda: 1e-6,
    };
    let theta = p.newton();
    p.predict(&theta, x) == y
}
