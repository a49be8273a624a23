//! Synthetic data and the kernel two-sample metric.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Isotropic Gaussians with means evenly spaced on a circle; label = component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMixture2D {
    pub n_components: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for GaussianMixture2D {
    fn default() -> Self {
        Self { n_components: 8, radius: 4.0, std: 0.3 }
    }
}

impl GaussianMixture2D {
    pub fn mean(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / self.n_components as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    /// `n` points as an `[n × 2]` tensor; with a filter every label equals it.
    pub fn sample_batch(&self, n: usize, class_filter: Option<usize>, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::Usage("sample_batch needs n ≥ 1".into()));
        }
        if let Some(c) = class_filter.filter(|&c| c >= self.n_components) {
            return Err(Error::Usage(format!("class {c} out of range for {} components", self.n_components)));
        }
        let noise = Normal::new(0.0, self.std).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = class_filter.unwrap_or_else(|| rng.random_range(0..self.n_components));
            let m = self.mean(k);
            data.push(m[0] + noise.sample(rng));
            data.push(m[1] + noise.sample(rng));
            labels.push(k);
        }
        Ok((Tensor::raw(vec![n, 2], data), labels))
    }
}

/// Smooth random fields on a `(T', H', W')` grid with `d_in` channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenGrid {
    pub t_frames: usize,
    pub h: usize,
    pub w: usize,
    pub d_in: usize,
    pub classes: usize,
}

impl Default for TokenGrid {
    fn default() -> Self {
        Self { t_frames: 4, h: 4, w: 4, d_in: 4, classes: 8 }
    }
}

impl TokenGrid {
    pub fn tokens(&self) -> usize {
        self.t_frames * self.h * self.w
    }

    /// `n` samples stacked sample-major, `[n·T'H'W' × d_in]`. Each channel is a
    /// sum of three low-frequency cosines whose phases depend on the label.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::Usage("sample_batch needs n ≥ 1".into()));
        }
        let dims = [self.t_frames, self.h, self.w].map(|x| x as f64);
        let mut data = Vec::with_capacity(n * self.tokens() * self.d_in);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..self.classes.max(1));
            labels.push(label);
            let waves: Vec<[f64; 5]> = (0..3 * self.d_in)
                .map(|_| {
                    [
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..2.0),
                        rng.random_range(0.0..2.0 * PI) + label as f64,
                        rng.random_range(0.2..0.6),
                    ]
                })
                .collect();
            for ft in 0..self.t_frames {
                for fy in 0..self.h {
                    for fx in 0..self.w {
                        let p = [ft as f64 / dims[0], fy as f64 / dims[1], fx as f64 / dims[2]];
                        for c in 0..self.d_in {
                            let v: f64 = waves[3 * c..3 * c + 3]
                                .iter()
                                .map(|k| k[4] * (2.0 * PI * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + k[3]).cos())
                                .sum();
                            data.push(v);
                        }
                    }
                }
            }
        }
        Ok((Tensor::raw(vec![n * self.tokens(), self.d_in], data), labels))
    }
}

pub const BANDWIDTHS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

fn kernel(sq: f64, bandwidths: &[f64]) -> f64 {
    bandwidths.iter().map(|b| (-sq / (2.0 * b * b)).exp()).sum()
}

fn check_sets(x: &[f64], y: &[f64], dim: usize) -> Result<(usize, usize)> {
    if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
        return Err(Error::dim("mmd", format!("point sets of {} and {} values for dim {dim}", x.len(), y.len())));
    }
    let (m, n) = (x.len() / dim, y.len() / dim);
    if m < 2 || n < 2 {
        return Err(Error::Usage("unbiased MMD needs at least two points per set".into()));
    }
    Ok((m, n))
}

/// Mean of `k(a_i, a_j)` over `i ≠ j`, each unordered pair once.
fn within(a: &[f64], dim: usize, bandwidths: &[f64]) -> f64 {
    let n = a.len() / dim;
    let mut acc = 0.0;
    for i in 0..n {
        let ai = &a[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let sq: f64 = ai.iter().zip(&a[j * dim..(j + 1) * dim]).map(|(p, q)| (p - q) * (p - q)).sum();
            acc += kernel(sq, bandwidths);
        }
    }
    2.0 * acc / (n * (n - 1)) as f64
}

/// Unbiased Gaussian-kernel MMD² summed over `bandwidths`; `x` and `y` are
/// row-major point sets of dimension `dim`.
pub fn mmd(x: &[f64], y: &[f64], dim: usize, bandwidths: &[f64]) -> Result<f64> {
    let (m, n) = check_sets(x, y, dim)?;
    let mut cross = 0.0;
    for i in 0..m {
        let xi = &x[i * dim..(i + 1) * dim];
        for j in 0..n {
            let sq: f64 = xi.iter().zip(&y[j * dim..(j + 1) * dim]).map(|(p, q)| (p - q) * (p - q)).sum();
            cross += kernel(sq, bandwidths);
        }
    }
    Ok(within(x, dim, bandwidths) + within(y, dim, bandwidths) - 2.0 * cross / (m * n) as f64)
}

/// Literal double sums over ordered pairs.
pub fn mmd_naive(x: &[f64], y: &[f64], dim: usize, bandwidths: &[f64]) -> Result<f64> {
    let (m, n) = check_sets(x, y, dim)?;
    let pt = |s: &[f64], i: usize| s[i * dim..(i + 1) * dim].to_vec();
    let k = |a: Vec<f64>, b: Vec<f64>| {
        let mut total = 0.0;
        for &bw in bandwidths {
            let mut sq = 0.0;
            for c in 0..dim {
                sq += (a[c] - b[c]).powi(2);
            }
            total += (-sq / (2.0 * bw * bw)).exp();
        }
        total
    };
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += k(pt(x, i), pt(x, j));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += k(pt(y, i), pt(y, j));
            }
        }
    }
    for i in 0..m {
        for j in 0..n {
            kxy += k(pt(x, i), pt(y, j));
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}
