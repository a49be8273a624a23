//! Exact checks of the semigroup identities on abstract solution maps.
//!
//! A [`SolutionMap`] is any `g(x, t, s, c)`; nothing here touches a network.
//! [`lemma1_check`] verifies that the mean-velocity additivity residual equals
//! the composition defect, and [`theorem1_certify`] measures the constants of
//! the long-jump bound `(K−1)ε + L(AΔ + BΔ²/K)` on a probe grid and compares it
//! with the measured long-jump error.

use rand::Rng;

use crate::{Error, Result};

pub trait SolutionMap {
    fn eval(&self, x: &[f64], t: f64, s: f64, c: usize) -> Vec<f64>;

    fn name(&self) -> String {
        "map".into()
    }
}

impl<F: Fn(&[f64], f64, f64, usize) -> Vec<f64>> SolutionMap for F {
    fn eval(&self, x: &[f64], t: f64, s: f64, c: usize) -> Vec<f64> {
        self(x, t, s, c)
    }
}

/// `g = x + (s − t)·v`.
#[derive(Debug, Clone)]
pub struct StraightLine {
    pub v: Vec<f64>,
}

impl SolutionMap for StraightLine {
    fn eval(&self, x: &[f64], t: f64, s: f64, _: usize) -> Vec<f64> {
        x.iter().zip(&self.v).map(|(x, v)| x + (s - t) * v).collect()
    }

    fn name(&self) -> String {
        "straight_line".into()
    }
}

/// Flow of `dx/dt = a·x`: `x·e^{a(s−t)}`.
#[derive(Debug, Clone, Copy)]
pub struct Exponential {
    pub a: f64,
}

impl SolutionMap for Exponential {
    fn eval(&self, x: &[f64], t: f64, s: f64, _: usize) -> Vec<f64> {
        let k = (self.a * (s - t)).exp();
        x.iter().map(|x| x * k).collect()
    }

    fn name(&self) -> String {
        format!("exponential(a={})", self.a)
    }
}

/// `substeps` explicit Euler steps of `dx/dt = a·x` from `t` to `s`.
#[derive(Debug, Clone, Copy)]
pub struct EulerSurrogate {
    pub a: f64,
    pub substeps: usize,
}

impl SolutionMap for EulerSurrogate {
    fn eval(&self, x: &[f64], t: f64, s: f64, _: usize) -> Vec<f64> {
        if s == t {
            return x.to_vec();
        }
        let k = (1.0 + self.a * (s - t) / self.substeps as f64).powi(self.substeps as i32);
        x.iter().map(|x| x * k).collect()
    }

    fn name(&self) -> String {
        format!("euler(a={},substeps={})", self.a, self.substeps)
    }
}

/// `g = x + (s − t)·v + η(t − s)²`.
#[derive(Debug, Clone)]
pub struct QuadraticPerturbed {
    pub v: Vec<f64>,
    pub eta: f64,
}

impl SolutionMap for QuadraticPerturbed {
    fn eval(&self, x: &[f64], t: f64, s: f64, _: usize) -> Vec<f64> {
        x.iter().zip(&self.v).map(|(x, v)| x + (s - t) * v + self.eta * (t - s) * (t - s)).collect()
    }

    fn name(&self) -> String {
        format!("quadratic(eta={})", self.eta)
    }
}

/// Straight jump toward a fixed point: `x + (s − t)(x − x₀)/t`.
#[derive(Debug, Clone)]
pub struct FixedPointFlow {
    pub x0: Vec<f64>,
}

impl SolutionMap for FixedPointFlow {
    fn eval(&self, x: &[f64], t: f64, s: f64, _: usize) -> Vec<f64> {
        if s == t {
            return x.to_vec();
        }
        x.iter().zip(&self.x0).map(|(x, x0)| x + (s - t) * (x - x0) / t).collect()
    }

    fn name(&self) -> String {
        "fixed_point".into()
    }
}

/// `x + (s − t)·P(x, t, s, c)` with random low-degree polynomial `P`;
/// satisfies the boundary condition by construction.
#[derive(Debug, Clone)]
pub struct RandomPolynomial {
    coef: Vec<[f64; 8]>,
}

impl RandomPolynomial {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let coef = (0..dim).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        Self { coef }
    }
}

impl SolutionMap for RandomPolynomial {
    fn eval(&self, x: &[f64], t: f64, s: f64, c: usize) -> Vec<f64> {
        let d = x.len();
        let cf = c as f64;
        (0..d)
            .map(|i| {
                let k = &self.coef[i];
                let (xi, xj) = (x[i], x[(i + 1) % d]);
                let p = k[0]
                    + k[1] * xi
                    + k[2] * xj * t
                    + k[3] * s * xi * xi
                    + k[4] * t * s
                    + k[5] * xi * xj
                    + k[6] * t * t * xi
                    + k[7] * cf * s;
                x[i] + (s - t) * p
            })
            .collect()
    }

    fn name(&self) -> String {
        "random_polynomial".into()
    }
}

/// Wraps a map and adds a constant offset, breaking the boundary condition.
#[derive(Debug, Clone)]
pub struct Offset<M> {
    pub inner: M,
    pub offset: f64,
}

impl<M: SolutionMap> SolutionMap for Offset<M> {
    fn eval(&self, x: &[f64], t: f64, s: f64, c: usize) -> Vec<f64> {
        self.inner.eval(x, t, s, c).into_iter().map(|v| v + self.offset).collect()
    }

    fn name(&self) -> String {
        format!("{}+offset({})", self.inner.name(), self.offset)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Smallest gap accepted between times that are divided by.
pub const TIME_GAP: f64 = 1e-9;

/// `(x − g(x,t,s))/(t − s)`.
pub fn mean_velocity(g: &impl SolutionMap, x: &[f64], t: f64, s: f64, c: usize) -> Result<Vec<f64>> {
    if !(t - s >= TIME_GAP) {
        return Err(Error::Usage(format!("mean velocity needs t > s, got t={t}, s={s}")));
    }
    Ok(x.iter().zip(g.eval(x, t, s, c)).map(|(x, y)| (x - y) / (t - s)).collect())
}

/// `(t−s)v̄(x,t,s) − (t−ℓ)v̄(x,t,ℓ) − (ℓ−s)v̄(x_ℓ,ℓ,s)`, `x_ℓ = g(x,t,ℓ)`.
pub fn mva_residual(g: &impl SolutionMap, x: &[f64], t: f64, l: f64, s: f64, c: usize) -> Result<Vec<f64>> {
    if !(t - l >= TIME_GAP && l - s >= TIME_GAP) {
        return Err(Error::Usage(format!("need s < ℓ < t, got ({t}, {l}, {s})")));
    }
    let x_l = g.eval(x, t, l, c);
    let direct = mean_velocity(g, x, t, s, c)?;
    let head = mean_velocity(g, x, t, l, c)?;
    let tail = mean_velocity(g, &x_l, l, s, c)?;
    Ok((0..x.len()).map(|i| (t - s) * direct[i] - (t - l) * head[i] - (l - s) * tail[i]).collect())
}

/// `g(g(x,t,ℓ),ℓ,s) − g(x,t,s)`; `ℓ` may touch either endpoint.
pub fn semigroup_defect(g: &impl SolutionMap, x: &[f64], t: f64, l: f64, s: f64, c: usize) -> Result<Vec<f64>> {
    if !(s <= l && l <= t) {
        return Err(Error::Usage(format!("need s ≤ ℓ ≤ t, got ({t}, {l}, {s})")));
    }
    let x_l = g.eval(x, t, l, c);
    Ok(diff(&g.eval(&x_l, l, s, c), &g.eval(x, t, s, c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub x: Vec<f64>,
    pub t: f64,
    pub l: f64,
    pub s: f64,
    pub c: usize,
}

/// Random probes with gaps of at least `1e-3` between the three times.
pub fn random_probes(n: usize, dim: usize, classes: usize, rng: &mut impl Rng) -> Vec<Probe> {
    (0..n)
        .map(|_| loop {
            let mut ts = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            ts.sort_by(f64::total_cmp);
            if ts[1] - ts[0] >= 1e-3 && ts[2] - ts[1] >= 1e-3 {
                break Probe {
                    x: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    t: ts[2],
                    l: ts[1],
                    s: ts[0],
                    c: rng.random_range(0..classes.max(1)),
                };
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    pub probes: usize,
    /// `max |r_MVA − defect|` over probes and components.
    pub max_identity_gap: f64,
    /// `max |g(x,t,t) − x|` over probes.
    pub max_boundary_violation: f64,
    pub pass: bool,
}

pub const LEMMA1_TOL: f64 = 1e-10;
pub const BOUNDARY_TOL: f64 = 1e-14;

/// Checks the boundary condition and the residual/defect identity on every probe.
pub fn lemma1_check(g: &impl SolutionMap, probes: &[Probe]) -> Result<Lemma1Report> {
    let mut gap: f64 = 0.0;
    let mut boundary: f64 = 0.0;
    for p in probes {
        let r = mva_residual(g, &p.x, p.t, p.l, p.s, p.c)?;
        let d = semigroup_defect(g, &p.x, p.t, p.l, p.s, p.c)?;
        gap = r.iter().zip(&d).fold(gap, |m, (a, b)| m.max((a - b).abs()));
        for time in [p.t, p.l, p.s] {
            let y = g.eval(&p.x, time, time, p.c);
            boundary = y.iter().zip(&p.x).fold(boundary, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    let pass = gap <= LEMMA1_TOL && boundary <= BOUNDARY_TOL && gap.is_finite();
    Ok(Lemma1Report { probes: probes.len(), max_identity_gap: gap, max_boundary_violation: boundary, pass })
}

/// Probe grid for the certificate; the certificate is relative to it.
#[derive(Debug, Clone, PartialEq)]
pub struct CertGrid {
    /// Scalar probe states.
    pub states: Vec<f64>,
    /// Time points in `[0, 1]`.
    pub times: Vec<f64>,
    /// Step sizes on which `(A, B)` are fitted.
    pub steps: Vec<f64>,
}

impl CertGrid {
    /// 32 states in `[−2, 2]`, 16 times in `[0, 1]`, steps `k/64`.
    pub fn standard() -> Self {
        Self {
            states: (0..32).map(|i| -2.0 + 4.0 * i as f64 / 31.0).collect(),
            times: (0..16).map(|i| i as f64 / 15.0).collect(),
            steps: (1..=64).map(|k| k as f64 / 64.0).collect(),
        }
    }

    /// Start times `t` on `[h, 1]` for a jump of length `h`.
    fn starts(&self, h: f64) -> Vec<f64> {
        let n = self.times.len().max(2);
        (0..n).map(|j| (h + (1.0 - h) * j as f64 / (n - 1) as f64).min(1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub delta: f64,
    pub k: usize,
    pub h: f64,
    pub eps: f64,
    pub lipschitz: f64,
    pub a: f64,
    pub b: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `L·B·Δ²/K`.
    pub quadratic_term: f64,
    pub pass: bool,
}

/// Non-negative least squares of `e ≈ A·h + B·h²`, then scaled up so that
/// `A·h + B·h² ≥ e` at every point.
pub fn fit_local_error(steps: &[f64], errors: &[f64]) -> Result<(f64, f64)> {
    if steps.len() < 2 || steps.len() != errors.len() {
        return Err(Error::Usage("need at least two step sizes to fit (A, B)".into()));
    }
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&h, &e) in steps.iter().zip(errors) {
        let (p1, p2) = (h, h * h);
        s11 += p1 * p1;
        s12 += p1 * p2;
        s22 += p2 * p2;
        r1 += p1 * e;
        r2 += p2 * e;
    }
    let det = s11 * s22 - s12 * s12;
    let (mut a, mut b) = if det > 0.0 { ((r1 * s22 - r2 * s12) / det, (r2 * s11 - r1 * s12) / det) } else { (-1.0, -1.0) };
    if a < 0.0 || b < 0.0 {
        let only_a = (r1 / s11).max(0.0);
        let only_b = (r2 / s22).max(0.0);
        let sse = |a: f64, b: f64| steps.iter().zip(errors).map(|(&h, &e)| (a * h + b * h * h - e).powi(2)).sum::<f64>();
        (a, b) = if sse(only_a, 0.0) <= sse(0.0, only_b) { (only_a, 0.0) } else { (0.0, only_b) };
    }
    let mut inflate: f64 = 1.0;
    for (&h, &e) in steps.iter().zip(errors) {
        let model = a * h + b * h * h;
        if e > model {
            if model <= 0.0 {
                // Nothing to scale: fall back to a pure quadratic envelope.
                let need = steps.iter().zip(errors).map(|(&h, &e)| e / (h * h)).fold(0.0, f64::max);
                return Ok((0.0, need));
            }
            inflate = inflate.max(e / model);
        }
    }
    Ok((a * inflate, b * inflate))
}

/// Measures `(ε, L, A, B)` of `f_hat` against the exact flow `f_exact` and
/// compares `sup‖f_hat − f_exact‖` at jump `Δ` with the bound.
pub fn theorem1_certify(
    f_exact: &impl SolutionMap,
    f_hat: &impl SolutionMap,
    delta: f64,
    k: usize,
    grid: &CertGrid,
) -> Result<Certificate> {
    if k == 0 || !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Usage(format!("need K ≥ 1 and Δ ∈ (0, 1], got K={k}, Δ={delta}")));
    }
    if grid.states.len() < 2 || grid.times.len() < 2 {
        return Err(Error::Usage("certificate grid is too small".into()));
    }
    let h = delta / k as f64;
    let starts = grid.starts(delta);

    // Time triples: every ordered triple of the time grid plus the partition
    // triples (t_k, t_{k−1}, s) used by the recursion.
    let mut triples = Vec::new();
    for (i, &s) in grid.times.iter().enumerate() {
        for (j, &l) in grid.times.iter().enumerate().skip(i + 1) {
            for &t in &grid.times[j + 1..] {
                triples.push((t, l, s));
            }
        }
    }
    for &t in &starts {
        let s = t - delta;
        for step in 2..=k {
            let tk = s + step as f64 * h;
            triples.push((tk, tk - h, s));
        }
    }
    let mut eps: f64 = 0.0;
    for &(t, l, s) in &triples {
        for &x in &grid.states {
            eps = eps.max(norm(&semigroup_defect(f_hat, &[x], t, l, s, 0)?));
        }
    }

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for &t in &grid.times {
        pairs.extend(grid.times.iter().filter(|&&s| s <= t).map(|&s| (t, s)));
    }
    for &t in &starts {
        pairs.extend((0..=k).map(|step| (t, t - step as f64 * h)));
    }
    let mut lip: f64 = 0.0;
    for &(t, s) in &pairs {
        let ys: Vec<Vec<f64>> = grid.states.iter().map(|&x| f_hat.eval(&[x], t, s, 0)).collect();
        for i in 0..ys.len() {
            for j in i + 1..ys.len() {
                lip = lip.max(norm(&diff(&ys[i], &ys[j])) / (grid.states[i] - grid.states[j]).abs());
            }
        }
    }

    let local: Vec<f64> = grid
        .steps
        .iter()
        .map(|&step| {
            grid.starts(step)
                .iter()
                .flat_map(|&t| grid.states.iter().map(move |&x| (t, x)))
                .map(|(t, x)| norm(&diff(&f_hat.eval(&[x], t, t - step, 0), &f_exact.eval(&[x], t, t - step, 0))))
                .fold(0.0, f64::max)
        })
        .collect();
    let mut steps = grid.steps.clone();
    let mut errors = local;
    // The partition step must be covered by the fitted envelope.
    if !steps.iter().any(|&s| (s - h).abs() < 1e-15) {
        let e = starts
            .iter()
            .flat_map(|&t| grid.states.iter().map(move |&x| (t, x)))
            .map(|(t, x)| norm(&diff(&f_hat.eval(&[x], t, t - h, 0), &f_exact.eval(&[x], t, t - h, 0))))
            .fold(0.0, f64::max);
        steps.push(h);
        errors.push(e);
    }
    let (a, b) = fit_local_error(&steps, &errors)?;

    let mut lhs: f64 = 0.0;
    for &t in &starts {
        for &x in &grid.states {
            lhs = lhs.max(norm(&diff(&f_hat.eval(&[x], t, t - delta, 0), &f_exact.eval(&[x], t, t - delta, 0))));
        }
    }
    let quadratic_term = lip * b * delta * delta / k as f64;
    let rhs = (k - 1) as f64 * eps + lip * a * delta + quadratic_term;
    Ok(Certificate { delta, k, h, eps, lipschitz: lip, a, b, lhs, rhs, quadratic_term, pass: lhs <= rhs })
}
