//! Flow matching, solution consistency, mean-velocity additivity and the
//! batch-split training step.
//!
//! Every loss is split into a target construction, which runs without
//! gradients (weak path, EMA network, detached velocities), and a
//! [`Regression`] that the student is trained on. The split lets the
//! regression be finite-difference checked with frozen targets and weights.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{make_drop_plans, Conditioning, DropPlan, Network, Path};
use crate::params::{ema_update, Adam, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// `t' = shift·t / (1 + (shift − 1)·t)`.
pub fn shift_transform(t: f64, shift: f64) -> f64 {
    shift * t / (1.0 + (shift - 1.0) * t)
}

/// Logit-normal time followed by the shift transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSamplerConfig {
    pub mu: f64,
    pub sigma: f64,
    pub shift: f64,
}

impl TimeSamplerConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.shift >= 1.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("{name}: need sigma > 0, shift ≥ 1 and finite mu")));
        }
        Ok(())
    }
}

/// Time for a given standard-normal draw `z`.
pub fn time_from_normal(cfg: &TimeSamplerConfig, z: f64) -> f64 {
    let u = cfg.mu + cfg.sigma * z;
    shift_transform(1.0 / (1.0 + (-u).exp()), cfg.shift)
}

/// A draw strictly inside `(0, 1)`.
pub fn sample_time(cfg: &TimeSamplerConfig, rng: &mut impl Rng) -> f64 {
    loop {
        let t = time_from_normal(cfg, StandardNormal.sample(rng));
        if t > 0.0 && t < 1.0 {
            return t;
        }
    }
}

/// Smallest allowed gap between any two times of a triple.
pub const TRIPLE_GUARD: f64 = 1e-6;

/// `ℓ = t + (s − t)·r` clamped to `[s + guard, t − 2·guard]`; `None` if
/// `t − s` is too small to fit the guards.
pub fn triple_from(t: f64, s: f64, r: f64) -> Option<(f64, f64, f64)> {
    if t - s < 4.0 * TRIPLE_GUARD {
        return None;
    }
    let l = (t + (s - t) * r).clamp(s + TRIPLE_GUARD, t - 2.0 * TRIPLE_GUARD);
    Some((t, l, s))
}

/// `(t, ℓ, s)` with `s < ℓ < t`; `r` is log-uniform on `[r_min, 1]`.
pub fn sample_triple(
    cfg_t: &TimeSamplerConfig,
    cfg_s: &TimeSamplerConfig,
    r_min: f64,
    rng: &mut impl Rng,
) -> (f64, f64, f64) {
    sample_triple_with(cfg_t, cfg_s, (r_min, 1.0), rng)
}

/// As [`sample_triple`] with `r` log-uniform on `[lo, hi]`.
pub fn sample_triple_with(
    cfg_t: &TimeSamplerConfig,
    cfg_s: &TimeSamplerConfig,
    (lo, hi): (f64, f64),
    rng: &mut impl Rng,
) -> (f64, f64, f64) {
    loop {
        let a = sample_time(cfg_t, rng);
        let b = sample_time(cfg_s, rng);
        let (t, s) = if a >= b { (a, b) } else { (b, a) };
        let r = if lo == hi { lo } else { hi * (rng.random::<f64>() * (lo / hi).ln()).exp() };
        if let Some(triple) = triple_from(t, s, r) {
            return triple;
        }
    }
}

/// `K` points `shift_transform(k/(K−1))`, ascending from 0 to 1.
pub fn mva_grid(k: usize, shift: f64) -> Result<Vec<f64>> {
    if k < 3 {
        return Err(Error::Config(format!("MVA grid needs at least 3 points, got {k}")));
    }
    Ok((0..k).map(|i| shift_transform(i as f64 / (k - 1) as f64, shift)).collect())
}

/// Three distinct grid points as `(t, ℓ, s)` with `s < ℓ < t`.
pub fn sample_grid_triple(grid: &[f64], rng: &mut impl Rng) -> (f64, f64, f64) {
    let mut idx = rand::seq::index::sample(rng, grid.len(), 3).into_vec();
    idx.sort_unstable();
    (grid[idx[2]], grid[idx[1]], grid[idx[0]])
}

/// `w·v + (1 − w)·v_weak`.
pub fn pdg_velocity(v_gt: &[f64], v_weak: &[f64], w: f64) -> Vec<f64> {
    v_gt.iter().zip(v_weak).map(|(v, u)| w * v + (1.0 - w) * u).collect()
}

/// `1 / (mse + ε)^p`.
pub fn fm_weight(mse: f64, eps: f64, p: f64) -> f64 {
    1.0 / (mse + eps).powf(p)
}

/// `1/((t−ℓ)(t−s)) · 1/(mse/(t−ℓ)² + ε)^p`.
pub fn scm_weight(t: f64, l: f64, s: f64, mse: f64, eps: f64, p: f64) -> f64 {
    let dl = t - l;
    1.0 / (dl * (t - s)) / (mse / (dl * dl) + eps).powf(p)
}

/// Group sizes for `n` samples by largest-remainder rounding; ties go to
/// the earlier group.
pub fn split_batch(n: usize, shares: [f64; 3]) -> [usize; 3] {
    let exact = shares.map(|s| s * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
    let assigned: usize = sizes.iter().sum();
    for &g in order.iter().take(n.saturating_sub(assigned)) {
        sizes[g] += 1;
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guidance {
    /// Weak-path baseline.
    Pdg,
    /// Second full-path unconditional forward.
    Full,
    /// Conditional velocity only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetNet {
    Ema,
    Detach,
}

/// How `r` in `ℓ = t + (s − t)·r` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RSchedule {
    /// Per sample, log-uniform on `[r_min, 1]`.
    LogUniform,
    /// `r = r_min^progress`, shared by the whole step.
    Exponential,
}

/// Range of `r` at a training progress in `[0, 1]`.
pub fn r_range(cfg: &LossConfig, progress: f64) -> (f64, f64) {
    match cfg.r_schedule {
        RSchedule::LogUniform => (cfg.r_min, 1.0),
        RSchedule::Exponential => {
            let r = cfg.r_min.powf(progress.clamp(0.0, 1.0));
            (r, r)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// FM share.
    pub a: f64,
    /// SCM share; MVA gets `1 − a − b`.
    pub b: f64,
    pub eps: f64,
    pub p: f64,
    pub velocity_mix: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub p_drop: f64,
    pub mva_start_fraction: f64,
    pub k_discrete: usize,
    pub guidance: Guidance,
    pub target: TargetNet,
    pub time_t: TimeSamplerConfig,
    pub time_s: TimeSamplerConfig,
    pub r_min: f64,
    pub r_schedule: RSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 0.25,
            eps: 1e-3,
            p: 0.5,
            velocity_mix: 0.25,
            w_min: 2.5,
            w_max: 4.5,
            p_drop: 0.2,
            mva_start_fraction: 0.8,
            k_discrete: 64,
            guidance: Guidance::Pdg,
            target: TargetNet::Ema,
            time_t: TimeSamplerConfig { mu: 0.0, sigma: 1.0, shift: 3.0 },
            time_s: TimeSamplerConfig { mu: -1.0, sigma: 0.8, shift: 1.0 },
            r_min: 1e-3,
            r_schedule: RSchedule::LogUniform,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.a) || !unit(self.b) || self.a + self.b > 1.0 + 1e-12 {
            return Err(Error::Config(format!("batch shares a={} b={} are outside the simplex", self.a, self.b)));
        }
        if !(self.eps > 0.0) || !(self.p >= 0.0) {
            return Err(Error::Config("need eps > 0 and p ≥ 0".into()));
        }
        if !unit(self.velocity_mix) || !unit(self.p_drop) || !unit(self.mva_start_fraction) {
            return Err(Error::Config("velocity_mix, p_drop and mva_start_fraction must lie in [0, 1]".into()));
        }
        if !(self.w_min <= self.w_max) || !self.w_min.is_finite() || !self.w_max.is_finite() {
            return Err(Error::Config("need finite w_min ≤ w_max".into()));
        }
        if self.k_discrete < 3 {
            return Err(Error::Config("k_discrete must be at least 3".into()));
        }
        if !(self.r_min > 0.0 && self.r_min <= 1.0) {
            return Err(Error::Config("r_min must lie in (0, 1]".into()));
        }
        self.time_t.validate("time.t")?;
        self.time_s.validate("time.s")
    }

    pub fn mva_share(&self) -> f64 {
        (1.0 - self.a - self.b).max(0.0)
    }

    /// Effective `(FM, SCM, MVA)` shares at a training progress in `[0, 1]`.
    pub fn shares(&self, progress: f64) -> [f64; 3] {
        if mva_active(self, progress) {
            [self.a, self.b, self.mva_share()]
        } else {
            [self.a + self.mva_share(), self.b, 0.0]
        }
    }
}

pub fn mva_active(cfg: &LossConfig, progress: f64) -> bool {
    cfg.mva_share() > 0.0 && progress >= cfg.mva_start_fraction - 1e-12
}

/// `x_t = (1 − t)·x0 + t·x1` per sample, `x0` and `x1` are `[B·N × d]`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Tensor {
    let per = x0.numel() / t.len();
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .enumerate()
        .map(|(i, (a, b))| {
            let ti = t[i / per];
            (1.0 - ti) * a + ti * b
        })
        .collect();
    Tensor::raw(x0.shape().to_vec(), data)
}

pub fn noise_like(x: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor::raw(x.shape().to_vec(), (0..x.numel()).map(|_| StandardNormal.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    /// `F_θ(x, t, s)`.
    Velocity,
    /// `f_θ(x, t, s)`.
    Solution,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Fm,
    /// Per-sample `(t, ℓ, s)`.
    Scm(Vec<(f64, f64, f64)>),
    Uniform,
}

/// A frozen student-regression problem: inputs, conditioning and targets.
#[derive(Debug, Clone)]
pub struct Regression {
    pub x: Tensor,
    pub cond: Conditioning,
    pub target: Tensor,
    pub plans: Option<Vec<DropPlan>>,
    pub path: Path,
    pub output: Output,
    pub weighting: Weighting,
}

impl Regression {
    pub fn batch(&self) -> usize {
        self.cond.batch()
    }
}

/// Student loss `mean_b w_b·MSE_b` with per-sample detached weights, or with
/// `frozen` weights when given. Returns the loss and the weights used.
pub fn regress(
    tape: &mut Tape,
    vars: &[Var],
    net: &Network,
    reg: &Regression,
    cfg: &LossConfig,
    frozen: Option<&[f64]>,
) -> Result<(Var, Vec<f64>)> {
    let x = tape.constant(reg.x.clone());
    let out = match reg.output {
        Output::Velocity => net.velocity(tape, vars, x, &reg.cond, reg.plans.as_deref(), reg.path)?,
        Output::Solution => net.solution(tape, vars, x, &reg.cond, reg.plans.as_deref(), reg.path)?,
    };
    let target = tape.constant(reg.target.clone());
    let diff = tape.sub(out, target)?;
    let mse = tape.segment_mean_square(diff, net.cfg.tokens())?;
    let weights = match frozen {
        Some(w) => w.to_vec(),
        None => {
            let m = tape.value(mse).data();
            match &reg.weighting {
                Weighting::Fm => m.iter().map(|&v| fm_weight(v, cfg.eps, cfg.p)).collect(),
                Weighting::Scm(times) => {
                    m.iter().zip(times).map(|(&v, &(t, l, s))| scm_weight(t, l, s, v, cfg.eps, cfg.p)).collect()
                }
                Weighting::Uniform => vec![1.0; m.len()],
            }
        }
    };
    let loss = tape.weighted_mean(mse, &weights)?;
    Ok((loss, weights))
}

/// Value of a forward with no gradient tracking.
pub fn evaluate(
    net: &Network,
    store: &ParamStore,
    x: &Tensor,
    cond: &Conditioning,
    plans: Option<&[DropPlan]>,
    path: Path,
    output: Output,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = store.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = match output {
        Output::Velocity => net.velocity(&mut tape, &vars, xv, cond, plans, path)?,
        Output::Solution => net.solution(&mut tape, &vars, xv, cond, plans, path)?,
    };
    Ok(tape.value(out).clone())
}

/// One group of a training batch: clean data and labels.
#[derive(Debug, Clone)]
pub struct Group<'a> {
    pub x0: Tensor,
    pub labels: &'a [usize],
    pub plans: Option<Vec<DropPlan>>,
}

/// Networks and per-step settings shared by the target constructions.
pub struct Targets<'a> {
    pub net: &'a Network,
    pub online: &'a ParamStore,
    /// `θ⁻`.
    pub target: &'a ParamStore,
    pub cfg: &'a LossConfig,
    /// Guidance scale of this step.
    pub w: f64,
    pub progress: f64,
}

impl Targets<'_> {
    fn null(&self, n: usize) -> Vec<usize> {
        vec![self.net.cfg.null_class(); n]
    }

    /// Guided velocity at `(x_t, t)`: `v_gt` in `none` mode, otherwise
    /// `w·v_gt + (1−w)·v_uncond` with a detached baseline.
    fn guided(&self, x_t: &Tensor, v_gt: &Tensor, t: &[f64], plans: Option<&[DropPlan]>) -> Result<Tensor> {
        let b = t.len();
        let uncond = Conditioning { t: t.to_vec(), s: t.to_vec(), w: vec![0.0; b], labels: self.null(b) };
        let base = match self.cfg.guidance {
            Guidance::None => return Ok(v_gt.clone()),
            Guidance::Pdg => evaluate(self.net, self.online, x_t, &uncond, None, Path::Weak, Output::Velocity)?,
            Guidance::Full => evaluate(self.net, self.online, x_t, &uncond, plans, Path::Full, Output::Velocity)?,
        };
        Ok(Tensor::raw(v_gt.shape().to_vec(), pdg_velocity(v_gt.data(), base.data(), self.w)))
    }

    fn step_w(&self) -> f64 {
        if self.cfg.guidance == Guidance::None {
            1.0
        } else {
            self.w
        }
    }

    /// FM regression; `unconditional` trains the baseline on `v_gt`.
    pub fn fm(&self, g: &Group, unconditional: bool, rng: &mut impl Rng) -> Result<Regression> {
        let b = g.labels.len();
        let t: Vec<f64> = (0..b).map(|_| sample_time(&self.cfg.time_t, rng)).collect();
        let x1 = noise_like(&g.x0, rng);
        let x_t = interpolate(&g.x0, &x1, &t);
        let v_gt = sub(&x1, &g.x0);
        if unconditional {
            let (path, plans) = match self.cfg.guidance {
                Guidance::Pdg => (Path::Weak, None),
                _ => (Path::Full, g.plans.clone()),
            };
            let cond = Conditioning { t: t.clone(), s: t, w: vec![0.0; b], labels: self.null(b) };
            return Ok(Regression { x: x_t, cond, target: v_gt, plans, path, output: Output::Velocity, weighting: Weighting::Fm });
        }
        let target = self.guided(&x_t, &v_gt, &t, g.plans.as_deref())?;
        let cond = Conditioning { t: t.clone(), s: t, w: vec![self.step_w(); b], labels: g.labels.to_vec() };
        Ok(Regression { x: x_t, cond, target, plans: g.plans.clone(), path: Path::Full, output: Output::Velocity, weighting: Weighting::Fm })
    }

    /// SCM regression of `f_θ(x_t,t,s)` onto `f_θ⁻(x̂_ℓ, ℓ, s)`.
    pub fn scm(&self, g: &Group, rng: &mut impl Rng) -> Result<Regression> {
        let b = g.labels.len();
        let cfg = self.cfg;
        let range = r_range(cfg, self.progress);
        let triples: Vec<(f64, f64, f64)> = (0..b).map(|_| sample_triple_with(&cfg.time_t, &cfg.time_s, range, rng)).collect();
        self.scm_with(g, triples, rng)
    }

    pub fn scm_with(&self, g: &Group, triples: Vec<(f64, f64, f64)>, rng: &mut impl Rng) -> Result<Regression> {
        let b = g.labels.len();
        let t: Vec<f64> = triples.iter().map(|x| x.0).collect();
        let l: Vec<f64> = triples.iter().map(|x| x.1).collect();
        let s: Vec<f64> = triples.iter().map(|x| x.2).collect();
        if triples.iter().any(|&(t, l, s)| t - l < TRIPLE_GUARD || t - s < TRIPLE_GUARD || !(l >= s)) {
            return Err(Error::Usage("SCM triples must satisfy s ≤ ℓ < t with guarded gaps".into()));
        }
        let x1 = noise_like(&g.x0, rng);
        let x_t = interpolate(&g.x0, &x1, &t);
        let v_gt = sub(&x1, &g.x0);
        let plans = g.plans.as_deref();
        let w = vec![self.step_w(); b];
        let v_pdg = self.guided(&x_t, &v_gt, &t, plans)?;
        let rho = self.cfg.velocity_mix;
        let v_mix = if rho > 0.0 {
            let own = Conditioning { t: t.clone(), s: t.clone(), w: w.clone(), labels: g.labels.to_vec() };
            let f = evaluate(self.net, self.online, &x_t, &own, plans, Path::Full, Output::Velocity)?;
            v_pdg.data().iter().zip(f.data()).map(|(a, b)| (1.0 - rho) * a + rho * b).collect()
        } else {
            v_pdg.into_data()
        };
        let per = x_t.numel() / b;
        let x_l: Vec<f64> = x_t.data().iter().zip(&v_mix).enumerate().map(|(i, (x, v))| x + v * (l[i / per] - t[i / per])).collect();
        let x_l = Tensor::raw(x_t.shape().to_vec(), x_l);
        let tail = Conditioning { t: l, s: s.clone(), w: w.clone(), labels: g.labels.to_vec() };
        let target = evaluate(self.net, self.target, &x_l, &tail, plans, Path::Full, Output::Solution)?;
        let cond = Conditioning { t, s, w, labels: g.labels.to_vec() };
        Ok(Regression { x: x_t, cond, target, plans: g.plans.clone(), path: Path::Full, output: Output::Solution, weighting: Weighting::Scm(triples) })
    }

    /// MVA regression of `f_θ(x_t,t,s)` onto `f_θ⁻(f_θ⁻(x_t,t,ℓ),ℓ,s)` on the grid.
    pub fn mva(&self, g: &Group, rng: &mut impl Rng) -> Result<Regression> {
        let grid = mva_grid(self.cfg.k_discrete, self.cfg.time_t.shift)?;
        let triples: Vec<(f64, f64, f64)> = (0..g.labels.len()).map(|_| sample_grid_triple(&grid, rng)).collect();
        self.mva_with(g, &triples, rng)
    }

    pub fn mva_with(&self, g: &Group, triples: &[(f64, f64, f64)], rng: &mut impl Rng) -> Result<Regression> {
        let b = g.labels.len();
        let t: Vec<f64> = triples.iter().map(|x| x.0).collect();
        let l: Vec<f64> = triples.iter().map(|x| x.1).collect();
        let s: Vec<f64> = triples.iter().map(|x| x.2).collect();
        let x1 = noise_like(&g.x0, rng);
        let x_t = interpolate(&g.x0, &x1, &t);
        let plans = g.plans.as_deref();
        let w = vec![self.step_w(); b];
        let labels = g.labels.to_vec();
        let head = Conditioning { t: t.clone(), s: l.clone(), w: w.clone(), labels: labels.clone() };
        let x_l = evaluate(self.net, self.target, &x_t, &head, plans, Path::Full, Output::Solution)?;
        let tail = Conditioning { t: l, s: s.clone(), w: w.clone(), labels: labels.clone() };
        let target = evaluate(self.net, self.target, &x_l, &tail, plans, Path::Full, Output::Solution)?;
        let cond = Conditioning { t, s, w, labels };
        Ok(Regression { x: x_t, cond, target, plans: g.plans.clone(), path: Path::Full, output: Output::Solution, weighting: Weighting::Uniform })
    }
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::raw(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())
}

/// Rows `[start, start + len)` of sample-major data with `per` rows per sample.
pub fn sample_rows(x: &Tensor, per: usize, start: usize, len: usize) -> Tensor {
    let width = x.cols();
    let data = x.data()[start * per * width..(start + len) * per * width].to_vec();
    Tensor::raw(vec![len * per, width], data)
}

/// Parameters, EMA shadow and optimiser state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, lr: f64) -> Self {
        let adam = Adam::new(&params, lr);
        Self { ema: params.clone(), params, adam, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub drop_ratio: f64,
    /// Fraction of training completed, in `[0, 1]`.
    pub progress: f64,
    pub ema_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub loss_fm: Option<f64>,
    pub loss_scm: Option<f64>,
    pub loss_mva: Option<f64>,
    pub total: f64,
    pub shares: [f64; 3],
    pub sizes: [usize; 3],
    pub mva_active: bool,
    pub weak_fm: bool,
    pub w: f64,
    pub grad_norm: f64,
}

impl LossRecord {
    /// `Σ share·loss` over the groups that ran.
    pub fn recomputed_total(&self) -> f64 {
        [self.loss_fm, self.loss_scm, self.loss_mva]
            .iter()
            .zip(self.shares)
            .filter_map(|(l, s)| l.map(|l| s * l))
            .sum()
    }
}

/// The three frozen regressions of a step, before any gradient is taken.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub regressions: [Option<Regression>; 3],
    pub shares: [f64; 3],
    pub sizes: [usize; 3],
    pub mva_active: bool,
    pub weak_fm: bool,
    pub w: f64,
}

/// Draws guidance scale, drop plans and all targets for one step.
pub fn plan_step(
    net: &Network,
    state: &TrainState,
    x0: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    opts: StepOptions,
    rng: &mut impl Rng,
) -> Result<StepPlan> {
    cfg.validate()?;
    let n = net.cfg.tokens();
    let batch = labels.len();
    if batch == 0 || x0.shape() != [batch * n, net.cfg.d_in] {
        return Err(Error::dim("train_step", format!("data {:?} for {batch} labels", x0.shape())));
    }
    let active = mva_active(cfg, opts.progress);
    let shares = cfg.shares(opts.progress);
    let sizes = split_batch(batch, shares);
    let w = if cfg.w_max > cfg.w_min { rng.random_range(cfg.w_min..cfg.w_max) } else { cfg.w_min };
    let weak_fm = cfg.guidance != Guidance::None && rng.random::<f64>() < cfg.p_drop;
    let plans = if opts.drop_ratio > 0.0 { Some(make_drop_plans(n, opts.drop_ratio, batch, rng)?) } else { None };
    let target = match cfg.target {
        TargetNet::Ema => &state.ema,
        TargetNet::Detach => &state.params,
    };
    let targets = Targets { net, online: &state.params, target, cfg, w, progress: opts.progress };
    let mut regressions: [Option<Regression>; 3] = [None, None, None];
    let mut start = 0;
    for (k, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        let group = Group {
            x0: sample_rows(x0, n, start, size),
            labels: &labels[start..start + size],
            plans: plans.as_ref().map(|p| p[start..start + size].to_vec()),
        };
        regressions[k] = Some(match k {
            0 => targets.fm(&group, weak_fm, rng)?,
            1 => targets.scm(&group, rng)?,
            _ => targets.mva(&group, rng)?,
        });
        start += size;
    }
    Ok(StepPlan { regressions, shares, sizes, mva_active: active, weak_fm, w })
}

/// One optimisation step: targets, weighted losses, backward, Adam, EMA.
pub fn train_step(
    net: &Network,
    state: &mut TrainState,
    x0: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    opts: StepOptions,
    rng: &mut impl Rng,
) -> Result<LossRecord> {
    let plan = plan_step(net, state, x0, labels, cfg, opts, rng)?;
    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape, true);
    let mut losses = [None; 3];
    let mut total: Option<Var> = None;
    for (k, reg) in plan.regressions.iter().enumerate() {
        let Some(reg) = reg else { continue };
        let (loss, _) = regress(&mut tape, &vars, net, reg, cfg, None)?;
        losses[k] = Some(tape.value(loss).item());
        let term = tape.scale(loss, plan.shares[k])?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("every batch group is empty".into()))?;
    tape.backward(total)?;
    let grads = state.params.collect_grads(&tape, &vars);
    let grad_norm = state.adam.update(&mut state.params, &grads)?;
    ema_update(&mut state.ema, &state.params, opts.ema_decay)?;
    state.step += 1;
    Ok(LossRecord {
        loss_fm: losses[0],
        loss_scm: losses[1],
        loss_mva: losses[2],
        total: tape.value(total).item(),
        shares: plan.shares,
        sizes: plan.sizes,
        mva_active: plan.mva_active,
        weak_fm: plan.weak_fm,
        w: plan.w,
        grad_norm,
    })
}
