//! Few-step sampling: direct jumps to `t = 0` with re-noising in between,
//! plus a plain Euler integrator for velocity-only models.

use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{Conditioning, Network, Path};
use crate::objectives::{evaluate, shift_transform, Output};
use crate::params::ParamStore;
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;
use crate::theory::SolutionMap;
use crate::{Error, Result};

/// Decreasing times `1 = t_N > … > t_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSchedule {
    pub times: Vec<f64>,
}

impl SampleSchedule {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// `shift_transform(k/N)` for `k = N..0`.
pub fn build_schedule(n: usize, shift: f64) -> Result<SampleSchedule> {
    if n == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if !(shift >= 1.0) {
        return Err(Error::Config(format!("schedule shift must be ≥ 1, got {shift}")));
    }
    let times = (0..=n).rev().map(|k| shift_transform(k as f64 / n as f64, shift)).collect();
    Ok(SampleSchedule { times })
}

/// A batched model: `x` is `[B·N × d]` with one label per sample.
pub trait FlowModel {
    /// Rows per sample.
    fn tokens(&self) -> usize;

    fn channels(&self) -> usize;

    /// `f(x, t, s, c, w)`.
    fn jump(&self, x: &Tensor, t: f64, s: f64, labels: &[usize], w: f64) -> Result<Tensor>;

    /// `F(x, t, t, c, w)`.
    fn velocity(&self, x: &Tensor, t: f64, labels: &[usize], w: f64) -> Result<Tensor>;
}

/// A trained network evaluated without gradients.
pub struct NetworkModel<'a> {
    pub net: &'a Network,
    pub params: &'a ParamStore,
}

impl FlowModel for NetworkModel<'_> {
    fn tokens(&self) -> usize {
        self.net.cfg.tokens()
    }

    fn channels(&self) -> usize {
        self.net.cfg.d_in
    }

    fn jump(&self, x: &Tensor, t: f64, s: f64, labels: &[usize], w: f64) -> Result<Tensor> {
        let b = labels.len();
        let cond = Conditioning { t: vec![t; b], s: vec![s; b], w: vec![w; b], labels: labels.to_vec() };
        evaluate(self.net, self.params, x, &cond, None, Path::Full, Output::Solution)
    }

    fn velocity(&self, x: &Tensor, t: f64, labels: &[usize], w: f64) -> Result<Tensor> {
        let b = labels.len();
        let cond = Conditioning { t: vec![t; b], s: vec![t; b], w: vec![w; b], labels: labels.to_vec() };
        evaluate(self.net, self.params, x, &cond, None, Path::Full, Output::Velocity)
    }
}

/// Applies a pointwise solution map to every row; the guidance scale is ignored.
pub struct PointwiseMap<M> {
    pub map: M,
    pub channels: usize,
}

impl<M: SolutionMap> FlowModel for PointwiseMap<M> {
    fn tokens(&self) -> usize {
        1
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn jump(&self, x: &Tensor, t: f64, s: f64, labels: &[usize], _: f64) -> Result<Tensor> {
        let d = self.channels;
        let data = x.data().chunks(d).zip(labels).flat_map(|(row, &c)| self.map.eval(row, t, s, c)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn velocity(&self, x: &Tensor, t: f64, labels: &[usize], _: f64) -> Result<Tensor> {
        // Central difference of the map around s = t.
        let h = 1e-6;
        let up = self.jump(x, t, t + h, labels, 0.0)?;
        let down = self.jump(x, t, t - h, labels, 0.0)?;
        let data = up.data().iter().zip(down.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

fn gaussian(shape: &[usize], seed: u64, index: u64) -> Tensor {
    let mut rng = stream(seed, Domain::Sample, index);
    let n: usize = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Jump sampler: `x̂₀ = f(x, t_n, 0)`, then `x = t_{n−1}·z + (1 − t_{n−1})·x̂₀`
/// until the last jump. Noise for step `n` comes from substream `n`.
pub fn sample(model: &impl FlowModel, labels: &[usize], schedule: &SampleSchedule, w: f64, seed: u64) -> Result<Tensor> {
    if schedule.times.len() < 2 {
        return Err(Error::Config("schedule has no steps".into()));
    }
    let shape = [labels.len() * model.tokens(), model.channels()];
    let mut x = gaussian(&shape, seed, 0);
    for (step, pair) in schedule.times.windows(2).enumerate() {
        let (t, next) = (pair[0], pair[1]);
        let x0 = model.jump(&x, t, 0.0, labels, w)?;
        x = if next > 0.0 {
            let z = gaussian(&shape, seed, step as u64 + 1);
            let data = z.data().iter().zip(x0.data()).map(|(z, x0)| next * z + (1.0 - next) * x0).collect();
            Tensor::raw(shape.to_vec(), data)
        } else {
            x0
        };
    }
    Ok(x)
}

/// Euler integration of `F(x, t, t)` along the schedule.
pub fn sample_euler(model: &impl FlowModel, labels: &[usize], schedule: &SampleSchedule, w: f64, seed: u64) -> Result<Tensor> {
    let shape = [labels.len() * model.tokens(), model.channels()];
    let mut x = gaussian(&shape, seed, 0);
    for pair in schedule.times.windows(2) {
        let (t, next) = (pair[0], pair[1]);
        let v = model.velocity(&x, t, labels, w)?;
        let data = x.data().iter().zip(v.data()).map(|(x, v)| x + (next - t) * v).collect();
        x = Tensor::new(shape.to_vec(), data)?;
    }
    Ok(x)
}
