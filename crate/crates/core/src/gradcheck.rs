//! Central finite-difference verification of every tape primitive and of
//! the three training losses with frozen targets and weights.

use rand::Rng;

use crate::attention::AttentionConfig;
use crate::backbone::{BackboneConfig, Init, Network};
use crate::objectives::{plan_step, regress, LossConfig, StepOptions, TrainState};
use crate::params::normal;
use crate::rng::seeded;
use crate::tensor::{Axis, Tape, Tensor, Var};
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Differences below this are treated as exact.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

type Build<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

/// Relative error with an absolute floor on the difference.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= ABS_FLOOR {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs())
    }
}

fn scalar(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of `build` with central differences at `inputs`.
pub fn check(name: &str, inputs: Vec<Tensor>, build: Build) -> Result<GradReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(&inputs).map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.clone();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = scalar(&probe, &build)?;
            probe[k].data_mut()[i] = orig - STEP;
            let down = scalar(&probe, &build)?;
            probe[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[k][i], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok(GradReport { name: name.into(), checked, max_rel_err: worst, pass: worst <= REL_TOL })
}

/// Reduces any tensor to a scalar through a fixed random projection.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(normal(&mut seeded(seed), &shape, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SuiteOptions {
    pub include_losses: bool,
    /// Adds a deliberately wrong op (`x·detach(x)` as `x²`) that must fail.
    pub inject_fault: bool,
}

fn primitive_cases(rng: &mut impl Rng) -> Vec<(&'static str, Vec<Tensor>, Build<'static>)> {
    let mut c: Vec<(&'static str, Vec<Tensor>, Build<'static>)> = Vec::new();
    let m34 = |rng: &mut _| rand_t(rng, &[3, 4]);
    c.push(("add", vec![m34(rng), m34(rng)], Box::new(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 1) })));
    c.push(("sub", vec![m34(rng), m34(rng)], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 2) })));
    c.push(("mul", vec![m34(rng), m34(rng)], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 3) })));
    c.push(("add_row", vec![m34(rng), rand_t(rng, &[4])], Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; project(t, y, 4) })));
    c.push(("scale", vec![m34(rng)], Box::new(|t, v| { let y = t.scale(v[0], -1.7)?; project(t, y, 5) })));
    c.push(("add_scalar", vec![m34(rng)], Box::new(|t, v| { let y = t.add_scalar(v[0], 0.3)?; let y = t.mul(y, y)?; project(t, y, 6) })));
    c.push(("sigmoid", vec![m34(rng)], Box::new(|t, v| { let y = t.sigmoid(v[0])?; project(t, y, 7) })));
    c.push(("silu", vec![m34(rng)], Box::new(|t, v| { let y = t.silu(v[0])?; project(t, y, 8) })));
    c.push(("matmul", vec![rand_t(rng, &[3, 5]), rand_t(rng, &[5, 2])], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 9) })));
    c.push(("transpose", vec![m34(rng)], Box::new(|t, v| { let y = t.transpose(v[0])?; project(t, y, 10) })));
    c.push(("softmax_rows", vec![m34(rng)], Box::new(|t, v| { let y = t.softmax_rows(v[0])?; project(t, y, 11) })));
    c.push(("rms_norm", vec![m34(rng), rand_t(rng, &[4])], Box::new(|t, v| { let y = t.rms_norm(v[0], v[1], 1e-6)?; project(t, y, 12) })));
    c.push(("rope", vec![rand_t(rng, &[3, 8])], Box::new(|t, v| { let y = t.rope(v[0], &[0, 5, 9], 10_000.0, 4)?; project(t, y, 13) })));
    c.push(("gather_rows", vec![m34(rng)], Box::new(|t, v| { let y = t.gather_rows(v[0], &[2, 0, 2])?; project(t, y, 14) })));
    c.push((
        "scatter_rows_with_fill",
        vec![rand_t(rng, &[2, 4]), rand_t(rng, &[4])],
        Box::new(|t, v| { let y = t.scatter_rows_with_fill(v[0], &[3, 1], 5, v[1])?; project(t, y, 15) }),
    ));
    c.push(("mean_square", vec![m34(rng)], Box::new(|t, v| t.mean_square(v[0]))));
    c.push(("sum", vec![m34(rng)], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.sum(y) })));
    c.push((
        "segment_mean_square",
        vec![rand_t(rng, &[6, 2])],
        Box::new(|t, v| { let y = t.segment_mean_square(v[0], 2)?; project(t, y, 16) }),
    ));
    c.push(("weighted_mean", vec![rand_t(rng, &[5])], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.weighted_mean(y, &[0.5, 1.0, 2.0, 0.1, 3.0]) })));
    c.push((
        "concat",
        vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 2]), rand_t(rng, &[1, 3])],
        Box::new(|t, v| {
            let a = t.concat(&[v[0], v[1]], Axis::Cols)?;
            let b = t.concat(&[v[0], v[2]], Axis::Rows)?;
            let pa = project(t, a, 17)?;
            let pb = project(t, b, 18)?;
            t.add(pa, pb)
        }),
    ));
    c.push(("slice_cols", vec![rand_t(rng, &[3, 6])], Box::new(|t, v| { let y = t.slice_cols(v[0], 2, 3)?; project(t, y, 19) })));
    let qkv = |rng: &mut _| vec![rand_t(rng, &[6, 4]), rand_t(rng, &[6, 4]), rand_t(rng, &[6, 4])];
    c.push((
        "linear_attention",
        qkv(rng),
        Box::new(|t, v| { let y = t.linear_attention(v[0], v[1], v[2], 2, 3, 0.5)?; project(t, y, 20) }),
    ));
    c.push((
        "window_attention",
        qkv(rng),
        Box::new(|t, v| { let y = t.window_attention(v[0], v[1], v[2], 2, 3, &[0, 2, 5, 1, 3, 4], 2)?; project(t, y, 21) }),
    ));
    c.push((
        "softmax_attention",
        qkv(rng),
        Box::new(|t, v| { let y = t.softmax_attention(v[0], v[1], v[2], 2, 3)?; project(t, y, 22) }),
    ));
    c.push((
        "gated_sum",
        vec![rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])],
        Box::new(|t, v| { let y = t.gated_sum(v[0], v[1], v[2])?; project(t, y, 23) }),
    ));
    c.push((
        "euler_combine",
        vec![m34(rng), m34(rng)],
        Box::new(|t, v| { let y = t.euler_combine(v[0], v[1], &[0.0, -0.4, 0.7])?; project(t, y, 24) }),
    ));
    c
}

/// The small network used for the loss checks.
pub fn loss_network() -> Result<Network> {
    Network::new(BackboneConfig {
        attn: AttentionConfig { d: 4, heads: 2, m: 1, interleave_k: 2, ..AttentionConfig::default() },
        t_frames: 1,
        h: 2,
        w: 2,
        d_in: 2,
        n_enc: 1,
        n_mid: 1,
        n_dec: 1,
        ffn_mult: 1,
        freq_dim: 2,
        num_classes: 2,
    })
}

fn loss_cases() -> Result<Vec<(&'static str, Vec<Tensor>, Build<'static>)>> {
    let net = loss_network()?;
    let mut rng = seeded(77);
    let params = net.init(&mut rng, Init::Random(0.2));
    let mut state = TrainState::new(params.clone(), 1e-3);
    // A distinct EMA copy so targets are not trivially the student.
    state.ema = net.init(&mut rng, Init::Random(0.2));
    let x0 = normal(&mut rng, &[3 * 3 * 4, 2], 1.0);
    let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
    let cfg = LossConfig { a: 1.0 / 3.0, b: 1.0 / 3.0, p_drop: 0.0, ..LossConfig::default() };
    let opts = StepOptions { drop_ratio: 0.5, progress: 1.0, ema_decay: 0.99 };
    let plan = plan_step(&net, &state, &x0, &labels, &cfg, opts, &mut rng)?;
    let inputs: Vec<Tensor> = (0..params.len()).map(|i| params.tensor(i).clone()).collect();
    let mut out: Vec<(&'static str, Vec<Tensor>, Build<'static>)> = Vec::new();
    for (name, reg) in ["fm_loss", "scm_loss", "mva_loss"].into_iter().zip(plan.regressions) {
        let reg = reg.expect("every group is non-empty");
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let (_, weights) = regress(&mut tape, &vars, &net, &reg, &cfg, None)?;
        let (net, cfg) = (net.clone(), cfg.clone());
        let build: Build<'static> = Box::new(move |t, v| Ok(regress(t, v, &net, &reg, &cfg, Some(&weights))?.0));
        out.push((name, inputs.clone(), build));
    }
    Ok(out)
}

pub fn run_suite(opts: SuiteOptions) -> Result<Vec<GradReport>> {
    let mut rng = seeded(2024);
    let mut cases = primitive_cases(&mut rng);
    if opts.include_losses {
        cases.extend(loss_cases()?);
    }
    if opts.inject_fault {
        cases.push((
            "broken_square",
            vec![rand_t(&mut rng, &[2, 2])],
            Box::new(|t, v| {
                let d = t.detach(v[0]);
                let y = t.mul(v[0], d)?;
                t.sum(y)
            }),
        ));
    }
    cases.into_iter().map(|(name, inputs, build)| check(name, inputs, build)).collect()
}
