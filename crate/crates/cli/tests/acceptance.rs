//! Acceptance suite: one line per criterion, tolerances pinned below.
//!
//! `EFLOW_ACCEPTANCE=3,7` runs a subset. Failures exit non-zero only with
//! `EFLOW_ACCEPTANCE_STRICT=1`.

use std::cell::OnceCell;
use std::process::ExitCode;
use std::rc::Rc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use eflow_bench::{training_throughput, LayerInstance, Recipe, SweepSpec, SweepVariant, ThroughputSpec};
use eflow_cli::checkpoint::Checkpoint;
use eflow_cli::oracle::{self, DELTAS, HALVING_TOL, KS, RANDOM_MAPS};
use eflow_cli::train::Trainer;
use eflow_cli::RunConfig;
use eflow_core::attention::{cost, AttentionConfig, RowLayout};
use eflow_core::backbone::{BackboneConfig, Conditioning, Init, Network, Path};
use eflow_core::datasets::{mmd, BANDWIDTHS};
use eflow_core::gradcheck::{self, SuiteOptions};
use eflow_core::objectives::{evaluate, Output};
use eflow_core::params::normal;
use eflow_core::rng::{seeded, stream, Domain};
use eflow_core::sampler::{build_schedule, sample, NetworkModel, PointwiseMap};
use eflow_core::theory::FixedPointFlow;
use eflow_core::{Tape, Tensor};

const IDENTITY_TOL: f64 = 1e-10;
const IDENTITY_BUDGET: Duration = Duration::from_secs(10);
const CERT_BUDGET: Duration = Duration::from_secs(30);
const GRAD_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ATTN_TOL: f64 = 1e-12;
const ATTN_BUDGET: Duration = Duration::from_secs(30);
const BOUNDARY_CASES: u64 = 100;
const EXACT_FLOPS_MAX_N: usize = 1024;
/// Cost ratio when N doubles, at the largest N for softmax and GLGA.
const SOFTMAX_DOUBLING: (f64, f64) = (3.9, 4.0);
const LINEAR_DOUBLING: (f64, f64) = (1.95, 2.05);
/// Largest over smallest of `flops / (N·(d + |W|))` for GLGA across the grid.
const SHAPE_SPREAD: f64 = 1.25;
/// Same for the softmax quadratic coefficient `(f(2N) - 2f(N)) / N²`.
const QUADRATIC_SPREAD: f64 = 1.01;
const LATENCY_COUNTS: [usize; 5] = [256, 512, 1024, 2048, 4096];
const LATENCY_REPEATS: usize = 5;
const THROUGHPUT_BUDGET: Duration = Duration::from_secs(300);
const FIXED_POINT_TOL: f64 = 1e-10;
const EVAL_COUNT: usize = 4000;
const SEEDS: [u64; 3] = [0, 1, 2];
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const FEW_STEPS: usize = 4;
const MANY_STEPS: usize = 40;
const FEW_VS_MANY_FACTOR: f64 = 2.0;
const MVA_WINS_NEEDED: usize = 2;

/// Shared by both generative recipes.
const TOY_BASE: &str = r#"
[model]
d = 16
n_mid = 1
[train]
iters = 20000
batch = 128
"#;

const FM_ONLY: &str = r#"
[loss]
a = 1.0
b = 0.0
guidance = "none"
[sample]
method = "euler"
w_inf = 1.0
"#;

const PDG_SFM_MVA: &str = r#"
[loss]
guidance = "pdg"
target = "detach"
w_min = 1.0
w_max = 2.0
[time]
s_mu = -2.5
[sample]
w_inf = 1.0
"#;

const PDG_SFM_NO_MVA: &str = r#"
[loss]
guidance = "pdg"
target = "detach"
w_min = 1.0
w_max = 2.0
mva_start_fraction = 1.0
[time]
s_mu = -2.5
[sample]
w_inf = 1.0
"#;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn c01_identity() -> Result<Outcome> {
    let start = Instant::now();
    let row = oracle::random_family(RANDOM_MAPS, 1)?;
    let took = start.elapsed();
    outcome(
        row.max_gap <= IDENTITY_TOL && row.pass && within(took, IDENTITY_BUDGET),
        format!("{} maps, max |residual - defect| = {:.3e} (tol {IDENTITY_TOL:e}), {:.2?}", row.maps, row.max_gap, took),
    )
}

fn c02_certificate() -> Result<Outcome> {
    let start = Instant::now();
    let (certs, halving_failures) = oracle::certificates()?;
    let took = start.elapsed();
    ensure!(certs.len() == DELTAS.len() * KS.len(), "certificate grid incomplete");
    let bounded = certs.iter().filter(|c| c.lhs <= c.rhs).count();
    let worst_ratio = certs.iter().map(|c| c.lhs / c.rhs).fold(0.0f64, f64::max);
    let mut worst_halving: f64 = 0.0;
    for pair in certs.windows(2).filter(|p| p[0].delta == p[1].delta) {
        worst_halving = worst_halving.max((pair[1].quadratic_term / pair[0].quadratic_term - 0.5).abs() / 0.5);
    }
    outcome(
        bounded == certs.len() && halving_failures.is_empty() && worst_halving <= HALVING_TOL && within(took, CERT_BUDGET),
        format!(
            "lhs <= rhs in {bounded}/{} cells (max lhs/rhs {worst_ratio:.3}), quadratic term halving error {:.2e} (tol {HALVING_TOL}), {took:.2?}",
            certs.len(),
            worst_halving
        ),
    )
}

fn c03_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let reports = gradcheck::run_suite(SuiteOptions { include_losses: true, inject_fault: false })?;
    let took = start.elapsed();
    let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("suite is non-empty");
    let failed: Vec<&str> = reports.iter().filter(|r| r.max_rel_err > GRAD_TOL).map(|r| r.name.as_str()).collect();
    let losses = ["fm_loss", "scm_loss", "mva_loss"].iter().all(|l| reports.iter().any(|r| r.name == *l && r.checked > 0));
    outcome(
        failed.is_empty() && losses && within(took, GRAD_BUDGET),
        format!(
            "{} ops incl. fm/scm/mva losses, worst {} at {:.2e} (tol {GRAD_TOL:e}), failed [{}], {took:.2?}",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            failed.join(" ")
        ),
    )
}

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    normal(&mut seeded(seed), &[rows, cols], 1.0)
}

fn softmax_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (n, d) = (q.rows(), q.cols());
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        for i in 0..n {
            let scores: Vec<f64> =
                (0..n).map(|j| scale * q.row(i)[r.clone()].iter().zip(&k.row(j)[r.clone()]).map(|(a, b)| a * b).sum::<f64>()).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in r.clone() {
                    out[i * d + c] += ej / z * v.at(j, c);
                }
            }
        }
    }
    out
}

fn linear_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (n, d) = (q.rows(), q.cols());
    let hd = d / heads;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let score: f64 = q.row(i)[r.clone()].iter().zip(&k.row(j)[r.clone()]).map(|(a, b)| a * b).sum();
                for c in r {
                    out[i * d + c] += score * v.at(j, c);
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn c04_attention() -> Result<Outcome> {
    let start = Instant::now();
    let (mut window_err, mut linear_err, mut drift): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for case in 0..40u64 {
        let n = 2 + (case as usize * 7) % 30;
        let heads = 1 + (case % 2) as usize;
        let d = 4 * heads;
        let (q, k, v) = (rand_matrix(n, d, 3 * case), rand_matrix(n, d, 3 * case + 1), rand_matrix(n, d, 3 * case + 2));
        let positions: Vec<usize> = (0..n).collect();
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let w = tape.window_attention(qv, kv, vv, heads, n, &positions, n)?;
        window_err = window_err.max(max_diff(tape.value(w).data(), &softmax_oracle(&q, &k, &v, heads)));
        let l = tape.linear_attention(qv, kv, vv, heads, n, 1.0)?;
        linear_err = linear_err.max(max_diff(tape.value(l).data(), &linear_oracle(&q, &k, &v, heads)));

        let half_span = (case % 5) as usize;
        let i = (case as usize * 11) % n;
        let kept: Vec<usize> = (0..n).filter(|&j| j.abs_diff(i) <= half_span || (j * 31 + case as usize) % 3 == 0).collect();
        let pick = |t: &Tensor| Tensor::matrix(kept.len(), d, kept.iter().flat_map(|&j| t.row(j).to_vec()).collect());
        let full = tape.window_attention(qv, kv, vv, heads, n, &positions, half_span)?;
        let full_row = tape.value(full).row(i).to_vec();
        let mut sub_tape = Tape::new();
        let (sq, sk, sv) = (sub_tape.constant(pick(&q)?), sub_tape.constant(pick(&k)?), sub_tape.constant(pick(&v)?));
        let sub = sub_tape.window_attention(sq, sk, sv, heads, kept.len(), &kept, half_span)?;
        let at = kept.iter().position(|&j| j == i).expect("query token is kept");
        drift = drift.max(max_diff(&full_row, sub_tape.value(sub).row(at)));
    }
    let took = start.elapsed();
    outcome(
        window_err <= ATTN_TOL && linear_err <= ATTN_TOL && drift <= ATTN_TOL && within(took, ATTN_BUDGET),
        format!(
            "full window vs softmax {window_err:.2e}, linear vs double loop {linear_err:.2e}, drop drift {drift:.2e} (tol {ATTN_TOL:e}), {took:.2?}"
        ),
    )
}

fn c05_boundary() -> Result<Outcome> {
    let cfg = BackboneConfig {
        attn: AttentionConfig { d: 8, heads: 2, m: 1, interleave_k: 2, ..AttentionConfig::default() },
        t_frames: 2,
        h: 2,
        w: 2,
        d_in: 3,
        n_enc: 1,
        n_mid: 2,
        n_dec: 1,
        ffn_mult: 1,
        freq_dim: 4,
        num_classes: 3,
    };
    let net = Network::new(cfg)?;
    let mut exact = 0;
    for case in 0..BOUNDARY_CASES {
        let mut rng = stream(case, Domain::Test, 1);
        let params = net.init(&mut rng, Init::Random(0.5));
        let x = normal(&mut rng, &[8, 3], 3.0);
        let t = (case as f64 + 0.5) / BOUNDARY_CASES as f64;
        let cond = Conditioning::uniform(1, t, t, 1.0 + (case % 4) as f64, (case % 4) as usize);
        let y = evaluate(&net, &params, &x, &cond, None, Path::Full, Output::Solution)?;
        if y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
    }
    outcome(exact == BOUNDARY_CASES, format!("f(x, t, t, c) == x bitwise in {exact}/{BOUNDARY_CASES} cases"))
}

fn c06_complexity() -> Result<Outcome> {
    let spec = SweepSpec::default();
    let mut mismatches = Vec::new();
    for variant in SweepVariant::ALL {
        for &n in spec.counts.iter().filter(|&&n| n <= EXACT_FLOPS_MAX_N) {
            let layer = LayerInstance::new(variant, n, &spec)?;
            if layer.measured_flops()? != layer.analytic_flops() {
                mismatches.push(format!("{}@{n}", variant.name()));
            }
        }
    }
    let analytic = |variant, n| LayerInstance::new(variant, n, &spec).map(|l| l.analytic_flops() as f64);
    let spread = |v: &[f64]| v.iter().cloned().fold(0.0f64, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min);
    let (mut soft_shape, mut glga_shape, mut lin_doubling) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &spec.counts {
        let layout = spec.layout(n)?;
        let window = cost::window_total(&RowLayout::single(&layout), layout.half_span(spec.attn.m)) as f64 / n as f64;
        glga_shape.push(analytic(SweepVariant::Glga, n)? / (n as f64 * (spec.attn.d as f64 + window)));
    }
    for pair in spec.counts.windows(2) {
        let (a, b) = (analytic(SweepVariant::Softmax, pair[0])?, analytic(SweepVariant::Softmax, pair[1])?);
        soft_shape.push((b - 2.0 * a) / (pair[0] * pair[0]) as f64);
        lin_doubling.push(analytic(SweepVariant::Linear, pair[1])? / analytic(SweepVariant::Linear, pair[0])?);
    }
    let top = &spec.counts[spec.counts.len() - 2..];
    let soft_last = analytic(SweepVariant::Softmax, top[1])? / analytic(SweepVariant::Softmax, top[0])?;
    let glga_last = analytic(SweepVariant::Glga, top[1])? / analytic(SweepVariant::Glga, top[0])?;
    let (soft_spread, glga_spread) = (spread(&soft_shape), spread(&glga_shape));
    let in_band = |v: f64, band: (f64, f64)| v >= band.0 && v <= band.1;
    let pass = mismatches.is_empty()
        && soft_spread <= QUADRATIC_SPREAD
        && glga_spread <= SHAPE_SPREAD
        && in_band(soft_last, SOFTMAX_DOUBLING)
        && in_band(glga_last, LINEAR_DOUBLING)
        && lin_doubling.iter().all(|&r| in_band(r, LINEAR_DOUBLING));
    outcome(
        pass,
        format!(
            "exact for N <= {EXACT_FLOPS_MAX_N} (mismatches [{}]); over N {:?}: softmax (f(2N) - 2f(N))/N² spread {soft_spread:.4} (max {QUADRATIC_SPREAD}), glga f/(N(d+|W|)) spread {glga_spread:.3} (max {SHAPE_SPREAD}); last doubling softmax {soft_last:.3}, glga {glga_last:.3}; linear doublings {:.3}..{:.3}",
            mismatches.join(" "),
            spec.counts,
            lin_doubling.iter().cloned().fold(f64::MAX, f64::min),
            lin_doubling.iter().cloned().fold(0.0f64, f64::max),
        ),
    )
}

fn c07_latency() -> Result<Outcome> {
    let spec = SweepSpec {
        counts: LATENCY_COUNTS.to_vec(),
        variants: vec![SweepVariant::Softmax, SweepVariant::Glga, SweepVariant::GlgaDrop75],
        repeats: LATENCY_REPEATS,
        ..SweepSpec::default()
    };
    let rows = eflow_bench::latency_sweep(&spec)?;
    let n = *LATENCY_COUNTS.last().expect("non-empty");
    let at = |v: SweepVariant| rows.iter().find(|r| r.variant == v && r.n == n).map(|r| r.median_ms).expect("swept");
    let (soft, glga, drop) = (at(SweepVariant::Softmax), at(SweepVariant::Glga), at(SweepVariant::GlgaDrop75));
    outcome(
        drop < glga && glga < soft,
        format!("N={n}, median of {LATENCY_REPEATS}: glga+drop75 {drop:.2} ms < glga {glga:.2} ms < softmax {soft:.2} ms"),
    )
}

fn c08_throughput() -> Result<Outcome> {
    let start = Instant::now();
    let rows = training_throughput(&ThroughputSpec::default(), &Recipe::ALL)?;
    let took = start.elapsed();
    let ips = |r: Recipe| rows.iter().find(|x| x.recipe == r).map(|x| x.iters_per_sec).expect("measured");
    let (fm, sfm) = (ips(Recipe::Fm), ips(Recipe::Sfm));
    let (full, pdg, drop) = (ips(Recipe::SfmMvaGlga), ips(Recipe::SfmMvaGlgaPdg), ips(Recipe::SfmMvaGlgaPdgDrop75));
    outcome(
        fm > sfm && pdg > full && drop > pdg && within(took, THROUGHPUT_BUDGET),
        format!("it/s: fm {fm:.2} > sfm {sfm:.2}; pdg {pdg:.2} > full-uncond {full:.2}; pdg+drop75 {drop:.2} > pdg {pdg:.2}; {took:.1?}"),
    )
}

fn toy_config(recipe: &str, seed: u64) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&format!("{TOY_BASE}\n{recipe}"))?;
    cfg.train.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains in memory and returns the trainer with its wall time.
fn train_toy(cfg: RunConfig) -> Result<(Trainer, Duration)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    for iter in 0..trainer.cfg.train.iters {
        trainer.step(iter)?;
    }
    Ok((trainer, start.elapsed()))
}

/// MMD² of `EVAL_COUNT` generated points against held-out data.
fn eval_toy(trainer: &Trainer, steps: usize) -> Result<f64> {
    let cfg = &trainer.cfg;
    let classes = cfg.data.n_components;
    let labels: Vec<usize> = (0..EVAL_COUNT).map(|i| i % classes).collect();
    let points = trainer.generate(&labels, steps, 1_000 + cfg.train.seed)?;
    let (held_out, _) = cfg.data.sample_batch(EVAL_COUNT, None, &mut stream(cfg.train.seed, Domain::Eval, u64::MAX))?;
    Ok(mmd(&points, held_out.data(), 2, &BANDWIDTHS)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct ToyResults {
    fm_few: Vec<f64>,
    fm_many: Vec<f64>,
    mva_few: Vec<f64>,
    no_mva_few: Vec<f64>,
    slowest: Duration,
}

fn toy_results() -> Result<ToyResults> {
    let mut r = ToyResults { fm_few: vec![], fm_many: vec![], mva_few: vec![], no_mva_few: vec![], slowest: Duration::ZERO };
    for seed in SEEDS {
        let (fm, t1) = train_toy(toy_config(FM_ONLY, seed)?)?;
        r.fm_few.push(eval_toy(&fm, FEW_STEPS)?);
        r.fm_many.push(eval_toy(&fm, MANY_STEPS)?);
        let (mva, t2) = train_toy(toy_config(PDG_SFM_MVA, seed)?)?;
        r.mva_few.push(eval_toy(&mva, FEW_STEPS)?);
        let (no_mva, t3) = train_toy(toy_config(PDG_SFM_NO_MVA, seed)?)?;
        r.no_mva_few.push(eval_toy(&no_mva, FEW_STEPS)?);
        r.slowest = r.slowest.max(t1).max(t2).max(t3);
        eprintln!(
            "    seed {seed}: fm {FEW_STEPS}-step {:.3e}, fm {MANY_STEPS}-step {:.3e}, pdg-sfm+mva {:.3e}, pdg-sfm {:.3e}",
            r.fm_few.last().unwrap(),
            r.fm_many.last().unwrap(),
            r.mva_few.last().unwrap(),
            r.no_mva_few.last().unwrap()
        );
    }
    Ok(r)
}

fn c09_generative(r: &ToyResults) -> Result<Outcome> {
    let (fm_few, fm_many, ours) = (median(r.fm_few.clone()), median(r.fm_many.clone()), median(r.mva_few.clone()));
    outcome(
        ours < fm_few && ours <= FEW_VS_MANY_FACTOR * fm_many && within(r.slowest, RUN_BUDGET),
        format!(
            "median MMD² over {} seeds: pdg-sfm+mva {FEW_STEPS}-step {ours:.3e} < fm {FEW_STEPS}-step {fm_few:.3e}; <= {FEW_VS_MANY_FACTOR} x fm {MANY_STEPS}-step {:.3e}; slowest run {:.1?}",
            SEEDS.len(),
            FEW_VS_MANY_FACTOR * fm_many,
            r.slowest
        ),
    )
}

fn c10_mva(r: &ToyResults) -> Result<Outcome> {
    let wins = r.mva_few.iter().zip(&r.no_mva_few).filter(|(a, b)| a <= b).count();
    outcome(
        wins >= MVA_WINS_NEEDED,
        format!("{FEW_STEPS}-step MMD² with MVA <= without in {wins}/{} seeds (need {MVA_WINS_NEEDED})", SEEDS.len()),
    )
}

fn c11_sampler() -> Result<Outcome> {
    let cfg = BackboneConfig {
        attn: AttentionConfig { d: 8, heads: 2, m: 1, ..AttentionConfig::default() },
        t_frames: 1,
        h: 1,
        w: 1,
        d_in: 2,
        n_enc: 1,
        n_mid: 1,
        n_dec: 1,
        ffn_mult: 1,
        freq_dim: 4,
        num_classes: 8,
    };
    let net = Network::new(cfg)?;
    let params = net.init(&mut seeded(4), Init::Random(0.3));
    let model = NetworkModel { net: &net, params: &params };
    let labels: Vec<usize> = (0..64).map(|i| i % 8).collect();
    let schedule = build_schedule(4, 3.0)?;
    let a = sample(&model, &labels, &schedule, 4.0, 17)?;
    let b = sample(&model, &labels, &schedule, 4.0, 17)?;
    let identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let target = vec![0.75, -2.5];
    let fixed = PointwiseMap { map: FixedPointFlow { x0: target.clone() }, channels: 2 };
    let mut worst: f64 = 0.0;
    for n in [1, 2, 4, 8] {
        let out = sample(&fixed, &labels, &build_schedule(n, 3.0)?, 1.0, 5)?;
        for row in out.data().chunks(2) {
            worst = worst.max(max_diff(row, &target));
        }
    }
    outcome(
        identical && worst <= FIXED_POINT_TOL,
        format!("same seed bitwise identical: {identical}; fixed-point fixture error over N in {{1,2,4,8}} {worst:.2e} (tol {FIXED_POINT_TOL:e})"),
    )
}

fn c12_checkpoint() -> Result<Outcome> {
    let cfg = RunConfig::parse("[model]\nd = 8\nn_mid = 1\nfreq_dim = 8\n[train]\niters = 12\nbatch = 16\nseed = 5\n")?;
    let (straight, _) = train_toy(cfg.clone())?;
    let bytes = straight.checkpoint().to_bytes();
    let reloaded = Checkpoint::from_bytes(&bytes)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("a.ckpt");
    reloaded.save(&path)?;
    let from_disk = Checkpoint::load(&path)?;
    let restored = Trainer::from_checkpoint(cfg.clone(), &from_disk)?;
    let idempotent = reloaded.to_bytes() == bytes && from_disk.to_bytes() == bytes && restored.checkpoint().to_bytes() == bytes;

    let mut first = Trainer::new(cfg.clone())?;
    for iter in 0..5 {
        first.step(iter)?;
    }
    let mid = Checkpoint::from_bytes(&first.checkpoint().to_bytes())?;
    let mut resumed = Trainer::from_checkpoint(cfg.clone(), &mid)?;
    for iter in mid.step..cfg.train.iters {
        resumed.step(iter)?;
    }
    let equivalent = resumed.checkpoint().to_bytes() == bytes;
    outcome(
        idempotent && equivalent,
        format!("round trip bitwise: {idempotent}; resume at step {} reproduces {} steps bitwise: {equivalent}", mid.step, cfg.train.iters),
    )
}

/// The nine training runs are shared by criteria 9 and 10.
fn shared(cell: &OnceCell<Result<ToyResults, String>>) -> Result<&ToyResults> {
    cell.get_or_init(|| toy_results().map_err(|e| format!("{e:#}"))).as_ref().map_err(|e| anyhow::anyhow!("{e}"))
}

type Criterion = (u32, &'static str, Box<dyn Fn() -> Result<Outcome>>);

fn main() -> ExitCode {
    let only: Option<Vec<u32>> =
        std::env::var("EFLOW_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let toy = Rc::new(OnceCell::new());
    let (toy9, toy10) = (toy.clone(), toy.clone());
    let criteria: Vec<Criterion> = vec![
        (1, "residual/defect identity", Box::new(c01_identity)),
        (2, "long-jump error certificate", Box::new(c02_certificate)),
        (3, "finite-difference gradients", Box::new(c03_gradients)),
        (4, "attention equivalences", Box::new(c04_attention)),
        (5, "boundary condition", Box::new(c05_boundary)),
        (6, "complexity accounting", Box::new(c06_complexity)),
        (7, "latency ordering", Box::new(c07_latency)),
        (8, "training throughput ordering", Box::new(c08_throughput)),
        (9, "few-step generative quality", Box::new(move || c09_generative(shared(&toy9)?))),
        (10, "mean-velocity ablation", Box::new(move || c10_mva(shared(&toy10)?))),
        (11, "sampler determinism and fixed point", Box::new(c11_sampler)),
        (12, "checkpoint round trip and resume", Box::new(c12_checkpoint)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in criteria.iter().filter(|c| wanted(c.0)) {
        ran += 1;
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] {id:>2} {name}: {detail} [{:.1?}]", start.elapsed());
    }
    println!("{} of {ran} criteria passed", ran - failed);
    let strict = std::env::var_os("EFLOW_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if failed == 0 || !strict { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
