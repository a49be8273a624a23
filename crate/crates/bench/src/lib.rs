//! Latency sweeps over attention variants and training-throughput
//! comparisons across cumulative training recipes.

use std::io::Write;
use std::time::{Duration, Instant};

use eflow_core::attention::{self, cost, AttentionConfig, GlgaWeights, RowLayout, TokenLayout, Variant};
use eflow_core::backbone::{make_drop_plan, BackboneConfig, Init, Network};
use eflow_core::datasets::TokenGrid;
use eflow_core::objectives::{train_step, Guidance, LossConfig, StepOptions, TrainState};
use eflow_core::params::normal;
use eflow_core::rng::{stream, Domain};
use eflow_core::{flops, Error, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariant {
    Softmax,
    Linear,
    Window,
    Glga,
    /// GLGA on the 25% of tokens kept by structured dropping.
    GlgaDrop75,
}

impl SweepVariant {
    pub const ALL: [SweepVariant; 5] = [Self::Softmax, Self::Linear, Self::Window, Self::Glga, Self::GlgaDrop75];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Linear => "linear",
            Self::Window => "window",
            Self::Glga => "glga",
            Self::GlgaDrop75 => "glga+drop75",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub counts: Vec<usize>,
    pub variants: Vec<SweepVariant>,
    pub repeats: usize,
    pub warmup: usize,
    /// Spatial extent `h × w` of one frame; `N` must be a multiple of it.
    pub frame: (usize, usize),
    pub attn: AttentionConfig,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            counts: vec![256, 512, 1024, 2048, 4096, 8192],
            variants: SweepVariant::ALL.to_vec(),
            repeats: 5,
            warmup: 2,
            frame: (8, 8),
            attn: AttentionConfig { d: 64, heads: 4, m: 4, ..AttentionConfig::default() },
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let per_frame = self.frame.0 * self.frame.1;
        if self.counts.is_empty() || self.counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("token counts must be non-empty and strictly ascending".into()));
        }
        if per_frame == 0 || self.counts.iter().any(|&n| n % per_frame != 0 || n < 4) {
            return Err(Error::Config(format!("token counts must be multiples of the {per_frame}-token frame")));
        }
        if self.repeats < 3 {
            return Err(Error::Config(format!("repeats must be at least 3, got {}", self.repeats)));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants to sweep".into()));
        }
        Ok(())
    }

    pub fn layout(&self, n: usize) -> Result<TokenLayout> {
        TokenLayout::dense(n / (self.frame.0 * self.frame.1), self.frame.0, self.frame.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub variant: SweepVariant,
    pub n: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub flops: u64,
}

/// One attention layer with fixed weights and input, ready to run.
pub struct LayerInstance {
    variant: SweepVariant,
    cfg: AttentionConfig,
    x: Tensor,
    weights: Vec<Tensor>,
    rows: RowLayout,
    /// Kept raster indices when dropping.
    kept: Option<Vec<usize>>,
    half_span: usize,
    n: usize,
}

impl LayerInstance {
    pub fn new(variant: SweepVariant, n: usize, spec: &SweepSpec) -> Result<Self> {
        let layout = spec.layout(n)?;
        let cfg = spec.attn.clone();
        let d = cfg.d;
        let mut rng = stream(spec.seed, Domain::Eval, n as u64);
        let x = normal(&mut rng, &[n, d], 1.0);
        let std = (1.0 / d as f64).sqrt();
        let weights = vec![
            normal(&mut rng, &[d, d], std),
            normal(&mut rng, &[d, d], std),
            normal(&mut rng, &[d, d], std),
            normal(&mut rng, &[d, d], std),
            normal(&mut rng, &[d, 2 * cfg.gate_groups()], std),
            Tensor::filled(&[d], 1.0),
            Tensor::filled(&[d], 1.0),
        ];
        let (rows, kept) = match variant {
            SweepVariant::GlgaDrop75 => {
                let plan = make_drop_plan(n, 0.75, &mut rng)?;
                let sparse = layout.with_surviving(plan.kept.clone())?;
                (RowLayout::single(&sparse), Some(plan.kept))
            }
            _ => (RowLayout::single(&layout), None),
        };
        Ok(Self { variant, half_span: layout.half_span(cfg.m), cfg, x, weights, rows, kept, n })
    }

    /// Closed-form multiply-add count of one forward.
    pub fn analytic_flops(&self) -> u64 {
        let rows = self.rows.rows() as u64;
        let wt = cost::window_total(&self.rows, self.half_span);
        let variant = match self.variant {
            SweepVariant::Softmax => Variant::Softmax,
            SweepVariant::Linear => Variant::Linear,
            SweepVariant::Window => Variant::Window,
            SweepVariant::Glga | SweepVariant::GlgaDrop75 => Variant::Glga,
        };
        cost::layer(variant, rows, self.rows.seg_len as u64, wt, &self.cfg)
    }

    /// Runs one forward on a fresh tape and returns the dense `N × d` output.
    pub fn run(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(self.x.clone());
        let v: Vec<Var> = self.weights.iter().map(|w| tape.constant(w.clone())).collect();
        let w = GlgaWeights { wq: v[0], wk: v[1], wv: v[2], wo: v[3], wg: v[4], gain_global: v[5], gain_local: v[6] };
        let out = match (&self.kept, self.variant) {
            (Some(kept), _) => {
                let xs = tape.gather_rows(x, kept)?;
                let o = attention::glga_forward(&mut tape, xs, &w, &self.rows, self.half_span, &self.cfg)?;
                let fill = tape.constant(Tensor::zeros(&[self.cfg.d]));
                tape.scatter_rows_with_fill(o, kept, self.n, fill)?
            }
            (None, SweepVariant::Softmax) => attention::softmax_forward(&mut tape, x, &w, &self.rows, &self.cfg)?,
            (None, SweepVariant::Linear) => attention::variant_forward(&mut tape, Variant::Linear, x, &w, &self.rows, 0, &self.cfg)?,
            (None, SweepVariant::Window) => {
                attention::variant_forward(&mut tape, Variant::Window, x, &w, &self.rows, self.half_span, &self.cfg)?
            }
            (None, _) => attention::glga_forward(&mut tape, x, &w, &self.rows, self.half_span, &self.cfg)?,
        };
        Ok(tape.value(out).clone())
    }

    /// Instrumented count of one forward.
    pub fn measured_flops(&self) -> Result<u64> {
        let (out, count) = flops::measure(|| self.run());
        out?;
        Ok(count)
    }
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn time<T>(f: impl FnOnce() -> Result<T>) -> Result<Duration> {
    let start = Instant::now();
    std::hint::black_box(f()?);
    Ok(start.elapsed())
}

pub fn latency_sweep(spec: &SweepSpec) -> Result<Vec<LatencyRow>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &n in &spec.counts {
        for &variant in &spec.variants {
            let layer = LayerInstance::new(variant, n, spec)?;
            for _ in 0..spec.warmup {
                layer.run()?;
            }
            let mut ms: Vec<f64> =
                (0..spec.repeats).map(|_| time(|| layer.run()).map(|d| d.as_secs_f64() * 1e3)).collect::<Result<_>>()?;
            ms.sort_by(f64::total_cmp);
            out.push(LatencyRow {
                variant,
                n,
                median_ms: quantile(&ms, 0.5),
                p10_ms: quantile(&ms, 0.1),
                p90_ms: quantile(&ms, 0.9),
                flops: layer.analytic_flops(),
            });
        }
    }
    Ok(out)
}

pub fn write_latency_csv(rows: &[LatencyRow], w: impl Write) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["variant", "N", "median_ms", "p10_ms", "p90_ms", "flops"])?;
    for r in rows {
        wr.write_record([
            r.variant.name().to_string(),
            r.n.to_string(),
            format!("{:.6}", r.median_ms),
            format!("{:.6}", r.p10_ms),
            format!("{:.6}", r.p90_ms),
            r.flops.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Cumulative recipe stages, each adding one ingredient to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Flow matching only, softmax attention.
    Fm,
    /// Flow matching plus solution consistency, guided with a full
    /// unconditional forward.
    Sfm,
    SfmMva,
    SfmMvaGlga,
    /// Guidance baseline from the weak path instead of a full forward.
    SfmMvaGlgaPdg,
    SfmMvaGlgaPdgDrop75,
}

impl Recipe {
    pub const ALL: [Recipe; 6] =
        [Self::Fm, Self::Sfm, Self::SfmMva, Self::SfmMvaGlga, Self::SfmMvaGlgaPdg, Self::SfmMvaGlgaPdgDrop75];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fm => "fm",
            Self::Sfm => "sfm",
            Self::SfmMva => "sfm+mva",
            Self::SfmMvaGlga => "sfm+mva+glga",
            Self::SfmMvaGlgaPdg => "sfm+mva+glga+pdg",
            Self::SfmMvaGlgaPdgDrop75 => "sfm+mva+glga+pdg+drop75",
        }
    }

    fn rank(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputSpec {
    pub grid: TokenGrid,
    pub model: BackboneConfig,
    pub batch: usize,
    /// Steps per timed repeat.
    pub iters: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ThroughputSpec {
    fn default() -> Self {
        let grid = TokenGrid::default();
        let model = BackboneConfig {
            attn: AttentionConfig { d: 32, heads: 2, m: 1, ..AttentionConfig::default() },
            t_frames: grid.t_frames,
            h: grid.h,
            w: grid.w,
            d_in: grid.d_in,
            n_enc: 1,
            n_mid: 4,
            n_dec: 1,
            ffn_mult: 2,
            freq_dim: 16,
            num_classes: grid.classes,
        };
        Self { grid, model, batch: 8, iters: 2, repeats: 5, warmup: 1, seed: 0 }
    }
}

/// Model, loss and drop ratio of one recipe stage.
pub fn recipe_setup(recipe: Recipe, spec: &ThroughputSpec) -> (BackboneConfig, LossConfig, f64) {
    let r = recipe.rank();
    let mut model = spec.model.clone();
    if r < Recipe::SfmMvaGlga.rank() {
        model.attn.interleave_k = 1;
    }
    let mut loss = LossConfig { guidance: Guidance::Full, ..LossConfig::default() };
    match recipe {
        Recipe::Fm => {
            (loss.a, loss.b, loss.guidance) = (1.0, 0.0, Guidance::None);
        }
        Recipe::Sfm => {
            (loss.a, loss.b) = (0.75, 0.25);
        }
        _ => {}
    }
    if r >= Recipe::SfmMvaGlgaPdg.rank() {
        loss.guidance = Guidance::Pdg;
    }
    let drop = if recipe == Recipe::SfmMvaGlgaPdgDrop75 { 0.75 } else { 0.0 };
    (model, loss, drop)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub recipe: Recipe,
    pub iters_per_sec: f64,
    pub median_step_ms: f64,
}

pub fn measure_recipe(recipe: Recipe, spec: &ThroughputSpec) -> Result<ThroughputRow> {
    if spec.repeats < 3 || spec.iters == 0 {
        return Err(Error::Config("throughput needs repeats ≥ 3 and iters ≥ 1".into()));
    }
    let (model, loss, drop) = recipe_setup(recipe, spec);
    let net = Network::new(model)?;
    let mut init = stream(spec.seed, Domain::Init, 0);
    let mut state = TrainState::new(net.init(&mut init, Init::Zero), 1e-4);
    let mut data = stream(spec.seed, Domain::Data, 0);
    let (x0, labels) = spec.grid.sample_batch(spec.batch, &mut data)?;
    let opts = StepOptions { drop_ratio: drop, progress: 1.0, ema_decay: 0.999 };
    let mut step = 0u64;
    let mut run = |state: &mut TrainState| -> Result<()> {
        let mut rng = stream(spec.seed, Domain::Train, step);
        step += 1;
        train_step(&net, state, &x0, &labels, &loss, opts, &mut rng).map(|_| ())
    };
    for _ in 0..spec.warmup {
        run(&mut state)?;
    }
    let mut secs = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let start = Instant::now();
        for _ in 0..spec.iters {
            run(&mut state)?;
        }
        secs.push(start.elapsed().as_secs_f64());
    }
    secs.sort_by(f64::total_cmp);
    let median = quantile(&secs, 0.5);
    Ok(ThroughputRow { recipe, iters_per_sec: spec.iters as f64 / median, median_step_ms: median * 1e3 / spec.iters as f64 })
}

pub fn training_throughput(spec: &ThroughputSpec, recipes: &[Recipe]) -> Result<Vec<ThroughputRow>> {
    recipes.iter().map(|&r| measure_recipe(r, spec)).collect()
}

pub fn write_throughput_csv(rows: &[ThroughputRow], w: impl Write) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["recipe", "iters_per_sec", "median_step_ms"])?;
    for r in rows {
        wr.write_record([r.recipe.name().to_string(), format!("{:.6}", r.iters_per_sec), format!("{:.6}", r.median_step_ms)])?;
    }
    wr.flush()?;
    Ok(())
}
