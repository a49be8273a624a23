//! Training driver: phase schedule, metrics, checkpoints and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use eflow_core::backbone::{Init, Network};
use eflow_core::datasets::{mmd, BANDWIDTHS};
use eflow_core::objectives::{train_step, StepOptions, TrainState};
use eflow_core::params::Adam;
use eflow_core::rng::{stream, Domain};
use eflow_core::sampler::{build_schedule, sample, sample_euler, NetworkModel};
use eflow_core::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SampleMethod};

pub const METRICS_HEADER: &str = "iter,loss_fm,loss_scm,loss_mva,loss_total,lr,drop_ratio,mva_active,wall_ms,mmd_4step";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_fm: Option<f64>,
    pub loss_scm: Option<f64>,
    pub loss_mva: Option<f64>,
    pub loss_total: f64,
    pub lr: f64,
    pub drop_ratio: f64,
    pub mva_active: bool,
    pub wall_ms: f64,
    pub mmd_4step: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:e},{:e},{},{},{:.3},{}",
            self.iter,
            opt(self.loss_fm),
            opt(self.loss_scm),
            opt(self.loss_mva),
            self.loss_total,
            self.lr,
            self.drop_ratio,
            u8::from(self.mva_active),
            self.wall_ms,
            opt(self.mmd_4step)
        )
    }
}

/// The model, its training state and the schedule derived from a config.
pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
    pub state: TrainState,
}

fn adam_for(cfg: &RunConfig, state_like: &eflow_core::params::ParamStore) -> Adam {
    let mut adam = Adam::new(state_like, cfg.train.lr);
    adam.clip = (cfg.train.grad_clip > 0.0).then_some(cfg.train.grad_clip);
    adam
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.model.clone())?;
        let params = net.init(&mut stream(cfg.train.seed, Domain::Init, 0), Init::Zero);
        let mut state = TrainState::new(params, cfg.train.lr);
        state.adam = adam_for(&cfg, &state.params);
        Ok(Self { cfg, net, state })
    }

    pub fn from_checkpoint(cfg: RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let adam = adam_for(&t.cfg, &t.state.params);
        t.state = ck.to_state(&t.net, adam)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.state, &self.cfg.render())
    }

    pub fn drop_ratio_at(&self, iter: u64) -> f64 {
        if iter < self.cfg.dense_from() { self.cfg.train.drop_ratio } else { 0.0 }
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        let t = &self.cfg.train;
        if iter < self.cfg.dense_from() { t.lr } else { t.lr * t.dense_lr_scale }
    }

    /// Runs iteration `iter` (zero-based) with streams keyed by `(seed, iter)`.
    pub fn step(&mut self, iter: u64) -> Result<MetricsRow> {
        let start = Instant::now();
        let t = &self.cfg.train;
        let mut data_rng = stream(t.seed, Domain::Data, iter);
        let (x0, labels) = self.cfg.data.sample_batch(t.batch, None, &mut data_rng)?;
        let drop_ratio = self.drop_ratio_at(iter);
        self.state.adam.lr = self.lr_at(iter);
        let opts = StepOptions { drop_ratio, progress: iter as f64 / t.iters.max(1) as f64, ema_decay: t.ema_decay };
        let mut rng = stream(t.seed, Domain::Train, iter);
        let rec = train_step(&self.net, &mut self.state, &x0, &labels, &self.cfg.loss, opts, &mut rng).map_err(|e| match e {
            Error::NonFinite { op } => Error::Usage(format!("non-finite value in {op} at iteration {iter}")),
            other => other,
        })?;
        if !rec.total.is_finite() {
            return Err(Error::Usage(format!("non-finite loss at iteration {iter}")));
        }
        let every = t.eval_every;
        let mmd_4step = if every > 0 && (iter + 1) % every == 0 { Some(self.eval_mmd(4, t.eval_samples, iter)?) } else { None };
        Ok(MetricsRow {
            iter,
            loss_fm: rec.loss_fm,
            loss_scm: rec.loss_scm,
            loss_mva: rec.loss_mva,
            loss_total: rec.total,
            lr: self.state.adam.lr,
            drop_ratio,
            mva_active: rec.mva_active,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            mmd_4step,
        })
    }

    /// Samples with the EMA weights using the configured method.
    pub fn generate(&self, labels: &[usize], steps: usize, seed: u64) -> Result<Vec<f64>> {
        generate(&self.net, &self.state.ema, &self.cfg, labels, steps, seed)
    }

    /// MMD² of `count` generated points against fresh data.
    pub fn eval_mmd(&self, steps: usize, count: usize, salt: u64) -> Result<f64> {
        let seed = self.cfg.train.seed;
        let mut rng = stream(seed, Domain::Eval, salt);
        let (data, _) = self.cfg.data.sample_batch(count, None, &mut rng)?;
        let labels: Vec<usize> = (0..count).map(|i| i % self.cfg.data.n_components).collect();
        let gen = self.generate(&labels, steps, seed ^ salt.rotate_left(17))?;
        mmd(&gen, data.data(), 2, &BANDWIDTHS)
    }
}

pub fn generate(
    net: &Network,
    params: &eflow_core::params::ParamStore,
    cfg: &RunConfig,
    labels: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if let Some(&c) = labels.iter().find(|&&c| c >= cfg.data.n_components) {
        return Err(Error::Config(format!("class {c} out of range (0..{})", cfg.data.n_components)));
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let schedule = build_schedule(steps, cfg.sample.shift)?;
    let model = NetworkModel { net, params };
    let points = match cfg.sample.method {
        SampleMethod::Jump => sample(&model, labels, &schedule, cfg.sample.w_inf, seed)?,
        SampleMethod::Euler => sample_euler(&model, labels, &schedule, cfg.sample.w_inf, seed)?,
    };
    Ok(points.data().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub iterations_run: u64,
    pub last_total: Option<f64>,
}

/// Keeps the header and rows with `iter < step`, so a resumed run appends
/// exactly where its checkpoint left off.
fn truncate_metrics(path: &Path, step: u64) -> std::io::Result<()> {
    let file = File::open(path)?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|it| it < step);
        if keep {
            kept.push(line);
        }
    }
    let mut out = kept.join("\n");
    out.push('\n');
    fs::write(path, out)
}

fn io(e: std::io::Error, what: &Path) -> Error {
    Error::Usage(format!("{}: {e}", what.display()))
}

/// Full training run into `out`; resumes from `resume` when given.
pub fn run(cfg: RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunOutcome> {
    fs::create_dir_all(out).map_err(|e| io(e, out))?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg.render() {
                return Err(Error::Config(format!("config differs from the one embedded in {}", p.display())));
            }
            Trainer::from_checkpoint(cfg, &ck)?
        }
        None => Trainer::new(cfg)?,
    };
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, trainer.cfg.render()).map_err(|e| io(e, &cfg_path))?;
    let metrics = out.join(METRICS_FILE);
    let start = trainer.state.step;
    if resume.is_some() && metrics.exists() {
        truncate_metrics(&metrics, start).map_err(|e| io(e, &metrics))?;
    } else {
        fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| io(e, &metrics))?;
    }
    let mut sink = OpenOptions::new().append(true).open(&metrics).map_err(|e| io(e, &metrics))?;
    let (iters, every) = (trainer.cfg.train.iters, trainer.cfg.train.checkpoint_every);
    let mut last_total = None;
    for iter in start..iters {
        let row = trainer.step(iter)?;
        last_total = Some(row.loss_total);
        writeln!(sink, "{}", row.to_csv()).map_err(|e| io(e, &metrics))?;
        if every > 0 && (iter + 1) % every == 0 && iter + 1 < iters {
            let p = out.join(checkpoint_name(iter + 1));
            trainer.checkpoint().save(&p).map_err(|e| io(e, &p))?;
        }
    }
    sink.flush().map_err(|e| io(e, &metrics))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint).map_err(|e| io(e, &final_checkpoint))?;
    Ok(RunOutcome { final_checkpoint, iterations_run: iters.saturating_sub(start), last_total })
}
