//! Flat dotted-key run configuration.

use eflow_core::attention::AttentionConfig;
use eflow_core::backbone::BackboneConfig;
use eflow_core::datasets::GaussianMixture2D;
use eflow_core::objectives::{Guidance, LossConfig, RSchedule, TargetNet};
use eflow_core::{Error, Result};
use toml::Value;

pub const SEED_ENV: &str = "EFLOW_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub drop_ratio: f64,
    /// Fraction of iterations trained with token dropping.
    pub drop_fraction: f64,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// Zero disables the periodic 4-step MMD column.
    pub eval_every: u64,
    pub eval_samples: usize,
    /// Zero disables gradient clipping.
    pub grad_clip: f64,
    /// Learning-rate multiplier in the dense phase.
    pub dense_lr_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    /// Direct jumps to `t = 0` with re-noising.
    Jump,
    /// Euler integration of the instantaneous velocity.
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub method: SampleMethod,
    pub steps: usize,
    pub shift: f64,
    pub w_inf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub data: GaussianMixture2D,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = GaussianMixture2D::default();
        Self {
            model: BackboneConfig {
                attn: AttentionConfig { d: 32, heads: 2, ..AttentionConfig::default() },
                t_frames: 1,
                h: 1,
                w: 1,
                d_in: 2,
                n_enc: 1,
                n_mid: 2,
                n_dec: 1,
                ffn_mult: 2,
                freq_dim: 16,
                num_classes: data.n_components,
            },
            data,
            loss: LossConfig::default(),
            train: TrainConfig {
                iters: 20_000,
                batch: 64,
                lr: 1e-3,
                ema_decay: 0.999,
                seed: 0,
                drop_ratio: 0.75,
                drop_fraction: 0.8,
                checkpoint_every: 0,
                eval_every: 0,
                eval_samples: 1000,
                grad_clip: 1.0,
                dense_lr_scale: 1.0,
            },
            sample: SampleConfig { method: SampleMethod::Jump, steps: 4, shift: 3.0, w_inf: 4.0 },
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("`{key}` expects a number, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::Config(format!("`{key}` expects a non-negative integer, got {v}"))),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("`{key}` expects true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("`{key}` expects a string, got {v}")))
}

fn guidance_name(g: Guidance) -> &'static str {
    match g {
        Guidance::Pdg => "pdg",
        Guidance::Full => "full",
        Guidance::None => "none",
    }
}

fn r_schedule_name(r: RSchedule) -> &'static str {
    match r {
        RSchedule::LogUniform => "log_uniform",
        RSchedule::Exponential => "exponential",
    }
}

fn target_name(t: TargetNet) -> &'static str {
    match t {
        TargetNet::Ema => "ema",
        TargetNet::Detach => "detach",
    }
}

fn method_name(m: SampleMethod) -> &'static str {
    match m {
        SampleMethod::Jump => "jump",
        SampleMethod::Euler => "euler",
    }
}

/// Flattens nested tables into dotted keys.
fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let (m, l, t, s) = (&self.model, &self.loss, &self.train, &self.sample);
        let int = |x: u64| Value::Integer(x as i64);
        vec![
            ("model.d", int(m.attn.d as u64)),
            ("model.heads", int(m.attn.heads as u64)),
            ("model.m", int(m.attn.m as u64)),
            ("model.interleave_k", int(m.attn.interleave_k as u64)),
            ("model.gate_per_head", Value::Boolean(m.attn.gate_per_head)),
            ("model.linear_stabilize", Value::Boolean(m.attn.linear_stabilize)),
            ("model.rope_base", Value::Float(m.attn.rope_base)),
            ("model.n_enc", int(m.n_enc as u64)),
            ("model.n_mid", int(m.n_mid as u64)),
            ("model.n_dec", int(m.n_dec as u64)),
            ("model.ffn_mult", int(m.ffn_mult as u64)),
            ("model.freq_dim", int(m.freq_dim as u64)),
            ("data.components", int(self.data.n_components as u64)),
            ("data.radius", Value::Float(self.data.radius)),
            ("data.std", Value::Float(self.data.std)),
            ("loss.a", Value::Float(l.a)),
            ("loss.b", Value::Float(l.b)),
            ("loss.eps", Value::Float(l.eps)),
            ("loss.p", Value::Float(l.p)),
            ("loss.velocity_mix", Value::Float(l.velocity_mix)),
            ("loss.w_min", Value::Float(l.w_min)),
            ("loss.w_max", Value::Float(l.w_max)),
            ("loss.p_drop", Value::Float(l.p_drop)),
            ("loss.mva_start_fraction", Value::Float(l.mva_start_fraction)),
            ("loss.k_discrete", int(l.k_discrete as u64)),
            ("loss.guidance", Value::String(guidance_name(l.guidance).into())),
            ("loss.target", Value::String(target_name(l.target).into())),
            ("time.t_mu", Value::Float(l.time_t.mu)),
            ("time.t_sigma", Value::Float(l.time_t.sigma)),
            ("time.t_shift", Value::Float(l.time_t.shift)),
            ("time.s_mu", Value::Float(l.time_s.mu)),
            ("time.s_sigma", Value::Float(l.time_s.sigma)),
            ("time.s_shift", Value::Float(l.time_s.shift)),
            ("time.r_min", Value::Float(l.r_min)),
            ("time.r_schedule", Value::String(r_schedule_name(l.r_schedule).into())),
            ("train.iters", int(t.iters)),
            ("train.batch", int(t.batch as u64)),
            ("train.lr", Value::Float(t.lr)),
            ("train.ema_decay", Value::Float(t.ema_decay)),
            ("train.seed", int(t.seed)),
            ("train.drop_ratio", Value::Float(t.drop_ratio)),
            ("train.drop_fraction", Value::Float(t.drop_fraction)),
            ("train.checkpoint_every", int(t.checkpoint_every)),
            ("train.eval_every", int(t.eval_every)),
            ("train.eval_samples", int(t.eval_samples as u64)),
            ("train.grad_clip", Value::Float(t.grad_clip)),
            ("train.dense_lr_scale", Value::Float(t.dense_lr_scale)),
            ("sample.method", Value::String(method_name(s.method).into())),
            ("sample.steps", int(s.steps as u64)),
            ("sample.shift", Value::Float(s.shift)),
            ("sample.w_inf", Value::Float(s.w_inf)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let f = || as_f64(key, v);
        let u = || as_u64(key, v);
        let z = || as_u64(key, v).map(|x| x as usize);
        let (m, l, t, s) = (&mut self.model, &mut self.loss, &mut self.train, &mut self.sample);
        match key {
            "model.d" => m.attn.d = z()?,
            "model.heads" => m.attn.heads = z()?,
            "model.m" => m.attn.m = z()?,
            "model.interleave_k" => m.attn.interleave_k = z()?,
            "model.gate_per_head" => m.attn.gate_per_head = as_bool(key, v)?,
            "model.linear_stabilize" => m.attn.linear_stabilize = as_bool(key, v)?,
            "model.rope_base" => m.attn.rope_base = f()?,
            "model.n_enc" => m.n_enc = z()?,
            "model.n_mid" => m.n_mid = z()?,
            "model.n_dec" => m.n_dec = z()?,
            "model.ffn_mult" => m.ffn_mult = z()?,
            "model.freq_dim" => m.freq_dim = z()?,
            "data.components" => {
                self.data.n_components = z()?;
                m.num_classes = self.data.n_components;
            }
            "data.radius" => self.data.radius = f()?,
            "data.std" => self.data.std = f()?,
            "loss.a" => l.a = f()?,
            "loss.b" => l.b = f()?,
            "loss.eps" => l.eps = f()?,
            "loss.p" => l.p = f()?,
            "loss.velocity_mix" => l.velocity_mix = f()?,
            "loss.w_min" => l.w_min = f()?,
            "loss.w_max" => l.w_max = f()?,
            "loss.p_drop" => l.p_drop = f()?,
            "loss.mva_start_fraction" => l.mva_start_fraction = f()?,
            "loss.k_discrete" => l.k_discrete = z()?,
            "loss.guidance" => {
                l.guidance = match as_str(key, v)? {
                    "pdg" => Guidance::Pdg,
                    "full" => Guidance::Full,
                    "none" => Guidance::None,
                    other => return Err(Error::Config(format!("`loss.guidance` must be pdg, full or none, got `{other}`"))),
                }
            }
            "loss.target" => {
                l.target = match as_str(key, v)? {
                    "ema" => TargetNet::Ema,
                    "detach" => TargetNet::Detach,
                    other => return Err(Error::Config(format!("`loss.target` must be ema or detach, got `{other}`"))),
                }
            }
            "time.t_mu" => l.time_t.mu = f()?,
            "time.t_sigma" => l.time_t.sigma = f()?,
            "time.t_shift" => l.time_t.shift = f()?,
            "time.s_mu" => l.time_s.mu = f()?,
            "time.s_sigma" => l.time_s.sigma = f()?,
            "time.s_shift" => l.time_s.shift = f()?,
            "time.r_min" => l.r_min = f()?,
            "time.r_schedule" => {
                l.r_schedule = match as_str(key, v)? {
                    "log_uniform" => RSchedule::LogUniform,
                    "exponential" => RSchedule::Exponential,
                    other => {
                        return Err(Error::Config(format!("`time.r_schedule` must be log_uniform or exponential, got `{other}`")))
                    }
                }
            }
            "train.iters" => t.iters = u()?,
            "train.batch" => t.batch = z()?,
            "train.lr" => t.lr = f()?,
            "train.ema_decay" => t.ema_decay = f()?,
            "train.seed" => t.seed = u()?,
            "train.drop_ratio" => t.drop_ratio = f()?,
            "train.drop_fraction" => t.drop_fraction = f()?,
            "train.checkpoint_every" => t.checkpoint_every = u()?,
            "train.eval_every" => t.eval_every = u()?,
            "train.eval_samples" => t.eval_samples = z()?,
            "train.grad_clip" => t.grad_clip = f()?,
            "train.dense_lr_scale" => t.dense_lr_scale = f()?,
            "sample.method" => {
                s.method = match as_str(key, v)? {
                    "jump" => SampleMethod::Jump,
                    "euler" => SampleMethod::Euler,
                    other => return Err(Error::Config(format!("`sample.method` must be jump or euler, got `{other}`"))),
                }
            }
            "sample.steps" => s.steps = z()?,
            "sample.shift" => s.shift = f()?,
            "sample.w_inf" => s.w_inf = f()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::default();
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `EFLOW_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.train.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.tokens() != 1 || self.model.d_in != 2 {
            return Err(Error::Config("the mixture task uses one 2-channel token".into()));
        }
        let d = &self.data;
        if d.n_components == 0 || !(d.radius.is_finite() && d.std > 0.0) {
            return Err(Error::Config("data needs components ≥ 1, finite radius and std > 0".into()));
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) || !(t.dense_lr_scale > 0.0) || !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(Error::Config("train needs batch ≥ 1, lr > 0, dense_lr_scale > 0 and ema_decay in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&t.drop_ratio) || !(0.0..=1.0).contains(&t.drop_fraction) || !(t.grad_clip >= 0.0) {
            return Err(Error::Config("need drop_ratio in [0, 1), drop_fraction in [0, 1] and grad_clip ≥ 0".into()));
        }
        if t.eval_every > 0 && t.eval_samples < 2 {
            return Err(Error::Config("periodic evaluation needs eval_samples ≥ 2".into()));
        }
        if self.sample.steps == 0 || !(self.sample.shift >= 1.0) || !self.sample.w_inf.is_finite() {
            return Err(Error::Config("sample needs steps ≥ 1, shift ≥ 1 and finite w_inf".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let v = match v {
                Value::Float(f) => format!("{f:?}"),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// First iteration without token dropping.
    pub fn dense_from(&self) -> u64 {
        ceil_fraction(self.train.drop_fraction, self.train.iters)
    }
}

/// `⌈f·n⌉`, robust to representation error in `f`.
pub fn ceil_fraction(f: f64, n: u64) -> u64 {
    let x = f * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 { r as u64 } else { x.ceil() as u64 }
}
