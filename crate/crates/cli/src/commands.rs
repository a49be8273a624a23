use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eflow_bench::{
    latency_sweep, training_throughput, write_latency_csv, write_throughput_csv, Recipe, SweepSpec, SweepVariant,
    ThroughputSpec,
};
use eflow_core::datasets::{mmd, BANDWIDTHS};
use eflow_core::gradcheck::{self, SuiteOptions};
use eflow_core::rng::{stream, Domain};
use eflow_core::Error;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::{oracle, train};

/// Outcome of a command that can fail an assertion without erroring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(RunConfig::parse(&text)?.with_env_seed()?)
}

fn sidecar(path: &Path, header: &str, cfg_text: &str) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".toml");
    let side = PathBuf::from(name);
    fs::write(&side, format!("{header}{cfg_text}")).with_context(|| format!("writing {}", side.display()))
}

pub fn train(config: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = match (config, resume) {
        (Some(p), _) => load_config(p)?,
        (None, Some(r)) => RunConfig::parse(&Checkpoint::load(r)?.config)?.with_env_seed()?,
        (None, None) => return Err(Error::Config("train needs --config or --resume".into()).into()),
    };
    let outcome = train::run(cfg, out, resume)?;
    eprintln!(
        "ran {} iterations; final checkpoint {}{}",
        outcome.iterations_run,
        outcome.final_checkpoint.display(),
        outcome.last_total.map(|l| format!("; last loss {l:.6}")).unwrap_or_default()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub steps: Option<usize>,
    pub count: usize,
    pub class: Option<usize>,
    pub seed: u64,
    pub w: Option<f64>,
    /// `sample.*` overrides as `key=value` with TOML values.
    pub set: Vec<String>,
    pub out: PathBuf,
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = RunConfig::parse(&ck.config)?;
    if let Some(w) = args.w {
        cfg.sample.w_inf = w;
    }
    for pair in &args.set {
        let (key, value) = parse_override(pair)?;
        cfg.set(&key, &value)?;
    }
    cfg.validate()?;
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    let classes = cfg.data.n_components;
    if let Some(c) = args.class.filter(|&c| c >= classes) {
        return Err(Error::Config(format!("class {c} out of range (0..{classes})")).into());
    }
    let labels: Vec<usize> = (0..args.count).map(|i| args.class.unwrap_or(i % classes)).collect();
    let trainer = train::Trainer::from_checkpoint(cfg, &ck)?;
    let points = trainer.generate(&labels, steps, args.seed)?;
    let mut csv = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    csv.write_record(["x", "y", "label"])?;
    for (row, label) in points.chunks(2).zip(&labels) {
        csv.write_record([format!("{:?}", row[0]), format!("{:?}", row[1]), label.to_string()])?;
    }
    csv.flush()?;
    let header = format!(
        "# checkpoint = \"{}\"\n# step = {}\n# steps = {steps}\n# count = {}\n# seed = {}\n",
        args.checkpoint.display(),
        ck.step,
        args.count,
        args.seed
    );
    sidecar(&args.out, &header, &trainer.cfg.render())?;
    if args.count >= 2 {
        let mut rng = stream(args.seed, Domain::Eval, 0);
        let (data, _) = trainer.cfg.data.sample_batch(args.count, args.class, &mut rng)?;
        let m = mmd(&points, data.data(), 2, &BANDWIDTHS)?;
        eprintln!("mmd2 vs data ({} points, {steps} steps): {m:.6e}", args.count);
    }
    Ok(())
}

fn parse_override(pair: &str) -> Result<(String, toml::Value)> {
    let bad = || Error::Config(format!("override `{pair}` is not `sample.<key>=<value>`"));
    let (key, raw) = pair.split_once('=').ok_or_else(bad)?;
    let key = key.trim();
    if !key.starts_with("sample.") {
        return Err(bad().into());
    }
    let raw = raw.trim();
    let table: toml::Table = toml::from_str(&format!("v = {raw}"))
        .or_else(|_| toml::from_str(&format!("v = \"{raw}\"")))
        .map_err(|_| bad())?;
    Ok((key.to_owned(), table["v"].clone()))
}

pub fn oracle(report: Option<&Path>, corrupt: bool) -> Result<Verdict> {
    let r = oracle::run(corrupt)?;
    let text = r.render();
    match report {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if r.pass() {
        eprintln!("all fixtures pass");
        Ok(Verdict::Pass)
    } else {
        for f in r.failures() {
            eprintln!("FAILED fixture: {f}");
        }
        Ok(Verdict::Fail)
    }
}

pub fn gradcheck(include_losses: bool, inject_fault: bool) -> Result<Verdict> {
    let reports = gradcheck::run_suite(SuiteOptions { include_losses, inject_fault })?;
    let mut out = String::from("op,checked,max_rel_err,pass\n");
    for r in &reports {
        let _ = writeln!(out, "{},{},{:e},{}", r.name, r.checked, r.max_rel_err, r.pass);
    }
    print!("{out}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(Verdict::Pass)
    } else {
        eprintln!("FAILED ops: {}", failed.join(", "));
        Ok(Verdict::Fail)
    }
}

pub fn bench_latency(spec: &SweepSpec, out: Option<&Path>) -> Result<()> {
    let rows = latency_sweep(spec)?;
    let header = format!(
        "# latency sweep\n# seed = {}\n# repeats = {}\n# warmup = {}\n# frame = \"{}x{}\"\n# d = {}\n# heads = {}\n# m = {}\n",
        spec.seed, spec.repeats, spec.warmup, spec.frame.0, spec.frame.1, spec.attn.d, spec.attn.heads, spec.attn.m
    );
    match out {
        Some(p) => {
            write_latency_csv(&rows, fs::File::create(p).with_context(|| format!("writing {}", p.display()))?)?;
            sidecar(p, &header, "")?;
        }
        None => write_latency_csv(&rows, std::io::stdout())?,
    }
    Ok(())
}

pub fn bench_throughput(spec: &ThroughputSpec, out: Option<&Path>) -> Result<()> {
    let rows = training_throughput(spec, &Recipe::ALL)?;
    let header = format!(
        "# training throughput\n# seed = {}\n# batch = {}\n# iters = {}\n# repeats = {}\n",
        spec.seed, spec.batch, spec.iters, spec.repeats
    );
    match out {
        Some(p) => {
            write_throughput_csv(&rows, fs::File::create(p).with_context(|| format!("writing {}", p.display()))?)?;
            sidecar(p, &header, "")?;
        }
        None => write_throughput_csv(&rows, std::io::stdout())?,
    }
    Ok(())
}

pub fn parse_variants(list: &str) -> Result<Vec<SweepVariant>> {
    Ok(list.split(',').map(|s| SweepVariant::parse(s.trim())).collect::<eflow_core::Result<_>>()?)
}
