//! Encoder / droppable middle / decoder network.
//!
//! `F_θ(x_t, t, s, c, w)` is a stack of adaptive-norm transformer blocks. The
//! encoder runs on every token; a [`DropPlan`] keeps a structured subset for
//! the middle stack; dropped rows are refilled with a learned mask token and
//! the dense encoder features are added back before the decoder. The weak path
//! replaces the middle stack by the identity and always runs unconditionally.

use rand::seq::index::sample;
use rand::Rng;

use crate::attention::{self, AttentionConfig, GlgaWeights, RowLayout, TokenLayout};
use crate::params::{normal, xavier, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub attn: AttentionConfig,
    pub t_frames: usize,
    pub h: usize,
    pub w: usize,
    /// Channels per token.
    pub d_in: usize,
    pub n_enc: usize,
    pub n_mid: usize,
    pub n_dec: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    /// Sinusoidal feature count for each scalar condition.
    pub freq_dim: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
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
            num_classes: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.tokens() == 0 || self.d_in == 0 {
            return Err(Error::Config("token grid and d_in must be non-empty".into()));
        }
        if self.n_enc + self.n_dec == 0 {
            return Err(Error::Config("need at least one encoder or decoder block".into()));
        }
        if self.ffn_mult == 0 || self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return Err(Error::Config("ffn_mult must be ≥ 1 and freq_dim even and ≥ 2".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.t_frames * self.h * self.w
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::dense(self.t_frames, self.h, self.w)
    }

    pub fn total_blocks(&self) -> usize {
        self.n_enc + self.n_mid + self.n_dec
    }

    /// Blocks are numbered from 1; every `interleave_k`-th uses full softmax.
    pub fn is_softmax_block(&self, number: usize) -> bool {
        number % self.attn.interleave_k == 0
    }

    /// Label reserved for the unconditional `∅`.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn half_span(&self) -> usize {
        self.attn.m * self.h * self.w / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Full,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero modulation and output layers: every block starts as the identity
    /// and `F_θ ≡ 0`.
    Zero,
    /// Every weight random with the given scale on zero-initialised layers.
    Random(f64),
}

/// Per-sample structured token subsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropPlan {
    pub n_total: usize,
    pub group: usize,
    pub kept: Vec<usize>,
}

impl DropPlan {
    pub fn dense(n_total: usize) -> Self {
        Self { n_total, group: 1, kept: (0..n_total).collect() }
    }

    pub fn n_keep(&self) -> usize {
        self.kept.len()
    }
}

/// Count kept by a drop ratio: `N − ⌊rN⌋`.
pub fn kept_count(n: usize, r: f64) -> usize {
    n - (r * n as f64).floor() as usize
}

/// One uniformly random index per contiguous raster group of size
/// `round(1/(1−r))`; surplus picks are removed at random and missing ones
/// filled from unpicked tokens so exactly `N − ⌊rN⌋` survive.
pub fn make_drop_plan(n_total: usize, r: f64, rng: &mut impl Rng) -> Result<DropPlan> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Config(format!("drop ratio {r} outside [0, 1)")));
    }
    if n_total == 0 {
        return Err(Error::Config("cannot drop from an empty layout".into()));
    }
    let n_keep = kept_count(n_total, r);
    let group = ((1.0 / (1.0 - r)).round() as usize).max(1);
    let mut picks: Vec<usize> = (0..n_total)
        .step_by(group)
        .map(|start| rng.random_range(start..(start + group).min(n_total)))
        .collect();
    if picks.len() > n_keep {
        let mut drop = sample(rng, picks.len(), picks.len() - n_keep).into_vec();
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for i in drop {
            picks.remove(i);
        }
    } else if picks.len() < n_keep {
        let mut taken = vec![false; n_total];
        picks.iter().for_each(|&i| taken[i] = true);
        let free: Vec<usize> = (0..n_total).filter(|&i| !taken[i]).collect();
        picks.extend(sample(rng, free.len(), n_keep - picks.len()).into_iter().map(|i| free[i]));
    }
    picks.sort_unstable();
    Ok(DropPlan { n_total, group, kept: picks })
}

/// One plan per sample with a shared ratio (and therefore a shared count).
pub fn make_drop_plans(n_total: usize, r: f64, batch: usize, rng: &mut impl Rng) -> Result<Vec<DropPlan>> {
    (0..batch).map(|_| make_drop_plan(n_total, r, rng)).collect()
}

/// Per-sample conditioning values. `labels[b] == num_classes` means `∅`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Conditioning {
    pub fn batch(&self) -> usize {
        self.t.len()
    }

    pub fn uniform(batch: usize, t: f64, s: f64, w: f64, label: usize) -> Self {
        Self { t: vec![t; batch], s: vec![s; batch], w: vec![w; batch], labels: vec![label; batch] }
    }

    fn check(&self, num_classes: usize) -> Result<()> {
        let b = self.t.len();
        if b == 0 || self.s.len() != b || self.w.len() != b || self.labels.len() != b {
            return Err(Error::dim("conditioning", "t, s, w and labels must share a non-zero length"));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > num_classes) {
            return Err(Error::Usage(format!("class {l} out of range (null class is {num_classes})")));
        }
        Ok(())
    }
}

/// `[cos(a·f_k), sin(a·f_k)]` with geometric frequencies `f_k = 10⁻⁴ᵏᐟʰ`.
pub fn sinusoidal(values: &[f64], scale: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let a = v * scale;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (c, s): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((a * f).cos(), (a * f).sin())).unzip();
        data.extend(c);
        data.extend(s);
    }
    Tensor::raw(vec![values.len(), dim], data)
}

const TIME_SCALE: f64 = 1000.0;
const GUIDANCE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    softmax: bool,
    mod_w: usize,
    mod_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    wg: usize,
    gain_g: usize,
    gain_l: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    in_w: usize,
    in_b: usize,
    pos: usize,
    emb_t: MlpIds,
    emb_s: MlpIds,
    emb_w: MlpIds,
    class: usize,
    mask: usize,
    blocks: Vec<BlockIds>,
    fin_w: usize,
    fin_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Xavier,
    Embedding,
    Zeros,
    Ones,
    /// Zero under [`Init::Zero`].
    ZeroInit,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    kind: Kind,
}

/// Conditioning state shared by every block of one forward.
#[derive(Debug, Clone)]
pub struct Context {
    cond_act: Var,
    ones: Var,
    batch: usize,
    dense_rows: RowLayout,
    dense_owner: Vec<usize>,
}

impl Context {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Parameter naming, initialisation and the forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: BackboneConfig,
    ids: Ids,
    names: Vec<String>,
}

impl Network {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = Self::specs(&cfg);
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let id = |n: &str| names.iter().position(|x| x == n).expect("declared parameter");
        let mlp = |p: &str| MlpIds {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let blocks = (1..=cfg.total_blocks())
            .map(|i| {
                let p = format!("block{i}");
                BlockIds {
                    softmax: cfg.is_softmax_block(i),
                    mod_w: id(&format!("{p}.mod.w")),
                    mod_b: id(&format!("{p}.mod.b")),
                    wq: id(&format!("{p}.attn.wq")),
                    wk: id(&format!("{p}.attn.wk")),
                    wv: id(&format!("{p}.attn.wv")),
                    wo: id(&format!("{p}.attn.wo")),
                    wg: id(&format!("{p}.attn.wg")),
                    gain_g: id(&format!("{p}.attn.gain_global")),
                    gain_l: id(&format!("{p}.attn.gain_local")),
                    ff_w1: id(&format!("{p}.ffn.w1")),
                    ff_b1: id(&format!("{p}.ffn.b1")),
                    ff_w2: id(&format!("{p}.ffn.w2")),
                    ff_b2: id(&format!("{p}.ffn.b2")),
                }
            })
            .collect();
        let ids = Ids {
            in_w: id("in.w"),
            in_b: id("in.b"),
            pos: id("pos"),
            emb_t: mlp("emb.t"),
            emb_s: mlp("emb.s"),
            emb_w: mlp("emb.w"),
            class: id("emb.class"),
            mask: id("mask_token"),
            blocks,
            fin_w: id("final.mod.w"),
            fin_b: id("final.mod.b"),
            out_w: id("out.w"),
            out_b: id("out.b"),
        };
        Ok(Self { cfg, ids, names })
    }

    fn specs(cfg: &BackboneConfig) -> Vec<Spec> {
        let d = cfg.attn.d;
        let f = cfg.ffn_mult * d;
        let mut v = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: Kind| v.push(Spec { name, shape, kind });
        push("in.w".into(), vec![cfg.d_in, d], Kind::Xavier);
        push("in.b".into(), vec![d], Kind::Zeros);
        push("pos".into(), vec![cfg.tokens(), d], Kind::Embedding);
        for p in ["emb.t", "emb.s", "emb.w"] {
            push(format!("{p}.w1"), vec![cfg.freq_dim, d], Kind::Xavier);
            push(format!("{p}.b1"), vec![d], Kind::Zeros);
            push(format!("{p}.w2"), vec![d, d], Kind::Xavier);
            push(format!("{p}.b2"), vec![d], Kind::Zeros);
        }
        push("emb.class".into(), vec![cfg.num_classes + 1, d], Kind::Embedding);
        push("mask_token".into(), vec![d], Kind::Embedding);
        for i in 1..=cfg.total_blocks() {
            let p = format!("block{i}");
            push(format!("{p}.mod.w"), vec![d, 6 * d], Kind::ZeroInit);
            push(format!("{p}.mod.b"), vec![6 * d], Kind::ZeroInit);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.attn.{w}"), vec![d, d], Kind::Xavier);
            }
            push(format!("{p}.attn.wg"), vec![d, 2 * cfg.attn.gate_groups()], Kind::Xavier);
            push(format!("{p}.attn.gain_global"), vec![d], Kind::Ones);
            push(format!("{p}.attn.gain_local"), vec![d], Kind::Ones);
            push(format!("{p}.ffn.w1"), vec![d, f], Kind::Xavier);
            push(format!("{p}.ffn.b1"), vec![f], Kind::Zeros);
            push(format!("{p}.ffn.w2"), vec![f, d], Kind::Xavier);
            push(format!("{p}.ffn.b2"), vec![d], Kind::Zeros);
        }
        push("final.mod.w".into(), vec![d, 2 * d], Kind::ZeroInit);
        push("final.mod.b".into(), vec![2 * d], Kind::ZeroInit);
        push("out.w".into(), vec![d, cfg.d_in], Kind::ZeroInit);
        push("out.b".into(), vec![cfg.d_in], Kind::ZeroInit);
        v
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn init(&self, rng: &mut impl Rng, init: Init) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in Self::specs(&self.cfg) {
            let t = match (spec.kind, init) {
                (Kind::Xavier, _) if spec.shape.len() == 2 => xavier(rng, spec.shape[0], spec.shape[1]),
                (Kind::Xavier | Kind::Embedding, _) => normal(rng, &spec.shape, 0.02),
                (Kind::Zeros, _) | (Kind::ZeroInit, Init::Zero) => Tensor::zeros(&spec.shape),
                (Kind::Ones, _) => Tensor::filled(&spec.shape, 1.0),
                (Kind::ZeroInit, Init::Random(scale)) => normal(rng, &spec.shape, scale),
            };
            store.insert(spec.name, t).expect("unique parameter names");
        }
        store
    }

    /// Zero every middle block's modulation so the middle stack is the identity.
    pub fn zero_middle(&self, store: &mut ParamStore) {
        for b in &self.ids.blocks[self.cfg.n_enc..self.cfg.n_enc + self.cfg.n_mid] {
            for id in [b.mod_w, b.mod_b] {
                let t = store.tensor_mut(id);
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn check_store(&self, vars: &[Var]) -> Result<()> {
        if vars.len() != self.names.len() {
            return Err(Error::Usage(format!("{} parameter handles for {} parameters", vars.len(), self.names.len())));
        }
        Ok(())
    }

    fn mlp(&self, tape: &mut Tape, vars: &[Var], ids: MlpIds, x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[ids.w1])?;
        let h = tape.add_row(h, vars[ids.b1])?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, vars[ids.w2])?;
        tape.add_row(h, vars[ids.b2])
    }

    /// Sums the time, guidance and class embeddings.
    pub fn context(&self, tape: &mut Tape, vars: &[Var], cond: &Conditioning) -> Result<Context> {
        self.check_store(vars)?;
        cond.check(self.cfg.num_classes)?;
        let f = self.cfg.freq_dim;
        let et = tape.constant(sinusoidal(&cond.t, TIME_SCALE, f));
        let es = tape.constant(sinusoidal(&cond.s, TIME_SCALE, f));
        let ew = tape.constant(sinusoidal(&cond.w, GUIDANCE_SCALE, f));
        let et = self.mlp(tape, vars, self.ids.emb_t, et)?;
        let es = self.mlp(tape, vars, self.ids.emb_s, es)?;
        let ew = self.mlp(tape, vars, self.ids.emb_w, ew)?;
        let ec = tape.gather_rows(vars[self.ids.class], &cond.labels)?;
        let c = tape.add(et, es)?;
        let c = tape.add(c, ew)?;
        let c = tape.add(c, ec)?;
        let cond_act = tape.silu(c)?;
        let ones = tape.constant(Tensor::filled(&[self.cfg.attn.d], 1.0));
        let batch = cond.batch();
        let n = self.cfg.tokens();
        let layout = self.cfg.layout()?;
        Ok(Context {
            cond_act,
            ones,
            batch,
            dense_rows: RowLayout::repeated(&layout, batch),
            dense_owner: (0..batch).flat_map(|b| std::iter::repeat_n(b, n)).collect(),
        })
    }

    /// `h ⊙ (1 + scale) + shift` after a gain-free RMS norm.
    fn modulate(&self, tape: &mut Tape, x: Var, ones: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = tape.rms_norm(x, ones, self.cfg.attn.rms_eps)?;
        let s1 = tape.add_scalar(scale, 1.0)?;
        let h = tape.mul(h, s1)?;
        tape.add(h, shift)
    }

    fn block(&self, tape: &mut Tape, vars: &[Var], b: &BlockIds, x: Var, ctx: &Context, rows: &RowLayout, owner: &[usize]) -> Result<Var> {
        let d = self.cfg.attn.d;
        let m = tape.matmul(ctx.cond_act, vars[b.mod_w])?;
        let m = tape.add_row(m, vars[b.mod_b])?;
        let m = tape.gather_rows(m, owner)?;
        let part = |tape: &mut Tape, k: usize| tape.slice_cols(m, k * d, d);
        let (shift1, scale1, gate1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let (shift2, scale2, gate2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

        let w = GlgaWeights {
            wq: vars[b.wq],
            wk: vars[b.wk],
            wv: vars[b.wv],
            wo: vars[b.wo],
            wg: vars[b.wg],
            gain_global: vars[b.gain_g],
            gain_local: vars[b.gain_l],
        };
        let h = self.modulate(tape, x, ctx.ones, shift1, scale1)?;
        let a = if b.softmax {
            attention::softmax_forward(tape, h, &w, rows, &self.cfg.attn)?
        } else {
            attention::glga_forward(tape, h, &w, rows, self.cfg.half_span(), &self.cfg.attn)?
        };
        let a = tape.mul(a, gate1)?;
        let x = tape.add(x, a)?;

        let h = self.modulate(tape, x, ctx.ones, shift2, scale2)?;
        let h = tape.matmul(h, vars[b.ff_w1])?;
        let h = tape.add_row(h, vars[b.ff_b1])?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, vars[b.ff_w2])?;
        let h = tape.add_row(h, vars[b.ff_b2])?;
        let h = tape.mul(h, gate2)?;
        tape.add(x, h)
    }

    /// Input embedding and encoder blocks on every token.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var, ctx: &Context) -> Result<Var> {
        let rows = ctx.dense_rows.rows();
        let shape = tape.value(x).shape();
        if shape != [rows, self.cfg.d_in] {
            return Err(Error::dim("encode", format!("input {shape:?}, expected [{rows}, {}]", self.cfg.d_in)));
        }
        let h = tape.matmul(x, vars[self.ids.in_w])?;
        let h = tape.add_row(h, vars[self.ids.in_b])?;
        let pos = tape.gather_rows(vars[self.ids.pos], &ctx.dense_rows.positions)?;
        let mut h = tape.add(h, pos)?;
        for b in &self.ids.blocks[..self.cfg.n_enc] {
            h = self.block(tape, vars, b, h, ctx, &ctx.dense_rows, &ctx.dense_owner)?;
        }
        Ok(h)
    }

    fn plan_rows(&self, ctx: &Context, plans: &[DropPlan]) -> Result<(RowLayout, Vec<usize>, Vec<usize>)> {
        let n = self.cfg.tokens();
        let keep = plans.first().map_or(0, DropPlan::n_keep);
        if plans.len() != ctx.batch || plans.iter().any(|p| p.n_total != n || p.n_keep() != keep || keep == 0) {
            return Err(Error::Usage("drop plans must cover every sample with a shared non-zero kept count".into()));
        }
        let positions: Vec<usize> = plans.iter().flat_map(|p| p.kept.iter().copied()).collect();
        let index = plans.iter().enumerate().flat_map(|(b, p)| p.kept.iter().map(move |&k| b * n + k)).collect();
        let owner = (0..ctx.batch).flat_map(|b| std::iter::repeat_n(b, keep)).collect();
        Ok((RowLayout { positions, seg_len: keep }, index, owner))
    }

    /// Middle blocks on the kept rows (all rows without a plan).
    pub fn middle(&self, tape: &mut Tape, vars: &[Var], h: Var, ctx: &Context, plans: Option<&[DropPlan]>) -> Result<Var> {
        let mids = &self.ids.blocks[self.cfg.n_enc..self.cfg.n_enc + self.cfg.n_mid];
        match plans {
            None => mids.iter().try_fold(h, |h, b| self.block(tape, vars, b, h, ctx, &ctx.dense_rows, &ctx.dense_owner)),
            Some(plans) => {
                let (rows, index, owner) = self.plan_rows(ctx, plans)?;
                let h = tape.gather_rows(h, &index)?;
                mids.iter().try_fold(h, |h, b| self.block(tape, vars, b, h, ctx, &rows, &owner))
            }
        }
    }

    /// Mask-token scatter of the sparse rows plus the dense long residual.
    pub fn fuse(&self, tape: &mut Tape, vars: &[Var], dense: Var, sparse: Var, ctx: &Context, plans: Option<&[DropPlan]>) -> Result<Var> {
        match plans {
            None => tape.add(sparse, dense),
            Some(plans) => {
                let (_, index, _) = self.plan_rows(ctx, plans)?;
                let lifted = tape.scatter_rows_with_fill(sparse, &index, ctx.dense_rows.rows(), vars[self.ids.mask])?;
                tape.add(lifted, dense)
            }
        }
    }

    /// Decoder blocks and the modulated output projection.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], h: Var, ctx: &Context) -> Result<Var> {
        let d = self.cfg.attn.d;
        let mut h = h;
        for b in &self.ids.blocks[self.cfg.n_enc + self.cfg.n_mid..] {
            h = self.block(tape, vars, b, h, ctx, &ctx.dense_rows, &ctx.dense_owner)?;
        }
        let m = tape.matmul(ctx.cond_act, vars[self.ids.fin_w])?;
        let m = tape.add_row(m, vars[self.ids.fin_b])?;
        let m = tape.gather_rows(m, &ctx.dense_owner)?;
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, d)?;
        let h = self.modulate(tape, h, ctx.ones, shift, scale)?;
        let h = tape.matmul(h, vars[self.ids.out_w])?;
        tape.add_row(h, vars[self.ids.out_b])
    }

    /// `F_θ`. The weak path runs dense with `∅` and `w = 0` regardless of `cond`.
    pub fn velocity(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        cond: &Conditioning,
        plans: Option<&[DropPlan]>,
        path: Path,
    ) -> Result<Var> {
        match path {
            Path::Full => {
                let ctx = self.context(tape, vars, cond)?;
                let enc = self.encode(tape, vars, x, &ctx)?;
                let mid = self.middle(tape, vars, enc, &ctx, plans)?;
                let fused = self.fuse(tape, vars, enc, mid, &ctx, plans)?;
                self.decode(tape, vars, fused, &ctx)
            }
            Path::Weak => {
                let b = cond.batch();
                let weak = Conditioning { w: vec![0.0; b], labels: vec![self.cfg.null_class(); b], ..cond.clone() };
                let ctx = self.context(tape, vars, &weak)?;
                let enc = self.encode(tape, vars, x, &ctx)?;
                let fused = self.fuse(tape, vars, enc, enc, &ctx, None)?;
                self.decode(tape, vars, fused, &ctx)
            }
        }
    }

    /// `f_θ = x + (s − t)·F_θ`; rows with `s = t` return `x` exactly.
    pub fn solution(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        cond: &Conditioning,
        plans: Option<&[DropPlan]>,
        path: Path,
    ) -> Result<Var> {
        let f = self.velocity(tape, vars, x, cond, plans, path)?;
        let n = self.cfg.tokens();
        let dt: Vec<f64> = cond.t.iter().zip(&cond.s).flat_map(|(t, s)| std::iter::repeat_n(s - t, n)).collect();
        tape.euler_combine(x, f, &dt)
    }
}

/// Closed-form multiply-add counts of one forward.
pub mod cost {
    use super::{BackboneConfig, Path};
    use crate::attention::{self, cost as acost};

    fn block(cfg: &BackboneConfig, number: usize, batch: u64, rows: u64, seg_len: u64, window_total: u64) -> u64 {
        let a = &cfg.attn;
        let d = a.d as u64;
        let f = (cfg.ffn_mult * a.d) as u64;
        let variant = if cfg.is_softmax_block(number) { attention::Variant::Softmax } else { attention::Variant::Glga };
        batch * d * 6 * d + acost::layer(variant, rows, seg_len, window_total, a) + 2 * rows * d * f
    }

    /// Forward cost for `batch` samples; `sparse` is the kept count per
    /// sample and the summed window sizes over kept rows, if dropping.
    pub fn forward(cfg: &BackboneConfig, batch: u64, sparse: Option<(u64, u64)>, path: Path) -> u64 {
        let d = cfg.attn.d as u64;
        let n = cfg.tokens() as u64;
        let rows = batch * n;
        let dense_window = batch * acost::dense_window_total(cfg.tokens(), cfg.half_span());
        let context = 3 * batch * (cfg.freq_dim as u64 * d + d * d);
        let input = rows * cfg.d_in as u64 * d;
        let output = batch * d * 2 * d + rows * d * cfg.d_in as u64;
        let mut total = context + input + output;
        for i in 1..=cfg.total_blocks() {
            let in_middle = i > cfg.n_enc && i <= cfg.n_enc + cfg.n_mid;
            if !in_middle {
                total += block(cfg, i, batch, rows, n, dense_window);
            } else if path == Path::Full {
                total += match sparse {
                    None => block(cfg, i, batch, rows, n, dense_window),
                    Some((keep, window)) => block(cfg, i, batch, batch * keep, keep, window),
                };
            }
        }
        total
    }
}
