//! Gated local-global attention (GLGA).
//!
//! Shared Q/K/V projections feed two branches: a denominator-free global
//! linear attention (`O_i = Q_i Σ_j K_jᵀ V_j`) and a sliding-window softmax
//! attention over raster neighbours. Each branch is RMS-normalised and the two
//! are fused by sigmoid gates predicted from the block input. Windows are
//! defined on *original* raster indices, so dropping tokens only shrinks them.

use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    /// Window span in latent frames; `|W| = m·h·w`.
    pub m: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    /// Every `interleave_k`-th block uses full softmax attention.
    pub interleave_k: usize,
    /// One gate pair per head instead of one per token.
    pub gate_per_head: bool,
    /// Scale the global key-value summary by `1/N'`.
    pub linear_stabilize: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            m: 4,
            rope_base: 10_000.0,
            rms_eps: 1e-6,
            interleave_k: 8,
            gate_per_head: true,
            linear_stabilize: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        if (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config(format!("head dim {} must be even for RoPE", self.d / self.heads)));
        }
        if self.m == 0 {
            return Err(Error::Config("window span m must be at least 1".into()));
        }
        if self.interleave_k == 0 {
            return Err(Error::Config("interleave_k must be at least 1".into()));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn gate_groups(&self) -> usize {
        if self.gate_per_head {
            self.heads
        } else {
            1
        }
    }
}

/// Rasterised `(T', H', W')` token grid plus the surviving original indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub t_frames: usize,
    pub h: usize,
    pub w: usize,
    surviving: Vec<usize>,
}

impl TokenLayout {
    /// Every token present.
    pub fn dense(t_frames: usize, h: usize, w: usize) -> Result<Self> {
        let n = t_frames * h * w;
        if n == 0 {
            return Err(Error::Config("token grid must be non-empty".into()));
        }
        Ok(Self { t_frames, h, w, surviving: (0..n).collect() })
    }

    pub fn with_surviving(&self, mut surviving: Vec<usize>) -> Result<Self> {
        surviving.sort_unstable();
        surviving.dedup();
        let n = self.len_total();
        if surviving.is_empty() || surviving.last().is_some_and(|&i| i >= n) {
            return Err(Error::Usage(format!("surviving set must be a non-empty subset of 0..{n}")));
        }
        Ok(Self { surviving, ..self.clone() })
    }

    pub fn len_total(&self) -> usize {
        self.t_frames * self.h * self.w
    }

    pub fn surviving(&self) -> &[usize] {
        &self.surviving
    }

    pub fn frame_tokens(&self) -> usize {
        self.h * self.w
    }

    /// `⌊m·h·w / 2⌋`.
    pub fn half_span(&self, m: usize) -> usize {
        m * self.frame_tokens() / 2
    }
}

/// Surviving indices `j` with `|j − i| ≤ ⌊m·h·w/2⌋`, ascending.
pub fn window_index_set(layout: &TokenLayout, i: usize, cfg: &AttentionConfig) -> Result<Vec<usize>> {
    if layout.surviving.binary_search(&i).is_err() {
        return Err(Error::Usage(format!("token {i} is not in the surviving set")));
    }
    let hs = layout.half_span(cfg.m);
    Ok(layout.surviving.iter().copied().filter(|&j| j.abs_diff(i) <= hs).collect())
}

/// Position of every row of a batch of samples stacked along the row axis:
/// sample `b` owns rows `b*seg_len .. (b+1)*seg_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    pub positions: Vec<usize>,
    pub seg_len: usize,
}

impl RowLayout {
    pub fn single(layout: &TokenLayout) -> Self {
        Self { positions: layout.surviving.clone(), seg_len: layout.surviving.len() }
    }

    pub fn repeated(layout: &TokenLayout, batch: usize) -> Self {
        let positions = std::iter::repeat_n(layout.surviving.iter().copied(), batch).flatten().collect();
        Self { positions, seg_len: layout.surviving.len() }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Attention weights as tape variables. `wg` is `d × 2G`.
#[derive(Debug, Clone, Copy)]
pub struct GlgaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub wg: Var,
    pub gain_global: Var,
    pub gain_local: Var,
}

/// Shared projections with RoPE on queries and keys.
fn project(tape: &mut Tape, x: Var, w: &GlgaWeights, rows: &RowLayout, cfg: &AttentionConfig) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let q = tape.rope(q, &rows.positions, cfg.rope_base, cfg.head_dim())?;
    let k = tape.rope(k, &rows.positions, cfg.rope_base, cfg.head_dim())?;
    Ok((q, k, v))
}

pub fn linear_attention(tape: &mut Tape, q: Var, k: Var, v: Var, rows: &RowLayout, cfg: &AttentionConfig) -> Result<Var> {
    let scale = if cfg.linear_stabilize { 1.0 / rows.seg_len as f64 } else { 1.0 };
    tape.linear_attention(q, k, v, cfg.heads, rows.seg_len, scale)
}

pub fn window_attention(tape: &mut Tape, q: Var, k: Var, v: Var, rows: &RowLayout, half_span: usize, cfg: &AttentionConfig) -> Result<Var> {
    tape.window_attention(q, k, v, cfg.heads, rows.seg_len, &rows.positions, half_span)
}

pub fn softmax_attention_reference(tape: &mut Tape, q: Var, k: Var, v: Var, rows: &RowLayout, cfg: &AttentionConfig) -> Result<Var> {
    tape.softmax_attention(q, k, v, cfg.heads, rows.seg_len)
}

/// `g = sigmoid(X W_g)`; `O = g_glob ⊙ O_global + g_loc ⊙ O_local`.
pub fn gate_fuse(tape: &mut Tape, x: Var, global: Var, local: Var, wg: Var) -> Result<Var> {
    let logits = tape.matmul(x, wg)?;
    let gates = tape.sigmoid(logits)?;
    tape.gated_sum(gates, global, local)
}

/// Which branches of the block to evaluate; `Glga` is the full block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Softmax,
    Linear,
    Window,
    Glga,
}

/// Full GLGA block: projection → RoPE → {linear, window} → per-branch RMS
/// norm → gated fusion → output projection.
pub fn glga_forward(
    tape: &mut Tape,
    x: Var,
    w: &GlgaWeights,
    rows: &RowLayout,
    half_span: usize,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let (q, k, v) = project(tape, x, w, rows, cfg)?;
    let og = linear_attention(tape, q, k, v, rows, cfg)?;
    let ol = window_attention(tape, q, k, v, rows, half_span, cfg)?;
    let og = tape.rms_norm(og, w.gain_global, cfg.rms_eps)?;
    let ol = tape.rms_norm(ol, w.gain_local, cfg.rms_eps)?;
    let fused = gate_fuse(tape, x, og, ol, w.wg)?;
    tape.matmul(fused, w.wo)
}

/// Plain multi-head softmax attention layer sharing the GLGA weight layout
/// (gates and branch gains unused).
pub fn softmax_forward(tape: &mut Tape, x: Var, w: &GlgaWeights, rows: &RowLayout, cfg: &AttentionConfig) -> Result<Var> {
    let (q, k, v) = project(tape, x, w, rows, cfg)?;
    let o = softmax_attention_reference(tape, q, k, v, rows, cfg)?;
    tape.matmul(o, w.wo)
}

/// Single-branch layers used by the latency sweep.
pub fn variant_forward(
    tape: &mut Tape,
    variant: Variant,
    x: Var,
    w: &GlgaWeights,
    rows: &RowLayout,
    half_span: usize,
    cfg: &AttentionConfig,
) -> Result<Var> {
    match variant {
        Variant::Glga => glga_forward(tape, x, w, rows, half_span, cfg),
        Variant::Softmax => softmax_forward(tape, x, w, rows, cfg),
        Variant::Linear => {
            let (q, k, v) = project(tape, x, w, rows, cfg)?;
            let o = linear_attention(tape, q, k, v, rows, cfg)?;
            let o = tape.rms_norm(o, w.gain_global, cfg.rms_eps)?;
            tape.matmul(o, w.wo)
        }
        Variant::Window => {
            let (q, k, v) = project(tape, x, w, rows, cfg)?;
            let o = window_attention(tape, q, k, v, rows, half_span, cfg)?;
            let o = tape.rms_norm(o, w.gain_local, cfg.rms_eps)?;
            tape.matmul(o, w.wo)
        }
    }
}

/// Closed-form multiply-add counts matching the instrumented kernels.
pub mod cost {
    use super::{AttentionConfig, RowLayout, Variant};

    /// `Σ_i |W(i)|` for a dense raster of `n` tokens and half span `hs`.
    pub fn dense_window_total(n: usize, hs: usize) -> u64 {
        let h = hs.min(n.saturating_sub(1)) as u64;
        let n = n as u64;
        n * (2 * h + 1) - h * (h + 1)
    }

    /// `Σ_i |W(i)|` for an arbitrary row layout, by enumeration.
    pub fn window_total(rows: &RowLayout, hs: usize) -> u64 {
        rows.positions
            .chunks(rows.seg_len)
            .map(|seg| {
                seg.iter()
                    .map(|&p| seg.iter().filter(|&&q| q.abs_diff(p) <= hs).count() as u64)
                    .sum::<u64>()
            })
            .sum()
    }

    /// Q, K, V and output projections.
    pub fn projections(rows: u64, cfg: &AttentionConfig) -> u64 {
        4 * rows * (cfg.d * cfg.d) as u64
    }

    pub fn linear_core(rows: u64, cfg: &AttentionConfig) -> u64 {
        2 * rows * (cfg.d * cfg.head_dim()) as u64
    }

    pub fn window_core(window_total: u64, cfg: &AttentionConfig) -> u64 {
        2 * window_total * cfg.d as u64
    }

    pub fn softmax_core(rows: u64, seg_len: u64, cfg: &AttentionConfig) -> u64 {
        2 * rows * seg_len * cfg.d as u64
    }

    pub fn gates(rows: u64, cfg: &AttentionConfig) -> u64 {
        rows * (cfg.d * 2 * cfg.gate_groups()) as u64
    }

    /// Whole layer, including projections.
    pub fn layer(variant: Variant, rows: u64, seg_len: u64, window_total: u64, cfg: &AttentionConfig) -> u64 {
        let proj = projections(rows, cfg);
        match variant {
            Variant::Softmax => proj + softmax_core(rows, seg_len, cfg),
            Variant::Linear => proj + linear_core(rows, cfg),
            Variant::Window => proj + window_core(window_total, cfg),
            Variant::Glga => proj + linear_core(rows, cfg) + window_core(window_total, cfg) + gates(rows, cfg),
        }
    }
}
