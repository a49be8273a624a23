//! Raw row-major kernels. Every reduction accumulates in ascending index
//! order so single-threaded results are bit-reproducible.

use crate::flops;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    flops::add((m * k * n) as u64);
    c
}

/// `a[m×k] · b[n×k]ᵀ`, uncounted (backward use).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`, uncounted (backward use).
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
    c
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Shape bookkeeping shared by the multi-head attention kernels. Rows are
/// tokens; head `h` owns columns `h*dh .. (h+1)*dh`; consecutive blocks of
/// `seg_len` rows belong to independent samples.
#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub rows: usize,
    pub width: usize,
    pub heads: usize,
    pub seg_len: usize,
}

impl HeadLayout {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
    fn segments(&self) -> usize {
        self.rows / self.seg_len
    }
    #[inline]
    fn slice<'a>(&self, x: &'a [f64], row: usize, head: usize) -> &'a [f64] {
        let dh = self.head_dim();
        let at = row * self.width + head * dh;
        &x[at..at + dh]
    }
}

/// Denominator-free linear attention: per segment and head
/// `S = scale · Σ_j K_jᵀ V_j`, `O_i = Q_i S`.
pub fn linear_attention(q: &[f64], k: &[f64], v: &[f64], hl: HeadLayout, scale: f64) -> Vec<f64> {
    let dh = hl.head_dim();
    let mut out = vec![0.0; hl.rows * hl.width];
    let mut s = vec![0.0; dh * dh];
    for seg in 0..hl.segments() {
        let rows = seg * hl.seg_len..(seg + 1) * hl.seg_len;
        for h in 0..hl.heads {
            s.iter_mut().for_each(|x| *x = 0.0);
            for j in rows.clone() {
                let kj = hl.slice(k, j, h);
                let vj = hl.slice(v, j, h);
                for a in 0..dh {
                    let ka = kj[a];
                    for b in 0..dh {
                        s[a * dh + b] += ka * vj[b];
                    }
                }
            }
            if scale != 1.0 {
                s.iter_mut().for_each(|x| *x *= scale);
            }
            for i in rows.clone() {
                let qi = hl.slice(q, i, h);
                let base = i * hl.width + h * dh;
                for a in 0..dh {
                    let qa = qi[a];
                    for b in 0..dh {
                        out[base + b] += qa * s[a * dh + b];
                    }
                }
            }
        }
    }
    flops::add((2 * hl.rows * hl.heads * dh * dh) as u64);
    out
}

pub fn linear_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    hl: HeadLayout,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = hl.head_dim();
    let n = hl.rows * hl.width;
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut s = vec![0.0; dh * dh];
    let mut ds = vec![0.0; dh * dh];
    for seg in 0..hl.segments() {
        let rows = seg * hl.seg_len..(seg + 1) * hl.seg_len;
        for h in 0..hl.heads {
            s.iter_mut().for_each(|x| *x = 0.0);
            ds.iter_mut().for_each(|x| *x = 0.0);
            for j in rows.clone() {
                let (kj, vj) = (hl.slice(k, j, h), hl.slice(v, j, h));
                for a in 0..dh {
                    for b in 0..dh {
                        s[a * dh + b] += kj[a] * vj[b];
                    }
                }
            }
            s.iter_mut().for_each(|x| *x *= scale);
            for i in rows.clone() {
                let (qi, gi) = (hl.slice(q, i, h), hl.slice(dout, i, h));
                let base = i * hl.width + h * dh;
                for a in 0..dh {
                    dq[base + a] = dot(gi, &s[a * dh..(a + 1) * dh]);
                    for b in 0..dh {
                        ds[a * dh + b] += qi[a] * gi[b];
                    }
                }
            }
            ds.iter_mut().for_each(|x| *x *= scale);
            for j in rows.clone() {
                let (kj, vj) = (hl.slice(k, j, h), hl.slice(v, j, h));
                let base = j * hl.width + h * dh;
                for a in 0..dh {
                    dk[base + a] = dot(vj, &ds[a * dh..(a + 1) * dh]);
                }
                for b in 0..dh {
                    let mut acc = 0.0;
                    for a in 0..dh {
                        acc += kj[a] * ds[a * dh + b];
                    }
                    dv[base + b] = acc;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Softmax attention where row `i` attends to the rows listed in
/// `windows[i]` (in the listed order).
pub fn windowed_softmax_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    hl: HeadLayout,
    windows: &[Vec<usize>],
) -> Vec<f64> {
    let dh = hl.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; hl.rows * hl.width];
    let mut p = Vec::new();
    let mut macs = 0u64;
    for i in 0..hl.rows {
        let win = &windows[i];
        for h in 0..hl.heads {
            let qi = hl.slice(q, i, h);
            p.clear();
            p.extend(win.iter().map(|&j| dot(qi, hl.slice(k, j, h)) * inv));
            softmax_in_place(&mut p);
            let base = i * hl.width + h * dh;
            for (pj, &j) in p.iter().zip(win) {
                let vj = hl.slice(v, j, h);
                for b in 0..dh {
                    out[base + b] += pj * vj[b];
                }
            }
        }
        macs += (2 * win.len() * dh * hl.heads) as u64;
    }
    flops::add(macs);
    out
}

pub fn windowed_softmax_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    hl: HeadLayout,
    windows: &[Vec<usize>],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = hl.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    let n = hl.rows * hl.width;
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut p = Vec::new();
    let mut dp = Vec::new();
    for i in 0..hl.rows {
        let win = &windows[i];
        for h in 0..hl.heads {
            let qi = hl.slice(q, i, h);
            let gi = hl.slice(dout, i, h);
            p.clear();
            p.extend(win.iter().map(|&j| dot(qi, hl.slice(k, j, h)) * inv));
            softmax_in_place(&mut p);
            dp.clear();
            dp.extend(win.iter().map(|&j| dot(gi, hl.slice(v, j, h))));
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qbase = i * hl.width + h * dh;
            for (idx, &j) in win.iter().enumerate() {
                let dscore = p[idx] * (dp[idx] - mean) * inv;
                let kj = hl.slice(k, j, h);
                let jbase = j * hl.width + h * dh;
                for b in 0..dh {
                    dq[qbase + b] += dscore * kj[b];
                    dk[jbase + b] += dscore * qi[b];
                    dv[jbase + b] += p[idx] * gi[b];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Full softmax attention over every pair inside a segment, O(N²).
pub fn full_softmax_attention(q: &[f64], k: &[f64], v: &[f64], hl: HeadLayout) -> Vec<f64> {
    let dh = hl.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; hl.rows * hl.width];
    let mut p = vec![0.0; hl.seg_len];
    for seg in 0..hl.segments() {
        let start = seg * hl.seg_len;
        for i in start..start + hl.seg_len {
            for h in 0..hl.heads {
                let qi = hl.slice(q, i, h);
                for (jj, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, hl.slice(k, start + jj, h)) * inv;
                }
                softmax_in_place(&mut p);
                let base = i * hl.width + h * dh;
                for (jj, pj) in p.iter().enumerate() {
                    let vj = hl.slice(v, start + jj, h);
                    for b in 0..dh {
                        out[base + b] += pj * vj[b];
                    }
                }
            }
        }
    }
    flops::add((2 * hl.rows * hl.seg_len * dh * hl.heads) as u64);
    out
}

pub fn full_softmax_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    hl: HeadLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let windows: Vec<Vec<usize>> = (0..hl.rows)
        .map(|i| {
            let start = i / hl.seg_len * hl.seg_len;
            (start..start + hl.seg_len).collect()
        })
        .collect();
    windowed_softmax_attention_backward(q, k, v, dout, hl, &windows)
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Window membership by original position: for each row, the rows of the same
/// segment whose position lies within `half_span` of its own, ordered by
/// position. Independent of storage order inside a segment.
pub fn window_rows(positions: &[usize], seg_len: usize, half_span: usize) -> Vec<Vec<usize>> {
    let rows = positions.len();
    let mut windows = vec![Vec::new(); rows];
    let mut order: Vec<usize> = Vec::with_capacity(seg_len);
    for start in (0..rows).step_by(seg_len.max(1)) {
        order.clear();
        order.extend(start..start + seg_len);
        order.sort_by_key(|&r| (positions[r], r));
        let sorted: Vec<usize> = order.iter().map(|&r| positions[r]).collect();
        for &r in &order {
            let p = positions[r];
            let lo = sorted.partition_point(|&q| q + half_span < p);
            let hi = sorted.partition_point(|&q| q <= p + half_span);
            windows[r] = order[lo..hi].to_vec();
        }
    }
    windows
}
