use eflow_core::attention::{self, cost, AttentionConfig, GlgaWeights, RowLayout, TokenLayout, Variant};
use eflow_core::flops;
use eflow_core::params::normal;
use eflow_core::rng::seeded;
use eflow_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    normal(&mut seeded(seed), &[rows, cols], 1.0)
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    Tensor::matrix(idx.len(), d, idx.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
}

fn window(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, positions: &[usize], half_span: usize) -> Tensor {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let o = tape.window_attention(q, k, v, heads, positions.len(), positions, half_span).unwrap();
    tape.value(o).clone()
}

fn linear(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let n = q.rows();
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let o = tape.linear_attention(q, k, v, heads, n, 1.0).unwrap();
    tape.value(o).clone()
}

/// `O_i = Σ_j (q_i · k_j) v_j` per head.
fn linear_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
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
    Tensor::matrix(n, d, out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_window_equals_softmax(n in 1usize..20, heads in 1usize..3, seed in any::<u64>()) {
        let d = 4 * heads;
        let (q, k, v) = (matrix(n, d, seed), matrix(n, d, seed ^ 1), matrix(n, d, seed ^ 2));
        let positions: Vec<usize> = (0..n).collect();
        let w = window(&q, &k, &v, heads, &positions, n);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let s = tape.softmax_attention(qv, kv, vv, heads, n).unwrap();
        prop_assert!(w.max_abs_diff(tape.value(s)) <= 1e-12);
    }

    #[test]
    fn linear_matches_double_loop(n in 1usize..16, heads in 1usize..3, seed in any::<u64>()) {
        let d = 2 * heads;
        let (q, k, v) = (matrix(n, d, seed), matrix(n, d, seed ^ 1), matrix(n, d, seed ^ 2));
        prop_assert!(linear(&q, &k, &v, heads).max_abs_diff(&linear_oracle(&q, &k, &v, heads)) <= 1e-12);
    }

    #[test]
    fn dropping_outside_the_window_leaves_local_output(
        n in 2usize..40,
        half_span in 0usize..6,
        target in any::<prop::sample::Index>(),
        mask in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let d = 4;
        let (q, k, v) = (matrix(n, d, seed), matrix(n, d, seed ^ 1), matrix(n, d, seed ^ 2));
        let all: Vec<usize> = (0..n).collect();
        let i = target.index(n);
        let full = window(&q, &k, &v, 2, &all, half_span);
        let kept: Vec<usize> = (0..n).filter(|&j| j.abs_diff(i) <= half_span || mask >> (j % 64) & 1 == 1).collect();
        let sub = window(&rows_of(&q, &kept), &rows_of(&k, &kept), &rows_of(&v, &kept), 2, &kept, half_span);
        let at = kept.iter().position(|&j| j == i).unwrap();
        let drift = full.row(i).iter().zip(sub.row(at)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(drift <= 1e-12);
    }

    #[test]
    fn storage_permutation_contract(n in 1usize..16, half_span in 0usize..5, seed in any::<u64>()) {
        let d = 4;
        let (q, k, v) = (matrix(n, d, seed), matrix(n, d, seed ^ 1), matrix(n, d, seed ^ 2));
        let positions: Vec<usize> = (0..n).map(|i| 3 * i).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = seeded(seed ^ 3);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let ppos: Vec<usize> = perm.iter().map(|&p| positions[p]).collect();
        let (pq, pk, pv) = (rows_of(&q, &perm), rows_of(&k, &perm), rows_of(&v, &perm));
        let base_w = window(&q, &k, &v, 2, &positions, half_span);
        let perm_w = window(&pq, &pk, &pv, 2, &ppos, half_span);
        prop_assert!(rows_of(&base_w, &perm).max_abs_diff(&perm_w) <= 1e-12);
        let base_l = linear(&q, &k, &v, 2);
        let perm_l = linear(&pq, &pk, &pv, 2);
        prop_assert!(rows_of(&base_l, &perm).max_abs_diff(&perm_l) <= 1e-12);
    }

    #[test]
    fn gates_stay_in_open_unit_interval(n in 1usize..8, scale in 0.01f64..3.0, seed in any::<u64>()) {
        let d = 4;
        let mut tape = Tape::new();
        let x = tape.constant(matrix(n, d, seed));
        let mut wg = matrix(d, 4, seed ^ 1);
        wg.data_mut().iter_mut().for_each(|v| *v *= scale);
        let wg = tape.constant(wg);
        let logits = tape.matmul(x, wg).unwrap();
        let g = tape.sigmoid(logits).unwrap();
        prop_assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn window_sets_follow_original_indices() {
    let cfg = AttentionConfig { m: 1, ..AttentionConfig::default() };
    let layout = TokenLayout::dense(2, 2, 2).unwrap().with_surviving(vec![0, 3, 4, 7]).unwrap();
    // half span is ⌊1·2·2/2⌋ = 2
    assert_eq!(attention::window_index_set(&layout, 3, &cfg).unwrap(), vec![3, 4]);
    assert_eq!(attention::window_index_set(&layout, 0, &cfg).unwrap(), vec![0]);
    assert!(attention::window_index_set(&layout, 1, &cfg).is_err());
}

fn layer_flops(variant: Variant, n: usize, cfg: &AttentionConfig) -> (u64, u64) {
    let layout = TokenLayout::dense(1, 1, n).unwrap();
    let rows = RowLayout::single(&layout);
    let hs = cfg.m * n / 2;
    let hs = hs.min(cfg.m * 8);
    let mut tape = Tape::new();
    let mut rng = seeded(5);
    let d = cfg.d;
    let x = tape.constant(normal(&mut rng, &[n, d], 1.0));
    let mut p = |shape: &[usize]| tape.constant(normal(&mut rng, shape, 0.3));
    let w = GlgaWeights {
        wq: p(&[d, d]),
        wk: p(&[d, d]),
        wv: p(&[d, d]),
        wo: p(&[d, d]),
        wg: p(&[d, 2 * cfg.gate_groups()]),
        gain_global: p(&[d]),
        gain_local: p(&[d]),
    };
    let (_, measured) = flops::measure(|| attention::variant_forward(&mut tape, variant, x, &w, &rows, hs, cfg).unwrap());
    let wt = cost::window_total(&rows, hs);
    (measured, cost::layer(variant, n as u64, n as u64, wt, cfg))
}

#[test]
fn measured_flops_match_closed_form_and_scale() {
    let cfg = AttentionConfig { d: 16, heads: 2, ..AttentionConfig::default() };
    let sizes = [64usize, 128, 256, 512, 1024];
    for variant in [Variant::Softmax, Variant::Linear, Variant::Window, Variant::Glga] {
        let counts: Vec<u64> = sizes
            .iter()
            .map(|&n| {
                let (measured, analytic) = layer_flops(variant, n, &cfg);
                assert_eq!(measured, analytic, "{variant:?} at N={n}");
                measured
            })
            .collect();
        let last = counts[4] as f64 / counts[3] as f64;
        match variant {
            Variant::Softmax => assert!(last > 3.0, "softmax ratio {last}"),
            _ => assert!((last - 2.0).abs() < 0.05, "{variant:?} ratio {last}"),
        }
    }
}
