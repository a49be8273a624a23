use eflow_core::params::normal;
use eflow_core::rng::seeded;
use eflow_core::tensor::Axis;
use eflow_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    normal(&mut seeded(seed), &[rows, cols], 1.0)
}

proptest! {
    #[test]
    fn gather_then_scatter_restores_rows(n in 1usize..12, d in 1usize..5, mask in any::<u16>(), seed in any::<u64>()) {
        let kept: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        prop_assume!(!kept.is_empty());
        let mut tape = Tape::new();
        let x = tape.constant(matrix(n, d, seed));
        let fill = tape.constant(Tensor::new(vec![d], (0..d).map(|i| i as f64 - 7.5).collect()).unwrap());
        let g = tape.gather_rows(x, &kept).unwrap();
        let back = tape.scatter_rows_with_fill(g, &kept, n, fill).unwrap();
        let (xv, bv, fv) = (tape.value(x), tape.value(back), tape.value(fill));
        for i in 0..n {
            let want = if kept.contains(&i) { xv.row(i) } else { fv.data() };
            prop_assert_eq!(bv.row(i), want);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..60.0, seed in any::<u64>()) {
        let mut x = matrix(rows, cols, seed);
        x.data_mut().iter_mut().for_each(|v| *v *= spread);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.softmax_rows(xv).unwrap();
        let p = tape.value(p);
        for i in 0..rows {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rope_preserves_pair_norms(pos in proptest::collection::vec(0usize..4096, 1..6), heads in 1usize..3, seed in any::<u64>()) {
        let hd = 4;
        let x = matrix(pos.len(), heads * hd, seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.rope(xv, &pos, 10_000.0, hd).unwrap();
        let y = tape.value(y);
        for i in 0..pos.len() {
            for h in 0..heads {
                let slice = |r: &[f64]| r[h * hd..(h + 1) * hd].iter().map(|v| v * v).sum::<f64>();
                prop_assert!((slice(y.row(i)) - slice(x.row(i))).abs() <= 1e-12 * (1.0 + slice(x.row(i))));
            }
        }
    }

    #[test]
    fn concat_then_slice_is_identity(rows in 1usize..5, a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let (x, y) = (matrix(rows, a, seed), matrix(rows, b, seed ^ 1));
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let c = tape.concat(&[xv, yv], Axis::Cols).unwrap();
        let left = tape.slice_cols(c, 0, a).unwrap();
        let right = tape.slice_cols(c, a, b).unwrap();
        prop_assert_eq!(tape.value(left), &x);
        prop_assert_eq!(tape.value(right), &y);
    }
}

#[test]
fn rope_at_position_zero_is_identity() {
    let x = matrix(1, 8, 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.rope(xv, &[0], 10_000.0, 8).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn matmul_and_rms_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    let x = tape.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
    let g = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = tape.rms_norm(x, g, 1e-300).unwrap();
    let r = (12.5f64).sqrt();
    let got = tape.value(y).data();
    assert!((got[0] - 3.0 / r).abs() < 1e-15 && (got[1] - 8.0 / r).abs() < 1e-15);
}

#[test]
fn values_and_gradients_are_bitwise_reproducible() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(matrix(6, 4, 9));
        let w = tape.param(matrix(4, 4, 10));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.softmax_rows(h).unwrap();
        let h = tape.linear_attention(h, h, x, 2, 3, 1.0).unwrap();
        let l = tape.mean_square(h).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item(), tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 1, vec![1e300]).unwrap());
    assert!(tape.mul(x, x).is_err());
}
