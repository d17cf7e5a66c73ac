use mcan_core::decomposition::{conflict_norm_sweep, split_aligned_conflict};
use mcan_core::tensor::{svd, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matrix_strategy() -> impl Strategy<Value = Tensor> {
    (2usize..12, 2usize..12).prop_flat_map(|(m, n)| prop::collection::vec(-10.0f64..10.0, m * n).prop_map(move |d| Tensor::matrix(m, n, d).unwrap()))
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let x = random_matrix(&mut rng, m, n);
        let ours = svd(&x).unwrap();
        let mut theirs: Vec<f64> = to_na(&x).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(ours.s.numel(), theirs.len());
        for (a, b) in ours.s.data().iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-10 * theirs[0].max(1.0), "{m}x{n}: {a} vs {b}");
        }
    }
}

#[test]
fn truncated_reconstruction_matches_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let x = random_matrix(&mut rng, m, n);
        let k = rng.random_range(1..m.min(n));
        let split = split_aligned_conflict(&x, k).unwrap();

        let dec = to_na(&x).svd(true, true);
        let (u, vt) = (dec.u.unwrap(), dec.v_t.unwrap());
        let mut idx: Vec<usize> = (0..dec.singular_values.len()).collect();
        idx.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
        // Random spectra are simple with probability one, so the top-k
        // subspace is well defined.
        let gap = dec.singular_values[idx[k - 1]] - dec.singular_values[idx[k]];
        if gap < 1e-6 {
            continue;
        }
        let mut aligned = DMatrix::<f64>::zeros(m, n);
        for &t in &idx[..k] {
            aligned += dec.singular_values[t] * u.column(t) * vt.row(t);
        }
        let ours = to_na(&split.aligned);
        assert!((ours - aligned).norm() <= 1e-8 * to_na(&x).norm(), "{m}x{n} k={k}");
    }
}

#[test]
fn aligned_rank_is_at_most_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(2..=20), rng.random_range(2..=20));
        let x = random_matrix(&mut rng, m, n);
        let k = rng.random_range(1..m.min(n));
        let split = split_aligned_conflict(&x, k).unwrap();
        let rank = to_na(&split.aligned).rank(1e-9 * x.frobenius_norm());
        assert!(rank <= split.k_used, "rank {rank} > k {}", split.k_used);
    }
}

proptest! {
    #[test]
    fn split_reconstructs_input(x in matrix_strategy(), k in 1usize..12) {
        let s = split_aligned_conflict(&x, k).unwrap();
        let back = s.aligned.add(&s.conflict).unwrap();
        let scale = x.frobenius_norm().max(1e-300);
        prop_assert!(back.sub(&x).unwrap().frobenius_norm() <= 1e-10 * scale);
    }

    #[test]
    fn constituents_are_orthogonal(x in matrix_strategy(), k in 1usize..12) {
        let s = split_aligned_conflict(&x, k).unwrap();
        let f2 = x.frobenius_norm().powi(2);
        let a2 = s.aligned.frobenius_norm().powi(2);
        let c2 = s.conflict.frobenius_norm().powi(2);
        prop_assert!((f2 - a2 - c2).abs() <= 1e-8 * f2.max(1.0));
        prop_assert!(s.aligned.inner(&s.conflict).unwrap().abs() <= 1e-8 * f2.max(1.0));
    }

    #[test]
    fn conflict_norm_non_increasing_in_k(x in matrix_strategy()) {
        let ks: Vec<usize> = (1..=12).collect();
        let sweep = conflict_norm_sweep(&x, &ks).unwrap();
        for w in sweep.windows(2) {
            prop_assert!(w[1].1 <= w[0].1 + 1e-12 * x.frobenius_norm());
        }
    }

    #[test]
    fn split_is_deterministic(x in matrix_strategy(), k in 1usize..12) {
        let a = split_aligned_conflict(&x, k).unwrap();
        let b = split_aligned_conflict(&x, k).unwrap();
        prop_assert_eq!(a.aligned.data(), b.aligned.data());
        prop_assert_eq!(a.conflict.data(), b.conflict.data());
    }

    #[test]
    fn singular_values_sorted_and_non_negative(x in matrix_strategy()) {
        let s = svd(&x).unwrap().s;
        prop_assert!(s.data().iter().all(|v| *v >= 0.0));
        prop_assert!(s.data().windows(2).all(|w| w[0] >= w[1]));
    }
}
