//! Cross-checks of the hand-written kernels against nalgebra as an
//! independent reference implementation.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rr_core::numerics::{rank_one_inverse_update, sym_eig, topk_left_singular, DenseMatrix};

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
    let a = random_matrix(rng, n, n);
    DenseMatrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)])
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
    let a = random_matrix(rng, n, n);
    let mut s = a.gram_cols();
    for i in 0..n {
        s[(i, i)] += 0.5;
    }
    s
}

#[test]
fn random_symmetric_spectrum_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let s = random_symmetric(&mut rng, 6);
        let ours = sym_eig(&s).unwrap();
        let mut reference: Vec<f64> = to_na(&s).symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.eigenvalues.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn reconstruction_and_orthonormality() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [1, 2, 5, 12, 30] {
        let s = random_symmetric(&mut rng, n);
        let eig = sym_eig(&s).unwrap();
        let v = &eig.eigenvectors;
        let lambda = DenseMatrix::from_diag(&eig.eigenvalues);
        let rebuilt = v.matmul(&lambda).unwrap().matmul(&v.transpose()).unwrap();
        let err = rebuilt.sub(&s).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * s.frobenius_norm(), "n={n} err={err}");
        let vtv = v.transpose().matmul(v).unwrap();
        assert!(vtv.max_abs_diff(&DenseMatrix::identity(n)) < 1e-8);
        for j in 0..n {
            let sv = s.matvec(&v.column(j));
            for i in 0..n {
                assert!((sv[i] - eig.eigenvalues[j] * v[(i, j)]).abs() < 1e-8 * s.frobenius_norm());
            }
        }
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }
}

fn projector(u: &DenseMatrix) -> DenseMatrix {
    u.matmul(&u.transpose()).unwrap()
}

#[test]
fn topk_projector_matches_full_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (rows, cols) in [(8, 5), (5, 8), (8, 8)] {
        let w = random_matrix(&mut rng, rows, cols);
        let k = 3;
        let ours = topk_left_singular(&w, k).unwrap();
        let svd = to_na(&w).svd(true, false);
        let u = svd.u.unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let reference = DenseMatrix::from_fn(rows, k, |i, j| u[(i, idx[j])]);
        let diff = projector(&ours).max_abs_diff(&projector(&reference));
        assert!(diff < 1e-7, "{rows}x{cols}: projector diff {diff}");
    }
}

#[test]
fn sherman_morrison_matches_direct_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let z = random_spd(&mut rng, 5);
        let raw = to_na(&z).try_inverse().unwrap();
        let z_inv = DenseMatrix::from_fn(5, 5, |i, j| 0.5 * (raw[(i, j)] + raw[(j, i)]));
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let updated = rank_one_inverse_update(&z_inv, &g).unwrap();
        let mut direct = to_na(&z);
        let gv = nalgebra::DVector::from_vec(g.clone());
        direct += &gv * gv.transpose();
        let expected = direct.try_inverse().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((updated[(i, j)] - expected[(i, j)]).abs() < 1e-6);
                assert_eq!(updated[(i, j)], updated[(j, i)]);
            }
        }
        let ident = to_na(&updated) * direct_matrix(&z, &g);
        assert!((ident - DMatrix::identity(5, 5)).abs().max() < 1e-6);
    }
}

fn direct_matrix(z: &DenseMatrix, g: &[f64]) -> DMatrix<f64> {
    let gv = nalgebra::DVector::from_vec(g.to_vec());
    to_na(z) + &gv * gv.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenvalue_sum_is_trace(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_symmetric(&mut rng, n);
        let eig = sym_eig(&s).unwrap();
        let sum: f64 = eig.eigenvalues.iter().sum();
        let trace = s.trace();
        prop_assert!((sum - trace).abs() <= 1e-8 * trace.abs().max(1.0));
    }

    #[test]
    fn topk_columns_orthonormal(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10, kfrac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, rows, cols);
        let k = 1 + ((rows.min(cols) - 1) as f64 * kfrac) as usize;
        let u = topk_left_singular(&w, k).unwrap();
        let utu = u.transpose().matmul(&u).unwrap();
        prop_assert!(utu.max_abs_diff(&DenseMatrix::identity(k)) < 1e-8);
    }

    #[test]
    fn repeated_updates_match_direct_inversion(seed in any::<u64>(), dim in 1usize..32, count in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = 1.0;
        let mut inv = DenseMatrix::identity(dim).scaled(1.0 / lambda);
        let mut z = DMatrix::<f64>::identity(dim, dim) * lambda;
        for _ in 0..count {
            let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            inv = rank_one_inverse_update(&inv, &g).unwrap();
            let gv = nalgebra::DVector::from_vec(g);
            z += &gv * gv.transpose();
        }
        let expected = z.try_inverse().unwrap();
        let diff = (to_na(&inv) - expected).abs().max();
        prop_assert!(diff < 1e-5, "diff {}", diff);
    }
}
