//! Algebraic invariants checked over generated inputs.

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rr_core::adapters::{compose, AdapterDelta, LowRankPair, ModelSignature, Sign, Term};
use rr_core::datagen::{composite_score, ForgetDataset, ForgetRecord};
use rr_core::diversity::{similarity_matrix, vendi_of_set, vendi_score, EmbeddingSet};
use rr_core::numerics::{sym_eig, DenseMatrix};
use rr_core::subspace::eigenbasis_similarity;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Orthogonal factor of a random symmetric matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
    let a = random_matrix(rng, n, n);
    sym_eig(&DenseMatrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)])).unwrap().eigenvectors
}

const LAYERS: [(&str, usize, usize); 2] = [("q", 12, 10), ("v", 8, 16)];

fn signature() -> ModelSignature {
    ModelSignature::new(LAYERS.iter().map(|&(n, o, i)| (n.to_string(), (o, i))).collect()).unwrap()
}

fn random_delta(rng: &mut ChaCha8Rng, name: &str) -> Arc<AdapterDelta> {
    let mut d = AdapterDelta::new(name);
    for &(layer, d_out, d_in) in &LAYERS {
        let rank = rng.random_range(1..=4);
        let pair = LowRankPair::new(random_matrix(rng, rank, d_in), random_matrix(rng, d_out, rank), rng.random_range(0.5..2.0))
            .unwrap();
        d = d.with_layer(layer, pair);
    }
    Arc::new(d)
}

fn random_terms(rng: &mut ChaCha8Rng, count: usize) -> Vec<Term> {
    (0..count)
        .map(|i| {
            let sign = if rng.random_bool(0.5) { Sign::Plus } else { Sign::Minus };
            Term::new(sign, rng.random_range(0.0..5.0), random_delta(rng, &format!("t{i}")))
        })
        .collect()
}

fn bases(rng: &mut ChaCha8Rng) -> BTreeMap<String, DenseMatrix> {
    LAYERS.iter().map(|&(n, o, i)| (n.to_string(), random_matrix(rng, o, i))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vendi_is_permutation_invariant(seed in any::<u64>(), n in 1usize..12, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = unit_rows(&mut rng, n, dim);
        let mut shuffled = rows.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = vendi_of_set(&EmbeddingSet::normalized(rows).unwrap()).unwrap();
        let b = vendi_of_set(&EmbeddingSet::normalized(shuffled).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn vendi_lies_between_one_and_distinct_count(seed in any::<u64>(), n in 1usize..10, dim in 1usize..8, dups in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = unit_rows(&mut rng, n, dim);
        for _ in 0..dups {
            let i = rng.random_range(0..n);
            rows.push(rows[i].clone());
        }
        let set = EmbeddingSet::normalized(rows).unwrap();
        let v = vendi_score(&similarity_matrix(&set)).unwrap();
        prop_assert!(v >= 1.0 - 1e-9);
        prop_assert!(v <= n as f64 + 1e-9, "{} > {}", v, n);
    }

    #[test]
    fn vendi_of_identical_rows_is_one(seed in any::<u64>(), n in 1usize..12, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = unit_rows(&mut rng, 1, dim).remove(0);
        let set = EmbeddingSet::normalized(vec![row; n]).unwrap();
        prop_assert!((vendi_of_set(&set).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn merge_is_linear_in_term_lists(seed in any::<u64>(), n1 in 0usize..4, n2 in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sig, base) = (signature(), bases(&mut rng));
        let (t1, t2) = (random_terms(&mut rng, n1), random_terms(&mut rng, n2));
        let joint: Vec<Term> = t1.iter().chain(&t2).cloned().collect();
        let m1 = compose("b", &sig, t1).unwrap().materialize_all(&base).unwrap();
        let m2 = compose("b", &sig, t2).unwrap().materialize_all(&base).unwrap();
        let m12 = compose("b", &sig, joint).unwrap().materialize_all(&base).unwrap();
        for (layer, b) in &base {
            let mut expected = m1[layer].clone();
            expected.add_scaled(1.0, &m2[layer]).unwrap();
            expected.add_scaled(-1.0, b).unwrap();
            prop_assert!(m12[layer].max_abs_diff(&expected) < 1e-9);
        }
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution(seed in any::<u64>(), w in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sig, base) = (signature(), bases(&mut rng));
        let delta = random_delta(&mut rng, "d");
        let one = compose("b", &sig, vec![Term::new(Sign::Minus, w, delta.clone())]).unwrap();
        let two = compose("b", &sig, vec![Term::new(Sign::Minus, 2.0 * w, delta)]).unwrap();
        for (layer, b) in &base {
            let c1 = one.materialize(layer, b).unwrap().sub(b).unwrap().scaled(2.0);
            let c2 = two.materialize(layer, b).unwrap().sub(b).unwrap();
            prop_assert!(c1.max_abs_diff(&c2) < 1e-10);
        }
    }

    #[test]
    fn zero_weights_leave_base_bitwise(seed in any::<u64>(), count in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sig, base) = (signature(), bases(&mut rng));
        let terms = random_terms(&mut rng, count).into_iter().map(|t| Term { weight: 0.0, ..t }).collect();
        let merged = compose("b", &sig, terms).unwrap().materialize_all(&base).unwrap();
        prop_assert_eq!(merged, base);
    }

    #[test]
    fn self_similarity_is_inverse_sqrt_k(seed in any::<u64>(), rows in 2usize..12, cols in 2usize..12, kfrac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, rows, cols);
        let k = 1 + ((rows.min(cols) - 1) as f64 * kfrac) as usize;
        let s = eigenbasis_similarity(&w, &w, k, false).unwrap();
        prop_assert!((s - 1.0 / (k as f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn similarity_ignores_row_space_rotation_and_order(seed in any::<u64>(), rows in 2usize..10, cols in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w1, w2) = (random_matrix(&mut rng, rows, cols), random_matrix(&mut rng, rows, cols));
        let k = rng.random_range(1..=rows.min(cols));
        let q = random_orthogonal(&mut rng, cols);
        let s = eigenbasis_similarity(&w1, &w2, k, false).unwrap();
        let rotated = eigenbasis_similarity(&w1.matmul(&q).unwrap(), &w2, k, false).unwrap();
        let swapped = eigenbasis_similarity(&w2, &w1, k, false).unwrap();
        prop_assert!((s - rotated).abs() < 1e-8, "{} vs {}", s, rotated);
        prop_assert!((s - swapped).abs() < 1e-10);
    }

    #[test]
    fn composite_endpoints_hold(v in 1.0f64..50.0, tau in 0.0f64..=1.0) {
        prop_assert_eq!(composite_score(v, tau, 0.0).unwrap().value, tau);
        prop_assert_eq!(composite_score(v, tau, 1.0).unwrap().value, v);
    }

    #[test]
    fn dataset_never_holds_normalized_duplicates(words in prop::collection::vec("[a-cA-C]{1,2}( {1,3}[a-c]{1,2}){0,2}", 1..40)) {
        let mut d = ForgetDataset::new();
        let mut last = 0;
        for (i, w) in words.iter().enumerate() {
            let rec = ForgetRecord {
                context_index: i,
                instruction: String::new(),
                response: w.clone(),
                relevance: 0.5,
                outer_iteration: 1,
                below_floor: false,
            };
            d.push(rec, vec![1.0]);
            prop_assert!(d.len() >= last);
            last = d.len();
        }
        let mut keys: Vec<String> = d.records().iter().map(|r| rr_core::datagen::normalize_response(&r.response)).collect();
        let total = keys.len();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), total);
    }
}
