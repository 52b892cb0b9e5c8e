//! Property tests for the numeric kernels: score head, rank statistics,
//! correlation measures, and normalization.

use csca_core::analysis::binned_rating_means;
use csca_core::dataset::normalize_ratings;
use csca_core::evaluation::{average_ranks, plcc, srcc};
use csca_core::model::{expected_score, softmax, ScoreDistribution};
use csca_core::{ContentLabel, DrawingRecord, Split};
use ndarray::Array1;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 5)
}

/// Vectors with plenty of ties, for rank statistics.
fn tied_values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0i32..8, 3..max_len).prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn is_non_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

proptest! {
    #[test]
    fn score_distribution_is_a_bounded_simplex(l in logits()) {
        let logits = Array1::from_vec(l);
        let dist = ScoreDistribution::from_logits(&logits).unwrap();
        let sum: f64 = dist.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(dist.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((0.2..=1.0).contains(&dist.score), "score = {}", dist.score);
    }

    #[test]
    fn score_is_invariant_to_logit_shifts(l in logits(), shift in -100.0f64..100.0) {
        let base = Array1::from_vec(l);
        let shifted = &base + shift;
        let a = ScoreDistribution::from_logits(&base).unwrap();
        let b = ScoreDistribution::from_logits(&shifted).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-9);
    }

    #[test]
    fn softmax_output_is_sorted_like_its_input(l in logits()) {
        let logits = Array1::from_vec(l);
        let p = softmax(&logits);
        for i in 0..5 {
            for j in 0..5 {
                if logits[i] > logits[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn average_ranks_preserve_the_rank_sum(v in tied_values(40)) {
        let ranks = average_ranks(&v).unwrap();
        let n = v.len();
        let expected: f64 = (n * (n + 1)) as f64 / 2.0;
        let total: f64 = ranks.iter().sum();
        prop_assert!((total - expected).abs() < 1e-9 * expected);
        prop_assert!(ranks.iter().all(|&r| (1.0..=n as f64).contains(&r)));
    }

    #[test]
    fn equal_values_share_a_rank(v in tied_values(40)) {
        let ranks = average_ranks(&v).unwrap();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] == v[j] {
                    prop_assert_eq!(ranks[i], ranks[j]);
                }
            }
        }
    }

    #[test]
    fn srcc_is_bounded_and_transform_invariant(
        x in tied_values(30),
        y_seed in tied_values(30),
    ) {
        let n = x.len().min(y_seed.len());
        prop_assume!(n >= 3);
        let x = &x[..n];
        let y = &y_seed[..n];
        prop_assume!(is_non_constant(x) && is_non_constant(y));

        let r = srcc(x, y).unwrap();
        prop_assert!(r.abs() <= 1.0 + 1e-12);

        // A strictly increasing map leaves ranks, and therefore the
        // coefficient, bitwise unchanged.
        let cubed: Vec<f64> = x.iter().map(|&v| v * v * v + 2.0 * v).collect();
        prop_assert_eq!(srcc(&cubed, y).unwrap().to_bits(), r.to_bits());
    }

    #[test]
    fn srcc_of_reversed_order_negates(v in prop::collection::vec(-100.0f64..100.0, 3..30)) {
        prop_assume!(is_non_constant(&v));
        let neg: Vec<f64> = v.iter().map(|&x| -x).collect();
        let r = srcc(&v, &v).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
        let flipped = srcc(&v, &neg).unwrap();
        prop_assert!((flipped + r).abs() < 1e-9);
    }

    #[test]
    fn plcc_is_affine_invariant(
        v in prop::collection::vec(-100.0f64..100.0, 3..30),
        scale in 0.1f64..10.0,
        offset in -50.0f64..50.0,
    ) {
        prop_assume!(is_non_constant(&v));
        let w: Vec<f64> = v.iter().map(|&x| scale * x + offset).collect();
        let r = plcc(&v, &w).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-6, "r = {r}");
        let neg: Vec<f64> = w.iter().map(|&x| -x).collect();
        let rn = plcc(&v, &neg).unwrap();
        prop_assert!((rn + 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalized_ratings_live_in_the_unit_interval(
        raw in prop::collection::vec(1.0f64..5.0, 4..20),
    ) {
        prop_assume!(is_non_constant(&raw));
        let records: Vec<DrawingRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, &r)| DrawingRecord {
                id: format!("r{i:03}"),
                image_path: format!("r{i:03}.png"),
                rating_raw: r,
                rating_norm: None,
                content_label: None,
                split: Split::Train,
                style_scalar: None,
            })
            .collect();
        let normalized = normalize_ratings(records, Split::Train).unwrap();
        let mut saw_zero = false;
        let mut saw_one = false;
        for r in &normalized {
            let t = r.rating_norm.unwrap();
            prop_assert!((0.0..=1.0).contains(&t));
            saw_zero |= t == 0.0;
            saw_one |= t == 1.0;
        }
        prop_assert!(saw_zero && saw_one, "min-max endpoints must be hit");
    }

    #[test]
    fn binned_means_partition_the_labeled_records(
        styles in prop::collection::vec(0.0f64..1.0, 5..40),
        n_bins in 1usize..8,
    ) {
        prop_assume!(is_non_constant(&styles));
        let records: Vec<DrawingRecord> = styles
            .iter()
            .enumerate()
            .map(|(i, &t)| DrawingRecord {
                id: format!("r{i:03}"),
                image_path: format!("r{i:03}.png"),
                rating_raw: 1.0 + 4.0 * t,
                rating_norm: Some(t),
                content_label: Some(ContentLabel::ALL[i % 5]),
                split: Split::Train,
                style_scalar: Some(t),
            })
            .collect();
        let cells = binned_rating_means(&records, n_bins).unwrap();
        prop_assert_eq!(cells.len(), n_bins * 5);
        let total: usize = cells.iter().map(|c| c.n).sum();
        prop_assert_eq!(total, records.len());
    }

    #[test]
    fn expected_score_hits_exact_vertices(level in 0usize..5) {
        let mut probs = Array1::zeros(5);
        probs[level] = 1.0;
        let q = expected_score(&probs);
        prop_assert_eq!(q, (level as f64 + 1.0) / 5.0);
    }
}

#[test]
fn uniform_probabilities_score_exactly_point_six() {
    let probs = Array1::from_elem(5, 0.2);
    assert_eq!(expected_score(&probs), 0.6);
}
