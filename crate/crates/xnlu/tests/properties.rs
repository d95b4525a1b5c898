//! Property-based invariants for the tagging, evaluation, and weighting
//! machinery.

use proptest::prelude::*;

use xnlu::eval;
use xnlu::tagging;
use xnlu::weighting::CoVState;

/// BIO sequences with no adjacent same-type boundary (the only ambiguous
/// case under IO conversion).
fn unambiguous_bio() -> impl Strategy<Value = Vec<String>> {
    let types = prop::sample::select(vec!["loc", "per", "org"]);
    prop::collection::vec((types, 1usize..4, prop::bool::ANY), 0..8).prop_map(|segments| {
        let mut tags = Vec::new();
        let mut prev: Option<String> = None;
        for (t, len, gap) in segments {
            if gap || prev.as_deref() == Some(t) {
                tags.push("O".to_string());
                prev = None;
            }
            if prev.as_deref() == Some(t) {
                continue;
            }
            tags.push(format!("B-{t}"));
            for _ in 1..len {
                tags.push(format!("I-{t}"));
            }
            prev = Some(t.to_string());
        }
        tags
    })
}

fn arbitrary_io() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["O", "I-loc", "I-per", "I-org"]),
        0..16,
    )
    .prop_map(|v| v.into_iter().map(|s| s.to_string()).collect())
}

proptest! {
    #[test]
    fn io_round_trip_is_identity(bio in unambiguous_bio()) {
        let io = tagging::bio_to_io(&bio).unwrap();
        prop_assert!(io.iter().all(|t| !t.starts_with("B-")));
        let restored = tagging::restore_b_tags(&io).unwrap();
        prop_assert_eq!(restored, bio);
    }

    #[test]
    fn restoration_output_is_always_valid_bio(io in arbitrary_io()) {
        let restored = tagging::restore_b_tags(&io).unwrap();
        prop_assert!(tagging::validate_bio(&restored).unwrap().is_empty());
        // restoration preserves the type at every position
        for (a, b) in io.iter().zip(&restored) {
            prop_assert_eq!(a.split('-').nth(1), b.split('-').nth(1));
        }
    }

    #[test]
    fn span_extraction_and_counts_are_consistent(bio in unambiguous_bio()) {
        // a sequence compared against itself is all true positives
        let spans = tagging::extract_spans(&bio).unwrap();
        let io = tagging::bio_to_io(&bio).unwrap();
        let (tp, fp, fn_) = eval::entity_counts(&[io], &[bio]).unwrap();
        prop_assert_eq!(tp, spans.len());
        prop_assert_eq!((fp, fn_), (0, 0));
    }

    #[test]
    fn z_test_is_antisymmetric(k1 in 0usize..50, n1 in 50usize..100, k2 in 0usize..50, n2 in 50usize..100) {
        let a = eval::z_test_proportions(k1, n1, k2, n2).unwrap();
        let b = eval::z_test_proportions(k2, n2, k1, n1).unwrap();
        prop_assert!((a.z + b.z).abs() < 1e-12);
        prop_assert!((a.p_two_tailed - b.p_two_tailed).abs() < 1e-12);
        if a.significant_at["0.01"] {
            prop_assert!(a.significant_at["0.05"]);
        }
    }

    #[test]
    fn overall_is_between_accuracy_and_f(acc in 0.0f64..100.0, f1 in 0.0f64..100.0) {
        let overall = eval::overall_score(acc, f1).unwrap();
        prop_assert!(overall >= acc.min(f1) - 1e-12);
        prop_assert!(overall <= acc.max(f1) + 1e-12);
    }

    #[test]
    fn cov_weights_are_scale_invariant(trace in prop::collection::vec(0.01f64..10.0, 2..20), scale in 0.1f64..100.0) {
        let mut a = CoVState::new();
        let mut b = CoVState::new();
        let mut last_a = None;
        let mut last_b = None;
        for &v in &trace {
            let wa = a.cov_update(&[("x".to_string(), v)].into_iter().collect());
            let wb = b.cov_update(&[("x".to_string(), v * scale)].into_iter().collect());
            last_a = Some(wa["x"].weight);
            last_b = Some(wb["x"].weight);
        }
        let (wa, wb) = (last_a.unwrap(), last_b.unwrap());
        prop_assert!((wa - wb).abs() < 1e-9, "weights {} vs {}", wa, wb);
    }
}
