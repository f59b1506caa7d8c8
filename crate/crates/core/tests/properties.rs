use proptest::prelude::*;
use velc_core::data::{scale_and_split, Scaler};
use velc_core::scoring::{classify, normalize_scores};
use velc_core::{Dataset, SplitSpec};

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6, 3usize..40).prop_flat_map(|(len, n)| {
        (
            prop::collection::vec(prop::collection::vec(-1e6f64..1e6, len), n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
        )
            .prop_map(|(series, flags)| {
                let mut labels: Vec<u8> = flags.into_iter().map(u8::from).collect();
                labels[0] = 0;
                labels[1] = 0;
                Dataset::new("prop", series, labels).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn normalize_preserves_order(scores in prop::collection::vec(-1e9f64..1e9, 1..200)) {
        let n = normalize_scores(&scores).unwrap();
        for i in 0..scores.len() {
            prop_assert!((0.0..=1.0).contains(&n[i]));
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(n[i] <= n[j]);
                }
                if scores[i] == scores[j] {
                    prop_assert_eq!(n[i], n[j]);
                }
            }
        }
    }

    #[test]
    fn classify_is_monotone_in_phi(scores in prop::collection::vec(0f64..1.0, 1..50), a in 0f64..1.0, b in 0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let fl = classify(&scores, lo);
        let fh = classify(&scores, hi);
        for (x, y) in fl.iter().zip(&fh) {
            prop_assert!(*x || !*y);
        }
    }

    #[test]
    fn split_partitions_rows(d in dataset(), seed in any::<u64>(), frac in 0.05f64..0.95) {
        let s = scale_and_split(&d, &SplitSpec { test_fraction: frac, seed }).unwrap();
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.test_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        prop_assert_eq!(s.train.n_anomalous(), 0);
        prop_assert_eq!(s.test.n_anomalous(), d.n_anomalous());
        prop_assert!(!s.train.is_empty());
        prop_assert!(s.test.n_normal() >= 1);
        for row in &s.train.series {
            for &v in row {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
        let again = scale_and_split(&d, &SplitSpec { test_fraction: frac, seed }).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn scaler_maps_train_range_to_unit(d in dataset()) {
        let sc = Scaler::fit(&d.series).unwrap();
        for t in 0..d.length() {
            let col: Vec<f64> = d.series.iter().map(|r| sc.transform(r)[t]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(lo, 0.0);
            prop_assert!(hi == 1.0 || hi == 0.0);
        }
    }

    #[test]
    fn dataset_text_round_trip(d in dataset(), bits in prop::collection::vec(any::<u64>(), 1..8)) {
        let mut d = d;
        // Arbitrary finite bit patterns, including subnormals.
        for (slot, b) in d.series[0].iter_mut().zip(&bits) {
            let v = f64::from_bits(*b);
            if v.is_finite() {
                *slot = v;
            }
        }
        let back = Dataset::parse(&d.to_text(), "mem").unwrap();
        for (a, b) in back.series.iter().flatten().zip(d.series.iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.labels, d.labels);
    }
}
