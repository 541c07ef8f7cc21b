use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mptt_core::data::{segment, SegmentationConfig, TimeSeriesEntity};
use mptt_core::evalmetrics::{ecdf, ecdf_at, r_squared, rmse};
use mptt_core::inference::{reconstruct, InferenceStrategy, PredictionSet};
use mptt_core::kernel::Matrix;
use mptt_core::strategies::random_partition;

fn series(values: Vec<f64>) -> TimeSeriesEntity {
    let n = values.len();
    TimeSeriesEntity {
        entity_id: Arc::from("p"),
        offset: 0,
        inputs: Matrix::from_vec(n, 1, values.iter().map(|v| v * 0.5).collect()).unwrap(),
        responses: Matrix::from_vec(n, 1, values).unwrap(),
        day_of_year: (0..n).map(|t| (t % 365) as u16 + 1).collect(),
        static_attrs: None,
        driver_names: vec!["x".into()],
        response_names: vec!["y".into()],
    }
}

proptest! {
    #[test]
    fn reconstruct_inverts_segment(
        window in 2usize..20,
        stride_frac in 0.0f64..1.0,
        extra in 0usize..50,
        seed in any::<u64>(),
    ) {
        let stride = 1 + ((window - 1) as f64 * stride_frac) as usize;
        let n = window + 1 + extra;
        let values: Vec<f64> = (0..n).map(|t| ((t as u64 ^ seed) % 97) as f64).collect();
        let e = series(values);
        let seqs = segment(&e, &SegmentationConfig::new(window, stride).unwrap(), 0).unwrap();
        let set = PredictionSet::from_targets(InferenceStrategy::Iif, &seqs);
        let rec = reconstruct(&set, window, window - stride).unwrap();
        let covered = window + (seqs.len() - 1) * stride;
        prop_assert_eq!(rec.len(), 1);
        prop_assert_eq!(&rec[0].values, &e.responses.slice_rows(1, 1 + covered));
        // Only the tail shorter than one stride is left out.
        prop_assert!(n - 1 - covered < stride);
    }

    #[test]
    fn rmse_invariances(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40),
        scale in 0.01f64..100.0,
        rot in 0usize..40,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        prop_assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let base = rmse(&p, &t).unwrap();
        let mut pr = p.clone();
        let mut tr = t.clone();
        let k = rot % p.len();
        pr.rotate_left(k);
        tr.rotate_left(k);
        prop_assert!((rmse(&pr, &tr).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
        let ps: Vec<f64> = p.iter().zip(&t).map(|(a, b)| b + scale * (a - b)).collect();
        prop_assert!((rmse(&ps, &t).unwrap() - scale * base).abs() <= 1e-9 * (scale * base).max(1.0));
    }

    #[test]
    fn r_squared_is_shift_invariant(
        pairs in prop::collection::vec((-100f64..100.0, -100f64..100.0), 3..40),
        shift in -1e3f64..1e3,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        prop_assume!(t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 1e-3);
        let base = r_squared(&p, &t).unwrap();
        prop_assert!(base <= 1.0);
        let p2: Vec<f64> = p.iter().map(|v| v + shift).collect();
        let t2: Vec<f64> = t.iter().map(|v| v + shift).collect();
        let moved = r_squared(&p2, &t2).unwrap();
        prop_assert!((moved - base).abs() <= 1e-6 * base.abs().max(1.0));
    }

    #[test]
    fn ecdf_is_a_valid_distribution(values in prop::collection::vec(-50i32..50, 1..60)) {
        let v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        let steps = ecdf(&v).unwrap();
        let mut last = 0.0;
        for w in steps.windows(2) {
            prop_assert!(w[0].0 < w[1].0);
        }
        for &(x, f) in &steps {
            prop_assert!(f > last && f <= 1.0);
            let brute = v.iter().filter(|&&u| u <= x).count() as f64 / v.len() as f64;
            prop_assert_eq!(f, brute);
            prop_assert_eq!(ecdf_at(&steps, x), brute);
            last = f;
        }
        prop_assert_eq!(last, 1.0);
        prop_assert_eq!(ecdf_at(&steps, steps[0].0 - 1.0), 0.0);
    }

    #[test]
    fn partition_covers_each_index_once(count in 1usize..300, batch in 1usize..70, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = random_partition(count, batch, &mut rng);
        let mut seen = BTreeSet::new();
        for (i, p) in parts.iter().enumerate() {
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
            if i + 1 < parts.len() {
                prop_assert_eq!(p.len(), batch);
            } else {
                prop_assert!(!p.is_empty() && p.len() <= batch);
            }
            for &j in p {
                prop_assert!(seen.insert(j));
            }
        }
        prop_assert_eq!(seen.len(), count);
    }
}
