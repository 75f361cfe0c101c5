use std::collections::{HashSet, VecDeque};

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semscale::applications::{collection_stop, long_tail_counts, pizza_select};
use semscale::feature_pool::StoragePool;
use semscale::geometry::{
    effective_sample_number, feature_volume, feature_volume_with, EffectiveNumberParams,
    VolumeForm, VolumeParams,
};
use semscale::imbalance::combined_scale;
use semscale::reweight::dsb_weights;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(rand_distr::StandardNormal))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian(rng, d, d).qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_forms_agree(seed in any::<u64>(), m in 2usize..33, eps in 0.5f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, 64, m);
        let p = VolumeParams::new(eps).unwrap();
        let a = feature_volume_with(&z, &p, VolumeForm::FeatureSpace).unwrap();
        let b = feature_volume_with(&z, &p, VolumeForm::SampleSpace).unwrap();
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn rotation_and_permutation_invariance(seed in any::<u64>(), d in 2usize..10, m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, d, m);
        let p = VolumeParams::default();
        let base = feature_volume(&z, &p).unwrap();
        let q = random_orthogonal(&mut rng, d);
        prop_assert!((feature_volume(&(&q * &z), &p).unwrap() - base).abs() < 1e-8);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        prop_assert_eq!(feature_volume(&z.select_columns(&order), &p).unwrap(), base);
    }

    #[test]
    fn volume_is_nonnegative_and_translation_free(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, 5, 20);
        let p = VolumeParams::default();
        let v = feature_volume(&z, &p).unwrap();
        prop_assert!(v >= 0.0);
        let moved = z.map(|x| x + shift);
        prop_assert!((feature_volume(&moved, &p).unwrap() - v).abs() < 1e-8);
    }

    #[test]
    fn dsb_weights_invert_scales(scales in prop::collection::vec(1e-3f64..1e3, 2..12)) {
        let w = dsb_weights(&scales).unwrap();
        prop_assert!((w.per_class.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..scales.len() {
            for j in 0..scales.len() {
                if scales[i] < scales[j] {
                    prop_assert!(w.per_class[i] >= w.per_class[j]);
                }
                // alpha_i * S_i is the same for every class.
                let lhs = w.per_class[i] * scales[i];
                let rhs = w.per_class[j] * scales[j];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(rhs));
            }
        }
    }

    #[test]
    fn combined_scale_is_bounded(
        raw in prop::collection::vec(0.0f64..100.0, 3),
        w in prop::collection::vec(0.0f64..10.0, 3),
        alpha in 1.0f64..4.0,
    ) {
        let c = combined_scale(&raw, &w, alpha).unwrap();
        for (i, s) in c.combined.iter().enumerate() {
            prop_assert!(*s > 0.0 && s.is_finite());
            prop_assert!(c.raw_normalized[i] <= 1.0 + 1e-12);
            prop_assert!(c.smoothed[i] <= (alpha + 1.0).log2() + 1e-12);
        }
    }

    #[test]
    fn effective_number_is_bounded_and_monotone(n in 1u64..10_000) {
        let mut last = 0.0;
        for k in 0..1000 {
            let beta = k as f64 / 1000.0;
            let e = effective_sample_number(n, &EffectiveNumberParams::new(beta).unwrap()).unwrap();
            prop_assert!((1.0..=n as f64).contains(&e));
            prop_assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn long_tail_is_non_increasing(m in 2usize..50, n in 1usize..10_000, mu in 1.0f64..500.0) {
        let c = long_tail_counts(m, n, mu).unwrap();
        prop_assert_eq!(c[0], n);
        prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(c.iter().all(|&k| k >= 1));
    }

    #[test]
    fn collection_stop_is_monotone_in_threshold(
        hist in prop::collection::vec(0.1f64..100.0, 2..20),
        lo in 0.1f64..50.0,
        extra in 0.0f64..50.0,
    ) {
        let a = collection_stop(&hist, lo).unwrap().stop_index.unwrap_or(usize::MAX);
        let b = collection_stop(&hist, lo + extra).unwrap().stop_index.unwrap_or(usize::MAX);
        prop_assert!(b <= a);
    }

    #[test]
    fn pizza_returns_distinct_input_indices(seed in any::<u64>(), n in 2usize..40, trials in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, 3, n);
        let budget = rng.random_range(1..=n);
        let s = pizza_select(&x, budget, trials, &VolumeParams::default(), seed).unwrap();
        prop_assert_eq!(s.indices.len(), budget);
        prop_assert_eq!(s.indices.iter().collect::<HashSet<_>>().len(), budget);
        prop_assert!(s.indices.iter().all(|&i| i < n));
        prop_assert!(s.trial < trials);
    }
}

/// Reference model of the pool: a plain queue of `(feature, label)` rows plus
/// a queue of batch sizes.
#[derive(Default)]
struct ReferenceQueue {
    rows: VecDeque<(Vec<f64>, usize)>,
    batches: VecDeque<usize>,
}

#[test]
fn pool_matches_reference_queue() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dim = 3;
    for schedule in 0..1000 {
        let capacity = rng.random_range(1..60);
        let mut pool = StoragePool::new(capacity, dim).unwrap();
        let mut reference = ReferenceQueue::default();
        let mut counter = 0.0;
        for _ in 0..rng.random_range(1..40) {
            if rng.random_bool(0.6) {
                let b = rng.random_range(1..=capacity.min(12));
                let feats = DMatrix::from_fn(dim, b, |r, c| counter + (c * dim + r) as f64);
                counter += (b * dim) as f64;
                let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
                let fits = reference.rows.len() + b <= capacity;
                assert_eq!(
                    pool.push_batch(&feats, &labels).is_ok(),
                    fits,
                    "schedule {schedule}"
                );
                if fits {
                    for (c, &l) in labels.iter().enumerate() {
                        reference
                            .rows
                            .push_back((feats.column(c).iter().copied().collect(), l));
                    }
                    reference.batches.push_back(b);
                }
            } else if rng.random_bool(0.5) {
                let popped = pool.pop_oldest_batch();
                match reference.batches.pop_front() {
                    Some(b) => {
                        assert_eq!(popped.unwrap(), b);
                        reference.rows.drain(..b);
                    }
                    None => assert!(popped.is_err()),
                }
            } else {
                let k = rng.random_range(0..=reference.rows.len() + 1);
                let ok = pool.pop_oldest(k).is_ok();
                assert_eq!(ok, k <= reference.rows.len());
                if ok {
                    reference.rows.drain(..k);
                    let mut left = k;
                    while left > 0 {
                        let front = reference.batches.front_mut().unwrap();
                        if *front <= left {
                            left -= *front;
                            reference.batches.pop_front();
                        } else {
                            *front -= left;
                            left = 0;
                        }
                    }
                }
            }
            let got: Vec<(Vec<f64>, usize)> =
                pool.rows().map(|r| (r.feature.clone(), r.label)).collect();
            let want: Vec<(Vec<f64>, usize)> = reference.rows.iter().cloned().collect();
            assert_eq!(got, want, "schedule {schedule}");
            assert_eq!(
                pool.batch_sizes().copied().collect::<Vec<_>>(),
                reference.batches.iter().copied().collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn ragged_final_batch_cycles_whole() {
    // N = 10, b = 4: batches 4, 4, 2 cycle through a full pool.
    let mut pool = StoragePool::new(10, 2).unwrap();
    let sizes = [4, 4, 2];
    for &b in &sizes {
        pool.push_batch(&DMatrix::zeros(2, b), &vec![0; b]).unwrap();
    }
    for epoch in 0..3 {
        for &b in &sizes {
            assert_eq!(pool.pop_oldest_batch().unwrap(), b, "epoch {epoch}");
            pool.push_batch(&DMatrix::from_element(2, b, epoch as f64), &vec![1; b])
                .unwrap();
            assert_eq!(pool.len(), 10);
        }
    }
}
