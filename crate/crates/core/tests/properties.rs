use lesionseg::backbone::NetworkSpec;
use lesionseg::fusion::softmax_pair;
use lesionseg::inference::tile_origins;
use lesionseg::metrics::{dsc, nsd, nsd_all_pairs};
use lesionseg::model::Model;
use lesionseg::optimization::{poly_lr, OptimizerConfig};
use lesionseg::tensor::Feature;
use lesionseg::volume::{make_split, merge_labels};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_pair() -> impl Strategy<Value = (Array3<u8>, Array3<u8>)> {
    (1usize..=6, 1usize..=6, 1usize..=6, 0.05f64..0.7, any::<u64>()).prop_map(|(z, y, x, p, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Array3::from_shape_fn((z, y, x), |_| u8::from(rng.random_bool(p)));
        (draw(), draw())
    })
}

fn spacing() -> impl Strategy<Value = [f64; 3]> {
    [0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsc_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let d = dsc(&a, &b).unwrap();
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn nsd_is_symmetric_and_matches_brute_force((a, b) in mask_pair(), s in spacing(), tau in 0.0f64..4.0) {
        let n = nsd(&a, &b, s, tau).unwrap();
        prop_assert_eq!(n, nsd(&b, &a, s, tau).unwrap());
        prop_assert_eq!(n, nsd_all_pairs(&a, &b, s, tau).unwrap());
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn nsd_is_monotone_in_tau((a, b) in mask_pair(), s in spacing(), t1 in 0.0f64..4.0, dt in 0.0f64..4.0) {
        prop_assert!(nsd(&a, &b, s, t1).unwrap() <= nsd(&a, &b, s, t1 + dt).unwrap());
    }

    #[test]
    fn nsd_is_invariant_under_joint_power_of_two_scaling(
        (a, b) in mask_pair(), s in spacing(), tau in 0.0f64..4.0, e in -3i32..=3
    ) {
        let c = 2f64.powi(e);
        let scaled = [s[0] * c, s[1] * c, s[2] * c];
        prop_assert_eq!(nsd(&a, &b, s, tau).unwrap(), nsd(&a, &b, scaled, tau * c).unwrap());
    }

    #[test]
    fn poly_lr_is_non_increasing_with_exact_endpoints(epoch_max in 1usize..500, lr0 in 1e-4f64..1.0) {
        let cfg = OptimizerConfig { lr0, epoch_max, ..OptimizerConfig::default() };
        prop_assert_eq!(poly_lr(0, &cfg).unwrap(), lr0);
        prop_assert_eq!(poly_lr(epoch_max, &cfg).unwrap(), 0.0);
        prop_assert!(poly_lr(epoch_max + 1, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for e in 0..=epoch_max {
            let lr = poly_lr(e, &cfg).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn splits_partition_each_fold(n in 4usize..40, k in 2usize..6, seed in any::<u64>(), f in 0.05f64..0.9) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
        let plan = make_split(&ids, k, seed, f).unwrap();
        prop_assert_eq!(&plan, &make_split(&ids, k, seed, f).unwrap());
        prop_assert_eq!(plan.folds.len(), k);
        for fold in &plan.folds {
            prop_assert!(!fold.train.is_empty() && !fold.test.is_empty());
            prop_assert!(fold.train.iter().all(|id| !fold.test.contains(id)));
            prop_assert!(fold.train.len() + fold.test.len() <= n);
        }
        // whichever side is the chunked one is pairwise disjoint and covers the ids
        let train_chunked = plan.folds.iter().map(|f| f.train.len()).sum::<usize>() == n;
        let mut seen: Vec<&String> = plan
            .folds
            .iter()
            .flat_map(|f| if train_chunked { &f.train } else { &f.test })
            .collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn merge_is_idempotent(v in prop::collection::vec(any::<u8>(), 1..64)) {
        let l = Array3::from_shape_vec((1, 1, v.len()), v).unwrap();
        let m = merge_labels(&l);
        prop_assert_eq!(&merge_labels(&m), &m);
        prop_assert!(m.iter().zip(&l).all(|(&mm, &ll)| mm == u8::from(ll > 0)));
    }

    #[test]
    fn selection_weights_sum_to_one(
        la in prop::collection::vec(-1e4f64..1e4, 1..16), seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lb: Vec<f64> = la.iter().map(|_| rng.random_range(-1e4..1e4)).collect();
        let (a, b) = softmax_pair(&la, &lb);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.is_finite() && y.is_finite());
            prop_assert!((x + y - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiles_cover_every_position(len in 1usize..80, size in 1usize..20, overlap in 0.0f64..0.95) {
        let o = tile_origins(len, size, overlap);
        prop_assert_eq!(o[0], 0);
        prop_assert!(o.windows(2).all(|w| w[0] < w[1]));
        for p in 0..len {
            prop_assert!(o.iter().any(|&s| s <= p && p < s + size));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Logit pyramid levels have the patch shape divided by the cumulative
    /// stride of each stage, and full resolution equals the patch shape.
    #[test]
    fn forward_shapes_follow_the_strides(mz in 1usize..3, my in 1usize..3, mx in 1usize..3, hybrid in any::<bool>()) {
        let spec = NetworkSpec {
            channels_per_stage: vec![2, 4, 4],
            strides_per_stage: vec![[1, 1, 1], [1, 2, 2], [2, 2, 2]],
            blocks_per_stage: 1,
            ..NetworkSpec::desk()
        };
        let patch = [2 * mz, 4 * my, 4 * mx];
        spec.check_patch(patch).unwrap();
        let model = if hybrid { Model::hybrid(spec.clone(), 2, 1).unwrap() } else { Model::unet(spec.clone(), 1).unwrap() };
        let x = Feature::zeros(1, patch);
        let (pyr, _) = model.forward(&x).unwrap();
        prop_assert_eq!(pyr.len(), spec.pyramid_len());
        prop_assert_eq!(pyr[0].dims, patch);
        for (level, l) in pyr.iter().enumerate() {
            let s = spec.cumulative_stride(level);
            prop_assert_eq!(l.dims, [patch[0] / s[0], patch[1] / s[1], patch[2] / s[2]]);
            prop_assert_eq!(l.channels, spec.num_classes);
        }
        prop_assert!(spec.check_patch([patch[0] + 1, patch[1], patch[2]]).is_err());
    }
}
