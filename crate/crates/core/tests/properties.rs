mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spp_core::criteria::{allocate_ratios_for_flops, fp_oneshot_prune, layer_ranks, pca_sensitivity, rank_ascending};
use spp_core::harness::checkpoint::{Checkpoint, Value};
use spp_core::metrics::{parse_metrics, write_metrics, MetricRecord, Phase};
use spp_core::nn::Layer;
use spp_core::spp::groups::{layer_groups, pruned_count};
use spp_core::spp::{recovery_ratio, sample_masks, target_count, update_probabilities, LayerSchedule, RecoveryRecord, ScheduleParams};

use common::{delta_oracle, net};

fn schedule() -> impl Strategy<Value = (f64, usize, f64, f64)> {
    (0.01f64..0.99, 2usize..3000, 0.01f64..0.99, 0.001f64..1.0)
        .prop_filter("target rounds to zero", |(r, n, _, _)| target_count(*r, *n) > 0)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn delta_is_monotone_symmetric_and_crosses_zero_at_target((ratio, n, u, a) in schedule(), d in 0.0f64..1.0) {
        let s = LayerSchedule::new(ratio, n, &ScheduleParams { max_increment: a, flatness: u, interval: 1 }).unwrap();
        let rnc = ratio * n as f64;
        prop_assert!(s.delta(rnc).abs() <= 1e-12);
        let d = d * s.center;
        prop_assert!((s.delta(s.center + d) + s.delta(s.center - d) - 2.0 * u * a).abs() <= 1e-12);
        for r in 0..n {
            let v = s.delta(r as f64);
            if r + 1 < n {
                prop_assert!(v > s.delta(r as f64 + 1.0));
            }
            if (r as f64) < rnc - 1e-9 {
                prop_assert!(v > 0.0);
            } else if (r as f64) > rnc + 1e-9 {
                prop_assert!(v < 0.0);
            }
            let o = delta_oracle(r as f64, ratio, n, a, u);
            prop_assert!((v - o).abs() <= 1e-12 * o.abs().max(1.0), "r {} impl {} oracle {}", r, v, o);
        }
    }

    #[test]
    fn probabilities_stay_bounded_and_pruning_is_absorbing(
        (n, ratio) in (4usize..60, 0.1f64..0.9),
        seeds in prop::collection::vec(any::<u64>(), 1..80),
    ) {
        let s = LayerSchedule::new(ratio, n, &ScheduleParams::default()).unwrap();
        let mut groups = layer_groups(0, n);
        let mut pruned_before = vec![false; n];
        for seed in seeds {
            let mut ranks: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            update_probabilities(&mut groups, &ranks, &s).unwrap();
            for (g, was) in groups.iter().zip(&mut pruned_before) {
                prop_assert!((0.0..=1.0).contains(&g.p));
                prop_assert_eq!(g.permanently_pruned, g.p == 1.0);
                prop_assert!(!*was || g.permanently_pruned);
                *was = g.permanently_pruned;
            }
            prop_assert!(pruned_count(&groups) <= s.target);
            sample_masks(&mut groups, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            prop_assert!(groups.iter().all(|g| !g.permanently_pruned || !g.mask));
        }
    }

    #[test]
    fn mask_frequency_matches_probability(p in 0.02f64..0.98, seed in any::<u64>()) {
        let mut groups = layer_groups(0, 1);
        groups[0].p = p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = 10_000;
        let masked = (0..draws).filter(|_| {
            sample_masks(&mut groups, &mut rng);
            !groups[0].mask
        }).count();
        let freq = masked as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        prop_assert!((freq - p).abs() <= 4.5 * sigma, "freq {} p {}", freq, p);
    }

    #[test]
    fn ranks_are_invariant_under_positive_scaling(seed in any::<u64>(), exp in -20i32..20, c in 0.1f64..10.0) {
        let model = net("conv(6,3,1,1) relu conv(4,3,1,1) fc(2)", [3, 4, 4], seed);
        let before = layer_ranks(&model);
        for ranks in &before {
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..ranks.len()).collect::<Vec<_>>());
        }
        for scale in [2f64.powi(exp), c] {
            let mut scaled = model.clone();
            for layer in scaled.layers_mut() {
                if let Layer::Conv(conv) = layer {
                    conv.update_params(|w, _, _| w.iter_mut().for_each(|v| *v *= scale));
                }
            }
            prop_assert_eq!(layer_ranks(&scaled), before.clone());
        }
    }

    #[test]
    fn rank_ascending_is_a_stable_sort(norms in prop::collection::vec(0u8..6, 1..200)) {
        let norms: Vec<f64> = norms.into_iter().map(f64::from).collect();
        let ranks = rank_ascending(&norms);
        let mut order: Vec<usize> = (0..norms.len()).collect();
        order.sort_by(|&i, &j| norms[i].total_cmp(&norms[j]).then(i.cmp(&j)));
        for (r, &j) in order.iter().enumerate() {
            prop_assert_eq!(ranks[j], r);
        }
    }

    #[test]
    fn allocation_reproduces_target_flops(
        layers in prop::collection::vec((0.2f64..5.0, 1e3f64..1e9), 1..8),
        target in 1.05f64..50.0,
    ) {
        let proportions: Vec<Option<f64>> = layers.iter().map(|l| Some(l.0)).collect();
        let flops: Vec<f64> = layers.iter().map(|l| l.1).collect();
        let plan = allocate_ratios_for_flops(&proportions, &flops, target).unwrap();
        let dense: f64 = flops.iter().sum();
        let pruned: f64 = flops.iter().zip(&plan.remaining).map(|(f, r)| f * r).sum();
        prop_assert!(((dense / pruned) / target - 1.0).abs() <= 1e-3);
        for (r, ratio) in plan.remaining.iter().zip(plan.pruning_ratios()) {
            prop_assert!((0.01..=1.0).contains(r));
            prop_assert!((0.0..1.0).contains(&ratio));
        }
    }

    #[test]
    fn one_shot_prunes_exact_counts(seed in any::<u64>(), ratios in prop::collection::vec(0.0f64..0.95, 2)) {
        let mut model = net("conv(5,3,1,1) relu conv(4,3,1,1) fc(2)", [3, 4, 4], seed);
        let ranks = layer_ranks(&model);
        let pruned = fp_oneshot_prune(&mut model, &ratios).unwrap();
        for ((cols, r), (mask, ratio)) in pruned.iter().zip(&ranks).zip(model.conv_masks().iter().zip(&ratios)) {
            let target = target_count(*ratio, r.len());
            prop_assert_eq!(cols.len(), target);
            prop_assert_eq!(mask.iter().filter(|&&k| !k).count(), target);
            prop_assert!(cols.iter().all(|&j| r[j] < target));
        }
    }

    #[test]
    fn pca_curves_are_non_increasing(rows in 2usize..12, cols in 1usize..15, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let c = pca_sensitivity(0, &m, rows, cols, &grid).unwrap();
        prop_assert!(c.normalized_error.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(c.normalized_error.iter().all(|e| (0.0..=1.0).contains(e)));
        prop_assert!(*c.normalized_error.last().unwrap() < 1e-10);
    }

    #[test]
    fn recovery_is_a_bounded_subset(
        (initial, last) in (4usize..80).prop_flat_map(|n| (permutation(n), permutation(n))),
        ratio in 0.1f64..0.9,
    ) {
        let r = RecoveryRecord::new(0, &initial, &last, ratio).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.recovery_ratio));
        prop_assert!(r.final_above.is_subset(&r.initial_below));
        prop_assert_eq!(r.recovery_ratio, recovery_ratio(&initial, &last, ratio).unwrap());
        prop_assert_eq!(recovery_ratio(&initial, &initial, ratio).unwrap(), 0.0);
    }

    #[test]
    fn checkpoints_round_trip_byte_identically(
        arrays in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(any::<f64>(), 0..20), 0..6),
        ints in prop::collection::btree_map("[A-Z]{1,6}", prop::collection::vec(any::<u64>(), 0..5), 0..4),
        text in "\\PC{0,40}",
    ) {
        let mut ck = Checkpoint::new();
        for (k, v) in arrays {
            ck.put(k, Value::F64 { shape: vec![v.len()], data: v });
        }
        for (k, v) in ints {
            ck.put_u64s(k, v);
        }
        ck.put_text("_text", text);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec(
        (any::<u32>(), 0u8..3, prop::option::of(-1e6f64..1e6), prop::option::of(0.0f64..=1.0), 0usize..5, 0.0f64..=1.0, 0.0f64..=1.0), 0..30)
    ) {
        let records: Vec<MetricRecord> = rows.into_iter().map(|(i, ph, loss, acc, l, f, p)| MetricRecord {
            iteration: i as usize,
            phase: [Phase::Train, Phase::Prune, Phase::Retrain][ph as usize],
            loss,
            val_acc: acc,
            layer_id: l,
            pruned_fraction: f,
            mean_p: p,
        }).collect();
        let mut buf = Vec::new();
        write_metrics(&records, &mut buf).unwrap();
        prop_assert_eq!(parse_metrics(buf.as_slice()).unwrap(), records);
    }
}
