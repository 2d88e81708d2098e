use fibro_core::evaluate::{auroc, soft_vote, PredictionSet};
use fibro_core::numerics::{cosine_lr, instance_norm, layer_norm, positional_encoding, softmax, ScheduleConfig};
use fibro_core::preprocess::{pad_crop_center, percentile};
use fibro_core::training::{stratified_kfold, EarlyStopping};
use fibro_core::{Grid, Tensor};
use proptest::prelude::*;

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(logits in prop::collection::vec(finite(50.0), 1..12), shift in finite(100.0)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..6, cols in 2usize..10, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64 * 7919) % 1000) as f64 / 37.0).sin() * 5.0 + i as f64 % 3.0).collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let y = layer_norm(&x, &Tensor::new(vec![cols], vec![1.0; cols]).unwrap(), &Tensor::zeros(&[cols])).unwrap();
        for r in y.data().chunks(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1.0 + 1e-9);
        }
    }

    #[test]
    fn instance_norm_channels_have_zero_mean(channels in 1usize..4, n in 2usize..30, scale in 0.1f64..100.0) {
        let data: Vec<f64> = (0..channels * n).map(|i| ((i * 31 % 17) as f64 - 8.0) * scale).collect();
        let y = instance_norm(&Tensor::new(vec![channels, n, 1, 1], data).unwrap());
        for ch in y.data().chunks(n) {
            prop_assert!((ch.iter().sum::<f64>() / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn positional_encoding_is_bounded(n in 1usize..64, half in 1usize..32) {
        let pe = positional_encoding(n, 2 * half).unwrap();
        prop_assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        // row 0: sin(0) = 0 on even columns, cos(0) = 1 on odd ones
        for (j, &v) in pe.data()[..2 * half].iter().enumerate() {
            prop_assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn cosine_schedule_decreases_within_bounds(lr_max in 1e-6f64..1.0, frac in 0.0f64..1.0, total in 1usize..300) {
        let cfg = ScheduleConfig { lr_max, lr_min: lr_max * frac, total_epochs: total };
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let lr = cosine_lr(e, &cfg).unwrap();
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= cfg.lr_min - 1e-15 && lr <= lr_max + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn auroc_is_bounded_and_flips_with_labels(pairs in prop::collection::vec((0u8..8, any::<bool>()), 2..30)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&negated, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn kfold_partitions_every_index(labels in prop::collection::vec(0usize..3, 8..80), k in 2usize..6, seed in any::<u64>()) {
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = vec![0usize; labels.len()];
        for f in 0..k {
            let val = plan.val_indices(f);
            let train = plan.train_indices(f);
            prop_assert_eq!(val.len() + train.len(), labels.len());
            for i in val {
                seen[i] += 1;
                prop_assert!(!train.contains(&i));
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(plan, stratified_kfold(&labels, k, seed).unwrap());
    }

    #[test]
    fn soft_vote_ignores_model_order(n in 1usize..8, models in 2usize..6, seed in any::<u64>()) {
        let sets: Vec<PredictionSet> = (0..models)
            .map(|m| {
                let probs = (0..n)
                    .map(|i| {
                        let a = ((seed ^ (m * 131 + i * 17) as u64) % 97) as f64 / 97.0;
                        vec![a, 1.0 - a]
                    })
                    .collect();
                PredictionSet { model_id: format!("m{m}"), case_ids: (0..n).map(|i| format!("c{i}")).collect(), probs, labels: None }
            })
            .collect();
        let forward = soft_vote(&sets).unwrap();
        let mut rev = sets.clone();
        rev.reverse();
        prop_assert_eq!(forward.probs, soft_vote(&rev).unwrap().probs);
    }

    #[test]
    fn early_stopping_best_is_a_running_minimum(losses in prop::collection::vec(0.0f64..5.0, 1..60), patience in 1usize..10) {
        let mut s = EarlyStopping::new(patience);
        for (e, &l) in losses.iter().enumerate() {
            s.update(e, l);
            let (be, bl) = s.best.unwrap();
            prop_assert!(losses[..=e].iter().all(|&x| bl <= x));
            prop_assert!(losses[..be].iter().all(|&x| x > bl));
            if s.should_stop() {
                prop_assert_eq!(e - be, patience);
                break;
            }
        }
    }

    #[test]
    fn percentile_lies_between_order_statistics(mut v in prop::collection::vec(finite(1e3), 1..100), p in 0.0f64..100.0) {
        let q = percentile(&mut v.clone(), p);
        v.sort_by(f64::total_cmp);
        prop_assert!(q >= v[0] && q <= v[v.len() - 1]);
        prop_assert_eq!(percentile(&mut v.clone(), 0.0), v[0]);
        prop_assert_eq!(percentile(&mut v.clone(), 100.0), v[v.len() - 1]);
    }

    #[test]
    fn pad_crop_reaches_target_and_round_trips(src in prop::array::uniform3(1usize..12), target in prop::array::uniform3(1usize..12)) {
        let g = Grid::from_fn(src, |x, y, z| (x + 100 * y + 10_000 * z) as f32 + 1.0);
        let out = pad_crop_center(&g, target);
        prop_assert_eq!(out.extents, target);
        if (0..3).all(|i| target[i] >= src[i]) {
            prop_assert_eq!(pad_crop_center(&out, src), g);
        }
    }
}
