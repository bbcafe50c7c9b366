//! Property tests of the metric, loss, masking and data invariants.

use dynprompt::data::{rle_decode, rle_encode, Mask};
use dynprompt::metrics::{average_recall, check_partitions, iou, EvalRecord, Subset};
use dynprompt::train::batch_indices;
use dynprompt_autodiff::{Graph, Tensor};
use proptest::prelude::*;

fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec((0.0f64..=1.0, any::<bool>(), any::<bool>()), 0..40).prop_map(|v| {
        v.into_iter().enumerate().map(|(i, (iou, thing, plural))| EvalRecord::new(i, 0, iou, thing, plural).unwrap()).collect()
    })
}

proptest! {
    #[test]
    fn ar_is_a_fraction_and_recall_is_monotone(rs in records()) {
        prop_assert!(check_partitions(&rs).is_ok());
        for s in Subset::ALL {
            if let dynprompt::metrics::SubsetAr::Curve(c) = average_recall(&rs, s) {
                prop_assert!((0.0..=1.0).contains(&c.average_recall));
                prop_assert!(c.recalls.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn raising_an_iou_never_lowers_ar(rs in records(), idx in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        prop_assume!(!rs.is_empty());
        let i = idx.index(rs.len());
        let before = average_recall(&rs, Subset::Overall).ar().unwrap();
        let mut up = rs.clone();
        up[i].iou = (up[i].iou + bump).min(1.0);
        prop_assert!(average_recall(&up, Subset::Overall).ar().unwrap() >= before);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 1..80), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let (ab, ba) = (iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn masked_softmax_rows(rows in 1usize..5, cols in 1usize..20, seed in any::<u64>()) {
        let logits: Vec<f64> = (0..rows * cols).map(|i| (((seed.wrapping_mul(i as u64 + 1)) % 1000) as f64 - 500.0) / 25.0).collect();
        let keep: Vec<bool> = (0..rows * cols).map(|i| (seed >> (i % 61)) & 1 == 1).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64([rows, cols], &logits).unwrap());
        let y = g.masked_softmax(x, &keep).unwrap();
        for (r, row) in g.value(y).data().chunks(cols).enumerate() {
            let k = &keep[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            if k.iter().any(|&b| b) {
                prop_assert!(k.iter().zip(row).all(|(&b, &v)| b || v == 0.0));
            }
        }
    }

    #[test]
    fn dice_and_bce_are_bounded_below(x in prop::collection::vec(-50.0f64..50.0, 1..30), bits in any::<u64>()) {
        let t: Vec<f64> = (0..x.len()).map(|i| ((bits >> (i % 64)) & 1) as f64).collect();
        let n = x.len();
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(Tensor::from_f64([n, 1], &x).unwrap());
        let target = Tensor::from_f64([n, 1], &t).unwrap();
        let d = g.dice_cols(xv, &target, 1.0).unwrap();
        let b = g.bce_logits_cols(xv, &target).unwrap();
        let (d, b) = (g.value(d).data()[0], g.value(b).data()[0]);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(b >= 0.0 && b.is_finite());
    }

    #[test]
    fn rle_round_trips(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let bits: Vec<bool> = (0..h * w).map(|i| (seed.rotate_left(i as u32 % 64) & 3) == 0).collect();
        let m = Mask { height: h, width: w, bits };
        prop_assert_eq!(rle_decode(&rle_encode(&m), h, w).unwrap(), m);
    }

    #[test]
    fn every_epoch_visits_each_sample_once(seed in any::<u64>(), len in 1usize..30, batch in 1usize..6) {
        let steps = len * 2;
        let seen: Vec<usize> = (0..steps).flat_map(|s| batch_indices(seed, len, batch, s)).collect();
        for epoch in seen.chunks_exact(len) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            prop_assert_eq!(e, (0..len).collect::<Vec<_>>());
        }
    }
}
