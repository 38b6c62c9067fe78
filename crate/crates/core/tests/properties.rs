use depthadapt::adapt::fuse_labels;
use depthadapt::formats::{
    read_disparity, write_disparity, ConfidenceMap, DisparityFormat, DisparityMap,
};
use depthadapt::losses::support_mask;
use depthadapt::metrics::{mono_metrics, DepthEvalConfig};
use proptest::prelude::*;

fn quantized_map() -> impl Strategy<Value = DisparityMap> {
    (1usize..24, 1usize..16).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop_oneof![1 => Just(-1.0f32), 9 => (1u32..65535).prop_map(|q| q as f32 / 256.0)], w * h)
            .prop_map(move |v| DisparityMap::new(w, h, v).unwrap())
    })
}

fn graded_map() -> impl Strategy<Value = (DisparityMap, ConfidenceMap)> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(prop_oneof![1 => Just(-1.0f32), 9 => 0.0f32..64.0], w * h),
            prop::collection::vec(0.0f32..=1.0, w * h),
        )
            .prop_map(move |(d, c)| {
                (
                    DisparityMap::new(w, h, d).unwrap(),
                    ConfidenceMap::new(w, h, c).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kitti_png16_round_trip(map in quantized_map()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        write_disparity(&map, &p, DisparityFormat::KittiPng16).unwrap();
        prop_assert_eq!(read_disparity(&p, DisparityFormat::KittiPng16).unwrap(), map);
    }

    #[test]
    fn pfm_round_trip(map in quantized_map()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_disparity(&map, &p, DisparityFormat::Pfm).unwrap();
        prop_assert_eq!(read_disparity(&p, DisparityFormat::Pfm).unwrap(), map);
    }

    #[test]
    fn support_shrinks_with_threshold((d, c) in graded_map(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let count = |t| support_mask(&d, &c, t).iter().filter(|m| **m).count();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn delta_accuracies_are_nested(pairs in prop::collection::vec((0.5f32..80.0, 0.2f32..5.0), 1..200)) {
        let gt: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f32> = pairs.iter().map(|p| p.0 * p.1).collect();
        let r = mono_metrics(&pred, &gt, &DepthEvalConfig::default()).unwrap();
        let d: Vec<f64> = ["delta1", "delta2", "delta3"].iter().map(|m| r.get(m).unwrap()).collect();
        prop_assert!(d[0] <= d[1] && d[1] <= d[2]);
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fusion_picks_more_confident(
        da in prop_oneof![Just(-1.0f32), 0.0f32..64.0],
        db in prop_oneof![Just(-1.0f32), 0.0f32..64.0],
        ca in 0.0f32..=1.0,
        cb in 0.0f32..=1.0,
    ) {
        let m = |v: f32| DisparityMap::new(1, 1, vec![v]).unwrap();
        let c = |v: f32| ConfidenceMap::new(1, 1, vec![v]).unwrap();
        let (d, k) = fuse_labels((&m(da), &c(ca)), (&m(db), &c(cb))).unwrap();
        let winner = if cb > ca { db } else { da };
        if winner < 0.0 {
            prop_assert_eq!((d.data()[0], k.data()[0]), (-1.0, 0.0));
        } else {
            prop_assert_eq!((d.data()[0], k.data()[0]), (winner, ca.max(cb)));
        }
    }

    #[test]
    fn fusion_idempotent((d, c) in graded_map()) {
        let (fd, fc) = fuse_labels((&d, &c), (&d, &c)).unwrap();
        let (gd, gc) = fuse_labels((&fd, &fc), (&fd, &fc)).unwrap();
        prop_assert_eq!(&gd, &fd);
        prop_assert_eq!(&gc, &fc);
        prop_assert_eq!(fd, d);
    }
}
