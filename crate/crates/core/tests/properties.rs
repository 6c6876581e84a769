use std::collections::HashSet;

use proptest::prelude::*;

use triseg::data::{load_dataset, split_dataset, ImageGrid, MaskGrid, Sample};
use triseg::labelproc::{disagreement_score, vote_from_predictions, PseudoPool, RemovalSchedule};
use triseg::losses::{self, BoundaryMode, TverskyParams};
use triseg::metrics::{self, ConfusionCounts};
use triseg::perturb::{perturb_batch, PerturbConfig};
use triseg::views::combine;

fn hard_mask(h: usize, w: usize) -> impl Strategy<Value = MaskGrid> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |fg| MaskGrid::from_bools(h, w, &fg).unwrap())
}

/// Blob-like masks: a union of up to three rectangles.
fn blob_mask(n: usize) -> impl Strategy<Value = MaskGrid> {
    proptest::collection::vec((0..n, 0..n, 1..n / 2, 1..n / 2), 0..4).prop_map(move |rects| {
        MaskGrid::from_fn(n, n, |r, c| {
            rects
                .iter()
                .any(|&(r0, c0, dh, dw)| r >= r0 && r < r0 + dh && c >= c0 && c < c0 + dw)
        })
    })
}

fn soft_mask(h: usize, w: usize) -> impl Strategy<Value = MaskGrid> {
    proptest::collection::vec(0.0..=1.0f64, h * w).prop_map(move |v| MaskGrid::soft(h, w, v).unwrap())
}

fn tiny_samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            name: format!("{i}"),
            image: ImageGrid::new(1, 1, vec![0.5]).unwrap(),
            mask: Some(MaskGrid::empty(1, 1)),
        })
        .collect()
}

fn brute_force_distances(ms: &MaskGrid, gt: &MaskGrid) -> Option<(f64, f64)> {
    let bm = metrics::extract_boundary(ms);
    let bg = metrics::extract_boundary(gt);
    if bm.is_empty() || bg.is_empty() {
        return None;
    }
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|&q| {
                let dr = p.0 as f64 - q.0 as f64;
                let dc = p.1 as f64 - q.1 as f64;
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let d: Vec<f64> = bm
        .iter()
        .map(|&p| nearest(p, &bg))
        .chain(bg.iter().map(|&p| nearest(p, &bm)))
        .collect();
    Some((d.iter().copied().fold(0.0, f64::max), d.iter().sum::<f64>() / d.len() as f64))
}

fn embed(m: &MaskGrid, n: usize, dr: usize, dc: usize) -> MaskGrid {
    let (h, w) = m.dims();
    MaskGrid::from_fn(n, n, |r, c| {
        r >= dr && c >= dc && r - dr < h && c - dc < w && m.grid().get(r - dr, c - dc) == 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedule_continuous_and_non_increasing(
        zeta in 0.0..1.0f64,
        x in 1u64..100_000,
        y in 0u64..10_000,
        ts in proptest::collection::vec(0.0..1.0f64, 2..50),
    ) {
        let s = RemovalSchedule::new(x, y, zeta).unwrap();
        let (b1, b2) = s.breakpoints();
        prop_assert!((s.first_branch() - s.middle_branch(b1)).abs() <= 1e-9);
        prop_assert!((s.middle_branch(b2) - s.last_branch()).abs() <= 1e-9);
        let mut ts: Vec<f64> = ts.iter().map(|u| u * x as f64).collect();
        ts.sort_by(f64::total_cmp);
        for pair in ts.windows(2) {
            prop_assert!(s.value(pair[1]) <= s.value(pair[0]) + 1e-9);
        }
    }

    #[test]
    fn dice_iou_identity(tp in 0u64..1_000_000, fp in 0u64..1_000_000, fn_ in 0u64..1_000_000, tn in 0u64..1000) {
        let m = metrics::overlap_metrics(&ConfusionCounts { tp, fp, fn_, tn });
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_symmetric_and_bounded(a in blob_mask(16), b in blob_mask(16)) {
        prop_assert_eq!(metrics::dice(&a, &b).unwrap(), metrics::dice(&b, &a).unwrap());
        let ab = metrics::surface_distances(&a, &b).unwrap();
        let ba = metrics::surface_distances(&b, &a).unwrap();
        prop_assert_eq!(ab.map(|d| d.hd), ba.map(|d| d.hd));
        match (ab, ba) {
            (Some(x), Some(y)) => {
                prop_assert!((x.assd - y.assd).abs() <= 1e-12);
                prop_assert!(x.hd >= 0.0 && x.assd >= 0.0 && x.assd <= x.hd);
            }
            (None, None) => {}
            _ => prop_assert!(false, "distances defined in one direction only"),
        }
        let bd_ab = metrics::boundary_dice(&a, &b).unwrap();
        let bd_ba = metrics::boundary_dice(&b, &a).unwrap();
        prop_assert_eq!(bd_ab.dbd_g, bd_ba.dbd_m);
        match (bd_ab.sbd, bd_ba.sbd) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
        for v in [bd_ab.dbd_g, bd_ab.dbd_m, bd_ab.sbd].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let o = metrics::overlap_metrics(&metrics::confusion_counts(&a, &b).unwrap());
        for v in [o.dice, o.iou, o.accuracy, o.precision, o.sensitivity, o.specificity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn sbd_is_weighted_average(a in hard_mask(12, 12), b in blob_mask(12)) {
        let bd = metrics::boundary_dice(&a, &b).unwrap();
        let ng = metrics::extract_boundary(&b).len() as f64;
        let nm = metrics::extract_boundary(&a).len() as f64;
        if let (Some(g), Some(m), Some(s)) = (bd.dbd_g, bd.dbd_m, bd.sbd) {
            prop_assert!((s - (ng * g + nm * m) / (ng + nm)).abs() <= 1e-12);
        }
    }

    #[test]
    fn distances_match_brute_force(a in hard_mask(16, 16), b in blob_mask(16)) {
        let fast = metrics::surface_distances(&a, &b).unwrap().map(|d| (d.hd, d.assd));
        prop_assert_eq!(fast, brute_force_distances(&a, &b));
    }

    #[test]
    fn metrics_translation_invariant(a in blob_mask(12), b in blob_mask(12), dr in 1usize..6, dc in 1usize..6) {
        // a one-pixel margin keeps the canvas edge from creating boundary
        let (a0, b0) = (embed(&a, 20, 1, 1), embed(&b, 20, 1, 1));
        let (a1, b1) = (embed(&a, 20, dr, dc), embed(&b, 20, dr, dc));
        let m0 = metrics::evaluate_pair("x", &a0, &b0).unwrap();
        let m1 = metrics::evaluate_pair("x", &a1, &b1).unwrap();
        prop_assert_eq!(m0, m1);
    }

    #[test]
    fn vote_stays_within_donors(p in soft_mask(6, 6), q in soft_mask(6, 6), ap in 0.0..1.0f64, aq in 0.0..1.0f64) {
        let v = vote_from_predictions(&p, ap, &q, aq).unwrap();
        for ((x, y), z) in p.pixels().iter().zip(q.pixels()).zip(v.pixels()) {
            prop_assert!(x.min(*y) <= *z && *z <= x.max(*y));
        }
    }

    #[test]
    fn ensemble_is_convex(
        maps in proptest::collection::vec(soft_mask(5, 5), 3),
        alpha in proptest::collection::vec(0.0..1.0f64, 3),
    ) {
        prop_assume!(alpha.iter().sum::<f64>() > 1e-6);
        let refs: Vec<&MaskGrid> = maps.iter().collect();
        let e = combine(&refs, &alpha).unwrap();
        for (i, v) in e.pixels().iter().enumerate() {
            let lo = maps.iter().map(|m| m.pixels()[i]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m.pixels()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *v && *v <= hi);
        }
    }

    #[test]
    fn filtering_is_deterministic(
        scores in proptest::collection::vec(0.0..1.0f64, 1..40),
        t in 1u64..20,
        zeta in 0.0..0.95f64,
    ) {
        let ids: Vec<usize> = (0..scores.len()).collect();
        let run = || {
            let mut pool = PseudoPool::new(&ids, (2, 2), 20);
            pool.update(vec![MaskGrid::empty(2, 2); ids.len()], scores.clone()).unwrap();
            let removed = pool.filter_low_confidence(t, zeta).unwrap();
            let active: Vec<usize> = pool.active_entries().map(|e| e.image_id).collect();
            (removed, active)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn disagreement_in_unit_interval(p in soft_mask(6, 6), q in soft_mask(6, 6)) {
        let d = disagreement_score(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(disagreement_score(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn losses_non_negative(p in soft_mask(8, 8), g in hard_mask(8, 8)) {
        let tp = TverskyParams::default();
        prop_assert!(losses::focal_tversky_loss(&p, &g, &tp).unwrap() >= 0.0);
        prop_assert!(losses::overlap_loss(&p, &g).unwrap() >= 0.0);
        prop_assert!(losses::boundary_loss(&p, BoundaryMode::GradientMagnitude).unwrap() >= 0.0);
        prop_assert!(losses::boundary_loss(&p, BoundaryMode::Literal).unwrap() >= 0.0);
    }

    #[test]
    fn loss_minima_only_at_the_target(p in hard_mask(8, 8), g in hard_mask(8, 8)) {
        let tp = TverskyParams::default();
        let same = p == g;
        prop_assert_eq!(losses::overlap_loss(&p, &g).unwrap() == 0.0, same);
        prop_assert_eq!(losses::focal_tversky_loss(&p, &g, &tp).unwrap() == 0.0, same);
        prop_assert_eq!(losses::overlap_loss(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_tversky_is_one_minus_dice(p in hard_mask(8, 8), g in hard_mask(8, 8)) {
        let sym = TverskyParams { alpha: 0.5, beta: 0.5, gamma: 1.0 };
        let t = losses::focal_tversky_loss(&p, &g, &sym).unwrap();
        prop_assert!((t - (1.0 - metrics::dice(&p, &g).unwrap())).abs() <= 1e-5);
    }

    #[test]
    fn perturbation_is_consistent_and_replayable(seed in any::<u64>(), n in 1usize..40) {
        let samples = triseg::data::generate_synthetic(n, (16, 16), seed % 1000).unwrap();
        let batch: Vec<_> = samples.into_iter().map(|s| (s.image, s.mask.unwrap())).collect();
        let config = PerturbConfig::default();
        let (out, records) = perturb_batch(&batch, &config, seed).unwrap();
        prop_assert_eq!(perturb_batch(&batch, &config, seed).unwrap(), (out.clone(), records.clone()));
        prop_assert_eq!(records.len(), triseg::data::round_half_up(0.7 * n as f64));
        for rec in &records {
            let (img, mask) = &out[rec.sample];
            prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(mask.is_hard());
            let back = rec.invert_mask(mask);
            prop_assert_eq!(metrics::dice(&back, &batch[rec.sample].1).unwrap(), 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn split_sizes_follow_integer_arithmetic(n in 10usize..10_000, k in prop::sample::select(vec![2usize, 5, 10, 20]), seed in any::<u64>()) {
        let split = split_dataset(&tiny_samples(n), k as f64 / 100.0, seed).unwrap();
        let test = (10 * n + 50) / 100;
        let m = n - test;
        let labelled = (k * m + 50) / 100;
        prop_assert_eq!(split.test.len(), test);
        prop_assert_eq!(split.labelled.len(), labelled);
        prop_assert_eq!(split.unlabelled.len(), m - labelled);
        prop_assert_eq!(split.validation_ids.len(), (20 * m + 50) / 100);
        let mut seen = HashSet::new();
        for id in split.test.iter().map(|s| s.id)
            .chain(split.labelled.iter().map(|s| s.id))
            .chain(split.unlabelled.iter().map(|s| s.id))
        {
            prop_assert!(seen.insert(id), "sample {} in two partitions", id);
        }
        prop_assert_eq!(seen.len(), n);
        let test_ids: HashSet<usize> = split.test.iter().map(|s| s.id).collect();
        prop_assert!(split.validation_ids.iter().all(|i| !test_ids.contains(i)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn loaded_files_obey_value_ranges(
        pixels in proptest::collection::vec(any::<u8>(), 20 * 12),
        mask in proptest::collection::vec(prop::sample::select(vec![0u8, 64, 127, 128, 200, 255]), 20 * 12),
        out_h in prop::sample::select(vec![8usize, 16, 32]),
    ) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        image::GrayImage::from_raw(12, 20, pixels).unwrap().save(dir.path().join("images/a.png")).unwrap();
        image::GrayImage::from_raw(12, 20, mask).unwrap().save(dir.path().join("masks/a.png")).unwrap();
        let loaded = load_dataset(dir.path(), (out_h, 16)).unwrap();
        prop_assert_eq!(loaded.len(), 1);
        let s = &loaded[0];
        prop_assert_eq!(s.image.dims(), (out_h, 16));
        prop_assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let m = s.mask.as_ref().unwrap();
        prop_assert_eq!(m.dims(), (out_h, 16));
        prop_assert!(m.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
