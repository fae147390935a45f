use lanedet::geometry::Lane;
use lanedet::losses::{focal_loss, l1_reg_loss, line_iou, FocalParams};
use proptest::prelude::*;

fn lane(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..800.0, n)
}

proptest! {
    #[test]
    fn iou_bounded_and_symmetric(a in lane(16), b in lane(16), e in 0.5f64..40.0) {
        let (a, b) = (Lane::from_xs(a), Lane::from_xs(b));
        let ab = line_iou(&a, &b, e).unwrap().iou;
        let ba = line_iou(&b, &a, e).unwrap().iou;
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn iou_translation_invariant(a in lane(16), b in lane(16), e in 0.5f64..40.0, t in -300.0f64..300.0) {
        let shift = |v: &[f64]| Lane::from_xs(v.iter().map(|x| x + t).collect());
        let base = line_iou(&Lane::from_xs(a.clone()), &Lane::from_xs(b.clone()), e).unwrap().iou;
        let moved = line_iou(&shift(&a), &shift(&b), e).unwrap().iou;
        prop_assert!((base - moved).abs() < 1e-9);
    }

    // Constant offsets give the closed form (2e - d) / (2e + d).
    #[test]
    fn iou_constant_offset_closed_form(xs in lane(10), d in 0.0f64..100.0, e in 0.5f64..40.0) {
        let gt = Lane::from_xs(xs.clone());
        let pred = Lane::from_xs(xs.iter().map(|x| x + d).collect());
        let iou = line_iou(&pred, &gt, e).unwrap().iou;
        prop_assert!((iou - (2.0 * e - d) / (2.0 * e + d)).abs() < 1e-9);
    }

    #[test]
    fn l1_is_mean_abs_on_valid_rows(a in lane(12), b in lane(12), mask in prop::collection::vec(any::<bool>(), 12)) {
        prop_assume!(mask.iter().any(|v| *v));
        let gt = Lane::new(b.clone(), mask.clone()).unwrap();
        let got = l1_reg_loss(&Lane::from_xs(a.clone()), &gt).unwrap();
        let rows: Vec<f64> = (0..12).filter(|i| mask[*i]).map(|i| (a[i] - b[i]).abs()).collect();
        prop_assert!((got - rows.iter().sum::<f64>() / rows.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn focal_non_negative(scores in prop::collection::vec(0.001f64..0.999, 1..10), pos in 0usize..10) {
        let positives: Vec<usize> = (0..scores.len()).filter(|i| *i == pos).collect();
        let loss = focal_loss(&scores, &positives, &FocalParams::default()).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }
}

#[test]
fn focal_rewards_confident_correct_scores() {
    let p = FocalParams::default();
    let good = focal_loss(&[0.99, 0.01, 0.01], &[0], &p).unwrap();
    let bad = focal_loss(&[0.01, 0.99, 0.99], &[0], &p).unwrap();
    assert!(good < 1e-3 && bad > 100.0 * good);
}

#[test]
fn invalid_rows_are_ignored() {
    let gt = Lane::new(vec![100.0, 100.0, 0.0], vec![true, true, false]).unwrap();
    let pred = Lane::from_xs(vec![100.0, 100.0, 500.0]);
    let r = line_iou(&pred, &gt, 10.0).unwrap();
    assert_eq!(r.covalid_rows, 2);
    assert_eq!(r.iou, 1.0);
    assert_eq!(l1_reg_loss(&pred, &gt).unwrap(), 0.0);
}
