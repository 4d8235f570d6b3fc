use proptest::prelude::*;
use zoomnet_core::boxes::{decode_offsets, encode_offsets, iou, BBox};
use zoomnet_core::inference::nms;
use zoomnet_core::metrics::{average_recall, ImageMatches, BUDGET_GRID};

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..120.0f64, 1.0..120.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn arb_scored(n: usize) -> impl Strategy<Value = Vec<BBox>> {
    // coarse scores so ties are common
    prop::collection::vec((arb_box(), 0..20u32), 0..n)
        .prop_map(|v| v.into_iter().map(|(b, s)| b.with_score(s as f64 / 20.0)).collect())
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn codec_round_trip(a in arb_box(), g in arb_box()) {
        let t = encode_offsets(&a, &g).unwrap();
        let back = decode_offsets(&a, &t);
        for (u, v) in back.coords().iter().zip(g.coords()) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn nms_output_is_consistent(boxes in arb_scored(40), thresh in 0.1..0.9f64) {
        let kept = nms(&boxes, thresh, 1000);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thresh);
                prop_assert!(boxes[a].score >= boxes[b].score);
            }
        }
        // every dropped box is covered by a better-ranked kept one
        for j in (0..boxes.len()).filter(|j| !kept.contains(j)) {
            let covered = kept.iter().any(|&k| {
                let better = boxes[k].score > boxes[j].score || (boxes[k].score == boxes[j].score && k < j);
                better && iou(&boxes[k], &boxes[j]) > thresh
            });
            prop_assert!(covered, "box {} dropped without cause", j);
        }
    }

    #[test]
    fn nms_shift_invariant(boxes in arb_scored(30), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        // integer shifts keep the arithmetic exact
        let (dx, dy) = (dx.round(), dy.round());
        let boxes: Vec<BBox> = boxes
            .iter()
            .map(|b| BBox::new(b.x1.round(), b.y1.round(), b.x2.round() + 1.0, b.y2.round() + 1.0).with_score(b.score.unwrap()))
            .collect();
        let moved: Vec<BBox> = boxes.iter().map(|b| b.translated(dx, dy)).collect();
        prop_assert_eq!(nms(&boxes, 0.5, 1000), nms(&moved, 0.5, 1000));
    }

    #[test]
    fn nms_prefix_of_larger_budget(boxes in arb_scored(40), k in 1..20usize) {
        let all = nms(&boxes, 0.6, 1000);
        let few = nms(&boxes, 0.6, k);
        prop_assert_eq!(&all[..few.len()], &few[..]);
    }

    #[test]
    fn nms_ignores_score_scale(boxes in arb_scored(30), f in 0.1..10.0f64) {
        let scaled: Vec<BBox> = boxes.iter().map(|b| b.with_score(b.score.unwrap() * f)).collect();
        prop_assert_eq!(nms(&boxes, 0.5, 1000), nms(&scaled, 0.5, 1000));
    }

    #[test]
    fn recall_monotone_in_budget(props in prop::collection::vec(arb_box(), 0..60), gts in prop::collection::vec(arb_box(), 1..6)) {
        let m = vec![ImageMatches::compute(0, &props, &gts, 1000)];
        let mut last = 0.0;
        for n in BUDGET_GRID {
            let ar = average_recall(&m, n, None).unwrap();
            prop_assert!((0.0..=1.0).contains(&ar));
            prop_assert!(ar >= last);
            last = ar;
        }
    }
}
