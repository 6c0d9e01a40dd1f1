//! Randomized invariant checks for post-processing and metrics.

use atag_core::eval::tiou;
use atag_core::labels::interval_iou;
use atag_core::postproc::{fuse_scores, nms, soft_nms, Proposal};
use proptest::prelude::*;

fn proposal_strategy() -> impl Strategy<Value = Proposal> {
    (0.0f64..100.0, 0.5f64..25.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(
        |(t_s, len, p_s, p_e, p_cc, p_cr)| Proposal {
            t_s,
            t_e: t_s + len,
            p_f: fuse_scores(p_s, p_e, p_cc, p_cr),
            p_s,
            p_e,
            p_cc,
            p_cr,
        },
    )
}

proptest! {
    #[test]
    fn nms_survivors_stay_below_the_overlap_threshold(
        props in prop::collection::vec(proposal_strategy(), 1..30),
        thr in 0.05f64..=1.0,
        max_out in 1usize..20,
    ) {
        let kept = nms(&props, thr, max_out).unwrap();
        prop_assert!(kept.len() <= max_out.min(props.len()));
        for i in 0..kept.len() {
            for j in 0..i {
                prop_assert!(kept[j].tiou(&kept[i]) <= thr);
            }
        }
        // Scores never change, only membership.
        for k in &kept {
            prop_assert!(props.iter().any(|p| p.t_s == k.t_s && p.p_f == k.p_f));
        }
    }

    #[test]
    fn soft_nms_only_decays_scores(
        props in prop::collection::vec(proposal_strategy(), 1..30),
        sigma in 0.1f64..2.0,
    ) {
        let out = soft_nms(&props, sigma, 0.0, props.len()).unwrap();
        prop_assert_eq!(out.len(), props.len());
        for o in &out {
            let original = props
                .iter()
                .find(|p| p.t_s == o.t_s && p.t_e == o.t_e)
                .unwrap();
            prop_assert!(o.p_f <= original.p_f + 1e-15);
            prop_assert!(o.p_f > 0.0);
        }
        // Output is sorted by decayed score.
        for w in out.windows(2) {
            prop_assert!(w[0].p_f >= w[1].p_f);
        }
    }

    #[test]
    fn tiou_is_symmetric_and_bounded(
        a0 in 0.0f64..50.0, al in 0.1f64..20.0,
        b0 in 0.0f64..50.0, bl in 0.1f64..20.0,
    ) {
        let a = (a0, a0 + al);
        let b = (b0, b0 + bl);
        let ab = tiou(a, b).unwrap();
        let ba = tiou(b, a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((tiou(a, a).unwrap() - 1.0).abs() < 1e-15);
        prop_assert!((ab - interval_iou(a, b)).abs() < 1e-15);
    }

    #[test]
    fn fused_score_is_monotone_in_each_factor(
        p in prop::array::uniform4(0.01f64..1.0),
        bump in 0.0f64..0.5,
    ) {
        let base = fuse_scores(p[0], p[1], p[2], p[3]);
        prop_assert!(fuse_scores((p[0] + bump).min(1.0), p[1], p[2], p[3]) >= base);
        prop_assert!(fuse_scores(p[0], (p[1] + bump).min(1.0), p[2], p[3]) >= base);
        prop_assert!(fuse_scores(p[0], p[1], (p[2] + bump).min(1.0), p[3]) >= base);
        prop_assert!(fuse_scores(p[0], p[1], p[2], (p[3] + bump).min(1.0)) >= base);
    }
}
