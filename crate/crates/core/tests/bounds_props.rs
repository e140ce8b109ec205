//! Soundness and tightness of interval propagation.

mod common;

use common::suites::{affine_exactness, elision_dominance, ibp_containment};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn sampled_points_stay_inside_propagated_boxes(seed in any::<u64>()) {
        prop_assert_eq!(ibp_containment(seed, 2000), 0);
    }

    #[test]
    fn elided_margins_never_exceed_plain_ones(seed in any::<u64>()) {
        prop_assert_eq!(elision_dominance(seed), 0);
    }

    #[test]
    fn single_affine_layer_bounds_are_exact(seed in any::<u64>()) {
        let err = affine_exactness(seed);
        prop_assert!(err <= 1e-12, "error {err:e}");
    }
}
