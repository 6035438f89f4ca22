//! Property-based invariants over the tensor primitives and attack math.

use poisonlab::attack::generative::{weighted_gradient, GeneratorConfig, RewardSignal};
use poisonlab::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn clip_bounds_and_is_idempotent(values in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let mut t = Tensor::vector(values);
        t.clip(0.0, 1.0);
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let once = t.clone();
        t.clip(0.0, 1.0);
        prop_assert_eq!(t, once);
    }

    #[test]
    fn one_hot_argmax_round_trip(dim in 1usize..32, idx in 0usize..32) {
        let idx = idx % dim;
        let t = Tensor::one_hot(dim, idx).unwrap();
        prop_assert_eq!(t.argmax(), idx);
        prop_assert_eq!(t.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn weighted_gradient_has_unit_scaled_norm(
        r in prop::num::f64::NORMAL.prop_filter("nonzero", |v| v.abs() > 1e-6),
        values in prop::collection::vec(-5.0f64..5.0, 2..16),
        scale in 0.1f64..4.0,
    ) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-6));
        let mut cfg = GeneratorConfig::for_input_dim(values.len());
        cfg.reward_scale = scale;
        let e = weighted_gradient(&RewardSignal { r, grad_mean: Tensor::vector(values) }, &cfg);
        // normalization makes the error signal's magnitude exactly the
        // configured scale, independent of the raw gradient size
        prop_assert!((e.l2_norm() - scale).abs() < 1e-9);
    }

    #[test]
    fn linf_distance_symmetric_and_zero_on_self(
        (a, b) in (1usize..16).prop_flat_map(|n| (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )),
    ) {
        let ta = Tensor::vector(a);
        let tb = Tensor::vector(b);
        prop_assert_eq!(ta.linf_distance(&tb), tb.linf_distance(&ta));
        prop_assert_eq!(ta.linf_distance(&ta), 0.0);
    }
}
