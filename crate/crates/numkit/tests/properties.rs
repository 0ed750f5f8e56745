use flowguide_numkit::{
    adam_step, conv2d_forward, linear_forward, AdamConfig, AdamState, ConvGeometry, LayerParams, Rng, Tensor,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_with_zero_gradient_is_identity(vals in prop::collection::vec(-10.0f32..10.0, 1..32), lr in 1e-5f64..1.0) {
        let n = vals.len();
        let mut p = LayerParams::new(Tensor::new(vec![n], vals.clone()).unwrap(), Tensor::zeros(&[1]));
        let mut s = AdamState::new(&p, AdamConfig { lr, ..Default::default() });
        for step in 1..=3u64 {
            adam_step("p", &mut p, &mut s).unwrap();
            prop_assert_eq!(s.step_count, step);
        }
        prop_assert_eq!(p.weights.data(), &vals[..]);
    }

    #[test]
    fn forward_kernels_are_deterministic(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.normal_f32());
        let p = LayerParams::new(Tensor::from_fn(&[2, 3, 3, 3], |_| rng.normal_f32()), Tensor::zeros(&[2]));
        let a = conv2d_forward(&x, &p, ConvGeometry::new(1, 1)).unwrap();
        let b = conv2d_forward(&x, &p, ConvGeometry::new(1, 1)).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        prop_assert!(a.is_finite());
    }

    #[test]
    fn linear_matches_naive_loops(b in 1usize..5, i in 1usize..9, o in 1usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[b, i], |_| rng.normal_f32());
        let p = LayerParams::new(Tensor::from_fn(&[i, o], |_| rng.normal_f32()), Tensor::from_fn(&[o], |_| rng.normal_f32()));
        let y = linear_forward(&x, &p).unwrap();
        for r in 0..b {
            for c in 0..o {
                let mut s = p.biases.data()[c];
                for k in 0..i {
                    s += x.data()[r * i + k] * p.weights.data()[k * o + c];
                }
                prop_assert!((y.data()[r * o + c] - s).abs() < 1e-5);
            }
        }
    }
}
