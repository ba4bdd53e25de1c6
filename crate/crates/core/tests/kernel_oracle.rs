use intft_core::dfp::{inverse_map, inverse_map_wide, map_to_dfp, RoundingMode};
use intft_core::kernels::{int_matmul, MatmulPlan};
use intft_core::FpTensor;
use proptest::prelude::*;

fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn integer_matmul_equals_fp64_product_of_quantized_inputs(
        m in 1usize..=8, k in 1usize..=8, n in 1usize..=8,
        bits_a in 2u32..=24, bits_b in 2u32..=24,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = FpTensor::from_fn(&[m, k], |_| rng.gen_range(-4.0f32..4.0));
        let b = FpTensor::from_fn(&[k, n], |_| rng.gen_range(-1e-3f32..1e-3));
        let ah = map_to_dfp(&a, bits_a, RoundingMode::Nearest).unwrap();
        let bh = map_to_dfp(&b, bits_b, RoundingMode::Nearest).unwrap();
        let plan = MatmulPlan::for_operands(&ah, &bh, false, false).unwrap();
        let c = int_matmul(&ah, &bh, &plan).unwrap();
        prop_assert_eq!(c.step_exponent, ah.step_exponent() + bh.step_exponent());

        let (af, bf) = (inverse_map(&ah), inverse_map(&bh));
        let exact = c.to_f64();
        let rounded = inverse_map_wide(&c).unwrap();
        for i in 0..m {
            for j in 0..n {
                let oracle: f64 = (0..k).map(|t| af.values()[i * k + t] as f64 * bf.values()[t * n + j] as f64).sum();
                prop_assert!(ulp_distance(exact[i * n + j], oracle) <= 2);
                prop_assert_eq!(rounded.values()[i * n + j], oracle as f32);
            }
        }
    }
}
