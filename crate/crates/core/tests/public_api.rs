use proptest::prelude::*;
use zkstar_core::commitments::{chain_check, commit, CommitValue, NonceSource};
use zkstar_core::fixedpoint::{dequantize, quantize, FixedTensor};

proptest! {
    #[test]
    fn quantize_is_within_half_ulp(x in -1.0e6f64..1.0e6, psf in 4u8..=16) {
        let q = quantize(x, psf).unwrap();
        prop_assert!((dequantize(q) - x).abs() <= 0.5 / (1u64 << psf) as f64);
    }

    #[test]
    fn commitments_open_and_chain(values in prop::collection::vec(-100.0f64..100.0, 1..8), seed in any::<u64>()) {
        let nonces = NonceSource::seeded(seed);
        let t = FixedTensor::quantize_slice(vec![values.len()], &values, 12).unwrap();
        let a = commit("x", &CommitValue::Tensor(t.clone()), nonces.gen_nonce().unwrap());
        prop_assert!(a.verify_opening());
        prop_assert!(!a.public().verify_opening());

        let same = a.public();
        prop_assert!(chain_check(std::slice::from_ref(&a), &[same]).unwrap());
        let fresh = commit("x", &CommitValue::Tensor(t), nonces.gen_nonce().unwrap());
        prop_assert!(!chain_check(std::slice::from_ref(&a), &[fresh]).unwrap());
        let relabeled = commit("p", &CommitValue::Bit(true), nonces.gen_nonce().unwrap());
        prop_assert!(chain_check(&[a], &[relabeled]).is_err());
    }
}
