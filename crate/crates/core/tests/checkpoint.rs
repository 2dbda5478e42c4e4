use moka_core::harness::{decode, encode, inspect};
use moka_core::{Matrix, Precision};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = (String, Matrix<f64>)> {
    ("[a-z.0-9]{0,12}", 0usize..5, 0usize..5).prop_flat_map(|(name, r, c)| {
        proptest::collection::vec(any::<f64>(), r * c)
            .prop_map(move |data| (name.clone(), Matrix::new(r, c, data).unwrap()))
    })
}

proptest! {
    #[test]
    fn any_tensor_set_round_trips(set in proptest::collection::vec(tensor(), 0..6)) {
        let bytes = encode(&set);
        prop_assert_eq!(inspect(&bytes).unwrap(), Precision::F64);
        let back = decode::<f64>(&bytes).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for ((n1, m1), (n2, m2)) in set.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert!(m1.bitwise_eq(m2));
        }
    }

    #[test]
    fn any_single_bit_flip_is_rejected(set in proptest::collection::vec(tensor(), 1..4), pos in any::<usize>(), bit in 0u8..8) {
        let mut bytes = encode(&set);
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        prop_assert!(decode::<f64>(&bytes).is_err());
    }
}

#[test]
fn f32_values_keep_their_bits() {
    let m = Matrix::new(1, 4, vec![f32::NAN, -0.0, f32::MIN_POSITIVE / 2.0, f32::INFINITY]).unwrap();
    let back = decode::<f32>(&encode(&[("w".to_string(), m.clone())])).unwrap();
    assert!(back[0].1.bitwise_eq(&m));
}
