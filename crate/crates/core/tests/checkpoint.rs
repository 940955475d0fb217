use proptest::prelude::*;
use umm_core::numerics::{Checkpoint, ParameterStore, Tensor};

fn store() -> impl Strategy<Value = ParameterStore<f32>> {
    prop::collection::btree_map("[a-z.]{1,12}", (prop::collection::vec(1usize..4, 1..3), any::<bool>(), any::<u64>()), 0..5).prop_map(|m| {
        let mut s = ParameterStore::new();
        for (name, (shape, trainable, seed)) in m {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff)).collect();
            s.insert(name, Tensor::new(shape, data).unwrap(), trainable).unwrap();
        }
        s
    })
}

proptest! {
    #[test]
    fn stores_round_trip_bit_exactly(s in store(), key in "[a-z_]{1,8}", value in "\\PC{0,30}") {
        let mut ck = Checkpoint::from_store(&s);
        ck.meta.insert(key.clone(), value.clone());
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        prop_assert_eq!(&back, &ck);
        let restored: ParameterStore<f32> = back.to_store("").unwrap();
        prop_assert!(restored.changed_names(&s).is_empty());
        for (name, p) in s.iter() {
            prop_assert_eq!(restored.is_trainable(name), p.trainable);
        }
        prop_assert_eq!(back.meta.get(&key), Some(&value));
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::decode(&bytes);
    }

    #[test]
    fn corrupted_headers_are_rejected(s in store(), flip in 0usize..8) {
        let mut bytes = Checkpoint::from_store(&s).encode();
        bytes[flip] ^= 0x20;
        prop_assert!(Checkpoint::decode(&bytes).is_err());
    }
}
