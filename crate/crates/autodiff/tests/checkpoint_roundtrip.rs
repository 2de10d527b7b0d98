use fairvit_autodiff::checkpoint::{read_checkpoint, to_bytes};
use fairvit_autodiff::{ParamStore, Tensor};
use proptest::prelude::*;

fn store_strategy() -> impl Strategy<Value = ParamStore> {
    prop::collection::btree_map(
        "[a-z][a-z0-9_.]{0,12}",
        prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            (Just(shape), prop::collection::vec(any::<f64>(), n))
        }),
        0..6,
    )
    .prop_map(|m| {
        let mut s = ParamStore::new();
        for (name, (shape, data)) in m {
            s.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        s
    })
}

proptest! {
    #[test]
    fn save_load_is_byte_exact(store in store_strategy()) {
        let bytes = to_bytes(&store);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(to_bytes(&back), bytes);
        prop_assert_eq!(back.len(), store.len());
    }
}
