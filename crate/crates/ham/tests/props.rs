//! Randomized property checks for the numeric primitives and the
//! treebank text format.

use proptest::prelude::*;

use ham::numeric::{softmax, Tensor};
use ham::treebank::{parse_conllu, serialize_conllu, validate, DepTree};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, 1..12)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in scores()) {
        let p = softmax(&Tensor::vector(v)).unwrap();
        let sum: f64 = p.values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.values().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(v in scores(), c in -10.0..10.0f64) {
        let p = softmax(&Tensor::vector(v.clone())).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&Tensor::vector(shifted)).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Random valid tree: each non-first token attaches to some earlier
/// token or becomes a child of the first, which is the root.
fn arb_tree() -> impl Strategy<Value = DepTree> {
    (1..8usize)
        .prop_flat_map(|n| {
            let picks = prop::collection::vec(0..n, n);
            picks.prop_map(move |picks| {
                let tokens: Vec<String> = (0..n).map(|i| format!("word{i}")).collect();
                let heads: Vec<usize> = (0..n)
                    .map(|i| if i == 0 { 0 } else { 1 + picks[i] % i })
                    .collect();
                validate(tokens, heads).unwrap()
            })
        })
}

proptest! {
    #[test]
    fn conllu_round_trips(trees in prop::collection::vec(arb_tree(), 1..5)) {
        let text = serialize_conllu(&trees);
        let parsed = parse_conllu(&text).unwrap();
        prop_assert_eq!(trees, parsed);
    }
}
