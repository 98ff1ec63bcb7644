use proptest::prelude::*;
use synlm_core::check::brute_force_masks;
use synlm_core::transitions::{
    head_masks, join_segments, oracle, reconstruct, sync_ngrams, window_starts, Action, ActionSequence,
};
use synlm_core::tree::{parse_tree, render_tree, Tree};
use synlm_core::vocab::{build_ngram_vocab, build_token_vocab, JointActionVocab, BLANK};

fn symbol() -> BoxedStrategy<String> {
    "[A-Za-z][A-Za-z0-9.,'-]{0,4}".boxed()
}

/// Trees of depth at most 8 and fanout at most 4.
fn tree() -> impl Strategy<Value = Tree> {
    let leaf = symbol().prop_map(Tree::leaf).boxed();
    let node = (symbol(), prop::collection::vec(leaf.clone(), 1..=4)).prop_map(|(l, c)| Tree::node(l, c));
    node.prop_recursive(6, 64, 4, |inner| {
        (
            symbol(),
            prop::collection::vec(prop_oneof![1 => symbol().prop_map(Tree::leaf), 2 => inner], 1..=4),
        )
            .prop_map(|(l, c)| Tree::node(l, c))
    })
}

fn prefix() -> impl Strategy<Value = Vec<Action>> {
    (tree(), any::<prop::sample::Index>()).prop_map(|(t, i)| {
        let mut a = oracle(&t).into_inner();
        let n = 1 + i.index(a.len());
        a.truncate(n);
        a
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn render_parse_round_trip(t in tree()) {
        prop_assert!(t.depth() <= 8);
        let s = render_tree(&t);
        prop_assert_eq!(parse_tree(&s).unwrap(), t.clone());
        prop_assert_eq!(render_tree(&parse_tree(&s).unwrap()), s);
    }

    #[test]
    fn oracle_reconstruct_round_trip(t in tree()) {
        let o = oracle(&t);
        prop_assert_eq!(reconstruct(&o).unwrap(), t.clone());
        prop_assert_eq!(ActionSequence::from_line(&o.to_line()).unwrap(), o);
    }

    #[test]
    fn segments_rejoin_to_the_oracle(p in prefix()) {
        let (segs, trailing) = sync_ngrams(&p);
        prop_assert_eq!(join_segments(&segs, &trailing).into_inner(), p.clone());
        prop_assert_eq!(segs.len(), p.iter().filter(|a| a.is_word()).count());
        prop_assert!(trailing.iter().all(|a| !a.is_word()));
    }

    #[test]
    fn masks_match_stack_replay(p in prefix()) {
        let fast = head_masks(&p).unwrap();
        prop_assert_eq!(&fast, &brute_force_masks(&p));
        for (i, row) in fast.iter().enumerate() {
            let t = i + 1;
            for j in 0..t {
                prop_assert!(row.stack_visible[j] || row.outside_visible[j]);
                if row.stack_visible[j] && row.outside_visible[j] {
                    prop_assert!(j == 0 || j == t - 1, "overlap at {} of {}", j, t);
                }
            }
        }
    }

    #[test]
    fn reduce_moves_window_left_or_closes_root(t in tree()) {
        let o = oracle(&t).into_inner();
        let w = window_starts(&o).unwrap();
        for i in 1..o.len() {
            if o[i] == Action::Reduce {
                match (w[i - 1], w[i]) {
                    (Some(before), Some(after)) => prop_assert!(after < before),
                    (Some(_), None) => prop_assert_eq!(i, o.len() - 1),
                    other => prop_assert!(false, "{:?}", other),
                }
            }
        }
    }

    #[test]
    fn vocabularies_encode_decode(ts in prop::collection::vec(tree(), 1..6)) {
        let tokens = build_token_vocab(&ts, 1).unwrap();
        let joint = JointActionVocab::from_trees(tokens, &ts);
        let oracles: Vec<ActionSequence> = ts.iter().map(oracle).collect();
        let ngrams = build_ngram_vocab(&oracles);
        for o in &oracles {
            let ids = joint.encode_sequence(o).unwrap();
            let back: Vec<Action> = ids.iter().map(|&i| joint.decode(i).unwrap()).collect();
            prop_assert_eq!(&back[..], &o[..]);
            for seg in sync_ngrams(o).0 {
                let (id, oov) = ngrams.encode_or_blank(&seg.preceding);
                prop_assert!(!oov);
                prop_assert_eq!(id == BLANK, seg.preceding.is_empty());
                if id != BLANK {
                    prop_assert_eq!(ngrams.decode(id).unwrap(), &seg.preceding[..]);
                }
            }
        }
    }
}
