use synlm_core::beam::{marginal_logprob, parse, run_beam, surprisal, BeamConfig, JointScorer, PlmScorer};
use synlm_core::model::{HeadMasks, Model, ModelConfig, Variant};
use synlm_core::synthdata::{enumerate_joint, sample_corpus, toy_grammar};
use synlm_core::transitions::{head_masks, oracle};
use synlm_core::tree::Tree;
use synlm_core::vocab::{build_token_vocab, JointActionVocab};

fn toy_setup(variant: Variant, seed: u64) -> (JointActionVocab, Model<f32>, Vec<Tree>) {
    let trees = sample_corpus(&toy_grammar(seed), 50).unwrap();
    let tokens = build_token_vocab(&trees, 1).unwrap();
    let vocab = JointActionVocab::from_trees(tokens, &trees);
    let config = ModelConfig {
        hidden: 16,
        heads: 4,
        layers: 2,
        max_len: 9,
        dropout: 0.0,
        ..ModelConfig::desk(variant, vocab.len(), 0)
    };
    // Larger init spread gives a peakier, less uniform toy distribution.
    let mut model = Model::<f32>::new(config, seed).unwrap();
    for p in model.params_mut() {
        if p.rows() > 1 {
            p.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
    }
    (vocab, model, trees)
}

fn exhaustive() -> BeamConfig {
    BeamConfig {
        action_beam: 1 << 20,
        word_beam: 1 << 20,
        fast_track: 0,
        max_struct_per_word: 16,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn word_ids(vocab: &JointActionVocab, words: &[&str]) -> Vec<u32> {
    words.iter().map(|w| vocab.tokens().encode(w)).collect()
}

#[test]
fn exhaustive_beam_matches_enumeration_at_every_prefix() {
    for variant in [Variant::Plm, Variant::PlmMask] {
        let (vocab, model, trees) = toy_setup(variant, 1);
        let scorer = PlmScorer::new(&model, &vocab).unwrap();
        let table = enumerate_joint(&scorer, 8).unwrap();
        assert!(table.total_complete() <= 1.0 + 1e-9);
        assert!(table.total_complete() + table.truncated_mass(8) <= 1.0 + 1e-9);
        for t in trees.iter().take(10) {
            let words = t.words();
            let m = marginal_logprob(&scorer, &words, &exhaustive()).unwrap();
            let ids = word_ids(&vocab, &words);
            for k in 1..=words.len() {
                let exact = table.prefix_prob(&ids[..k]).ln();
                assert!(rel(m[k - 1], exact) <= 1e-9, "{variant} {words:?} k={k}: {} vs {exact}", m[k - 1]);
            }
        }
    }
}

#[test]
fn surprisal_matches_exhaustive_conditional_and_adds_up() {
    let (vocab, model, _) = toy_setup(Variant::Plm, 2);
    let scorer = PlmScorer::new(&model, &vocab).unwrap();
    let table = enumerate_joint(&scorer, 8).unwrap();
    let cfg = exhaustive();
    let (p, c1, c2) = (["a"], ["b"], ["c"]);
    let s = surprisal(&scorer, &p, &["b", "c"], &cfg).unwrap();
    let exact = -(table.prefix_prob(&word_ids(&vocab, &["a", "b", "c"])) / table.prefix_prob(&word_ids(&vocab, &["a"]))).log2();
    assert!((s - exact).abs() <= 1e-6 * exact.abs().max(1.0));
    let s1 = surprisal(&scorer, &p, &c1, &cfg).unwrap();
    let s2 = surprisal(&scorer, &["a", "b"], &c2, &cfg).unwrap();
    assert!((s - (s1 + s2)).abs() < 1e-9);
}

#[test]
fn beam_never_exceeds_exhaustive_and_parse_is_argmax() {
    let (vocab, model, trees) = toy_setup(Variant::PlmMask, 3);
    let scorer = PlmScorer::new(&model, &vocab).unwrap();
    let table = enumerate_joint(&scorer, 8).unwrap();
    let small = BeamConfig {
        action_beam: 3,
        word_beam: 2,
        fast_track: 1,
        max_struct_per_word: 16,
    };
    for t in trees.iter().take(10) {
        let words = t.words();
        let ids = word_ids(&vocab, &words);
        if let Ok(m) = marginal_logprob(&scorer, &words, &small) {
            for k in 1..=words.len() {
                assert!(m[k - 1] <= table.prefix_prob(&ids[..k]).ln() + 1e-12);
            }
        }
        let parsed = parse(&scorer, &words, &exhaustive()).unwrap();
        assert_eq!(parsed.tree.words(), words);
        let (best, lp) = table.best_parse(&ids).unwrap();
        assert_eq!(vocab.encode_sequence(&parsed.actions).unwrap(), best);
        assert!(rel(parsed.logp, lp) < 1e-12);
    }
}

#[test]
fn cached_hypothesis_scores_match_full_forward() {
    let (vocab, model, trees) = toy_setup(Variant::PlmMask, 4);
    let scorer = PlmScorer::new(&model, &vocab).unwrap();
    let words = trees[0].words();
    let (_, beam) = run_beam(&scorer, &words, &BeamConfig::default()).unwrap();
    for h in &beam {
        let actions = h.actions(&vocab);
        let rows = head_masks(&actions).unwrap();
        let lps = model.next_log_probs(&h.ids[..h.ids.len() - 1], HeadMasks::Rows(&rows[..h.ids.len() - 1])).unwrap();
        let full: f64 = lps.iter().zip(&h.ids[1..]).map(|(r, &i)| r[i as usize]).sum();
        assert!((full - h.logp).abs() < 1e-6, "{full} vs {}", h.logp);
    }
}

#[test]
fn masked_hypotheses_attend_by_their_own_parse() {
    let (vocab, model, _) = toy_setup(Variant::PlmMask, 5);
    let scorer = PlmScorer::new(&model, &vocab).unwrap();
    // Same last action after different partial parses.
    let a = synlm_core::transitions::ActionSequence::from_line("NT(S) GEN(a) NT(X) GEN(a)").unwrap();
    let b = synlm_core::transitions::ActionSequence::from_line("NT(S) NT(X) GEN(a) GEN(a)").unwrap();
    let run = |seq: &synlm_core::transitions::ActionSequence| {
        let ids = vocab.encode_sequence(seq).unwrap();
        let windows = synlm_core::transitions::window_starts(seq).unwrap();
        let mut st = None;
        let mut last = Vec::new();
        for (&id, &w) in ids.iter().zip(&windows) {
            let (s, lp) = scorer.advance(st.as_ref(), id, w).unwrap();
            st = Some(s);
            last = lp;
        }
        (windows, last)
    };
    let (wa, la) = run(&a);
    let (wb, lb) = run(&b);
    assert_ne!(wa, wb);
    assert_ne!(la, lb);
}

#[test]
fn larger_word_beam_keeps_marginal_on_toy_models() {
    for seed in 0..5 {
        let (vocab, model, trees) = toy_setup(Variant::Plm, 10 + seed);
        let scorer = PlmScorer::new(&model, &vocab).unwrap();
        let words = trees[0].words();
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=8 {
            let cfg = BeamConfig {
                action_beam: 1000,
                word_beam: k,
                fast_track: 0,
                max_struct_per_word: 16,
            };
            let m = *marginal_logprob(&scorer, &words, &cfg).unwrap().last().unwrap();
            assert!(m >= prev, "seed {seed} k={k}: {m} < {prev}");
            prev = m;
        }
    }
}

#[test]
fn gold_joint_is_in_table() {
    let (vocab, model, trees) = toy_setup(Variant::Plm, 6);
    let scorer = PlmScorer::new(&model, &vocab).unwrap();
    let table = enumerate_joint(&scorer, 8).unwrap();
    for t in trees.iter().take(10) {
        let o = oracle(t);
        let ids = vocab.encode_sequence(&o).unwrap();
        let gold = table.sequence_logp(&ids).unwrap();
        let words = word_ids(&vocab, &t.words());
        assert!(-gold >= -table.sentence_prob(&words).ln());
    }
}
