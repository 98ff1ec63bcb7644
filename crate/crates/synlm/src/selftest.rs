//! Independent-oracle checks bundled for `synlm selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use synlm_core::beam::{marginal_logprob, BeamConfig, PlmScorer};
use synlm_core::check::{brute_force_masks, gradcheck, random_prefix, random_tree};
use synlm_core::model::{encode_example, scaffold_targets, Gradients, HeadMasks, Model, ModelConfig, Variant};
use synlm_core::optim::{AdamW, AdamWConfig};
use synlm_core::synthdata::{enumerate_joint, sample_corpus, toy_grammar};
use synlm_core::tensor::{Matrix, Tape};
use synlm_core::transitions::{head_masks, oracle, reconstruct, sync_ngrams, Action, ActionSequence};
use synlm_core::tree::{parse_tree, render_tree, Tree};
use synlm_core::vocab::{build_ngram_vocab, build_token_vocab, JointActionVocab, NGramVocab, BLANK, PAD};

use crate::error::Result;
use crate::io::sig9;

/// Outcome of one check: `pass` iff `value <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub check: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn new(check: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Check {
            check: check.into(),
            pass: value <= threshold,
            value: sig9(value),
            threshold,
            detail: detail.into(),
        }
    }
}

pub const BIRDS_SANG: &str = "(S (NP The birds) (VP sang))";

/// Render/parse and oracle/reconstruct round trips on `n` random trees
/// (depth <= 8, fanout <= 4) plus the "birds sang" tree. Value: failures.
pub fn round_trip(seed: u64, n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trees: Vec<Tree> = (0..n).map(|_| random_tree(&mut rng, 8, 4)).collect();
    trees.push(parse_tree(BIRDS_SANG).expect("valid"));
    let failures = trees
        .iter()
        .filter(|t| {
            let text = render_tree(t);
            parse_tree(&text).ok().as_ref() != Some(*t) || reconstruct(&oracle(t)).ok().as_ref() != Some(*t)
        })
        .count();
    Check::new("round_trip", failures as f64, 0.0, format!("{} trees", trees.len()))
}

/// Head masks vs a per-query stack replay on `n` random prefixes. Value: mismatches.
pub fn mask_equivalence(seed: u64, n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mismatches = (0..n)
        .filter(|_| {
            let p = random_prefix(&mut rng, 6, 4);
            head_masks(&p).ok() != Some(brute_force_masks(&p))
        })
        .count();
    Check::new("mask_equivalence", mismatches as f64, 0.0, format!("{n} prefixes"))
}

fn birds_sang_data() -> (ActionSequence, JointActionVocab, NGramVocab) {
    let t = parse_tree(BIRDS_SANG).expect("valid");
    let o = oracle(&t);
    let vocab = JointActionVocab::from_trees(build_token_vocab([&t], 1).expect("non-empty"), [&t]);
    let ngrams = build_ngram_vocab([&o]);
    (o, vocab, ngrams)
}

/// Tiny float64 configuration used for gradient checks.
pub fn tiny_config(variant: Variant, vocab: &JointActionVocab, ngrams: &NGramVocab) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 4,
        layers: 2,
        max_len: 32,
        dropout: 0.0,
        ..ModelConfig::for_vocabs(variant, vocab, Some(ngrams))
    }
}

/// End-to-end finite-difference gradient check (H=16, N=4, M=2, float64).
pub fn gradient(variant: Variant, seed: u64, tolerance: f64) -> Result<Check> {
    let (o, vocab, ngrams) = birds_sang_data();
    let model = Model::<f64>::new(tiny_config(variant, &vocab, &ngrams), seed)?;
    let (ex, _) = encode_example(variant, &o, &vocab, Some(&ngrams))?;
    let r = gradcheck(&model, &ex, 1e-5, 1e-4)?;
    let worst = &model.specs()[r.worst.0].name;
    Ok(Check::new(
        format!("gradient_{variant}"),
        r.max_rel_error,
        tolerance,
        format!("{} entries, worst {worst}[{}]", r.checked, r.worst.1),
    ))
}

/// Attention weights of random PLM-mask forwards: largest weight on a masked
/// key (must be exactly 0) and largest deviation of a row sum from 1.
pub fn attention(seed: u64, forwards: usize, desk: bool) -> Result<(Check, Check)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees: Vec<Tree> = (0..forwards).map(|_| random_tree(&mut rng, 5, 3)).collect();
    let vocab = JointActionVocab::from_trees(build_token_vocab(&trees, 1)?, &trees);
    let mut config = ModelConfig::for_vocabs(Variant::PlmMask, &vocab, None);
    if !desk {
        config = ModelConfig {
            hidden: 16,
            layers: 2,
            max_len: 64,
            ..config
        };
    }
    let heads = config.heads;
    let model = Model::<f32>::new(config, rng.gen())?;
    let (mut masked_max, mut row_err) = (0.0f64, 0.0f64);
    for t in &trees {
        let o = oracle(t);
        let keep = rng.gen_range(1..=o.len());
        let prefix = &o[..keep];
        let ids = vocab.encode_sequence(prefix)?;
        let rows = head_masks(prefix)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ids, HeadMasks::Rows(&rows), true)?;
        for (k, &a) in out.attention.expect("requested").iter().enumerate() {
            let head = k % heads;
            let w = tape.value(a);
            for (i, row) in rows.iter().enumerate() {
                let sum: f64 = w.row(i).iter().map(|&v| v as f64).sum();
                row_err = row_err.max((sum - 1.0).abs());
                for j in 0..ids.len() {
                    let visible = j <= i
                        && match head {
                            0 => row.stack_visible[j],
                            1 => row.outside_visible[j],
                            _ => true,
                        };
                    if !visible {
                        masked_max = masked_max.max(w.get(i, j).abs() as f64);
                    }
                }
            }
        }
    }
    Ok((
        Check::new("attention_masked_keys", masked_max, 0.0, format!("{forwards} forwards")),
        Check::new("attention_normalised", row_err, 1e-6, format!("{forwards} forwards")),
    ))
}

/// PLM-mask with all-visible masks against PLM with the same weights.
/// Value: number of differing log-probabilities.
pub fn mask_neutrality(seed: u64) -> Result<Check> {
    let (o, vocab, ngrams) = birds_sang_data();
    let masked = Model::<f32>::new(tiny_config(Variant::PlmMask, &vocab, &ngrams), seed)?;
    let mut c = masked.config().clone();
    c.variant = Variant::Plm;
    let plain = Model::from_params(c, masked.params().to_vec())?;
    let ids = vocab.encode_sequence(&o)?;
    let a = masked.next_log_probs(&ids, HeadMasks::AllVisible)?;
    let b = plain.next_log_probs(&ids, HeadMasks::None)?;
    let diff = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count();
    Ok(Check::new("mask_neutrality", diff as f64, 0.0, "bitwise comparison"))
}

/// Scaffold targets on the "birds sang" sequence. Value: mismatching targets.
pub fn scaffold_alignment() -> Check {
    let (o, _, ngrams) = birds_sang_data();
    let (segs, _) = sync_ngrams(&o);
    let id = |g: &[Action]| ngrams.get(g).unwrap_or(u32::MAX);
    let s_np = id(&[Action::Nt("S".into()), Action::Nt("NP".into())]);
    let red_vp = id(&[Action::Reduce, Action::Nt("VP".into())]);
    let (next, _) = scaffold_targets(&segs, Variant::SclmNext, &ngrams);
    let (past, _) = scaffold_targets(&segs, Variant::SclmPast, &ngrams);
    let expected_next = [s_np, BLANK, red_vp];
    let expected_past = [PAD, s_np, BLANK];
    let wrong = next.iter().zip(&expected_next).filter(|(a, b)| a != b).count()
        + past.iter().zip(&expected_past).filter(|(a, b)| a != b).count()
        + next.len().abs_diff(3)
        + past.len().abs_diff(3);
    Check::new("scaffold_alignment", wrong as f64, 0.0, "next and past targets")
}

/// AdamW scalar oracles: the decay-only step and 200 steps on p^2.
/// Value: |p| after the parabola run (the decay step must be exact).
pub fn adamw() -> Check {
    let scalar = |lr: f64, wd: f64| {
        AdamW::<f64>::with_shapes(
            AdamWConfig {
                lr,
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            &[(1, 1)],
            &[true],
        )
    };
    let one = || vec![Matrix::from_vec(1, 1, vec![1.0f64])];
    let grad = |g: f64| Gradients {
        grads: vec![Matrix::from_vec(1, 1, vec![g])],
    };
    let mut p = one();
    scalar(1e-5, 0.01).update_params(&mut p, &grad(0.0));
    let decay_ok = (p[0].data()[0] - (1.0 - 1e-7)).abs() < 1e-15;
    let mut p = one();
    let mut opt = scalar(0.1, 0.0);
    for _ in 0..200 {
        let x = p[0].data()[0];
        opt.update_params(&mut p, &grad(2.0 * x));
    }
    let v = if decay_ok { p[0].data()[0].abs() } else { f64::INFINITY };
    Check::new("adamw_oracles", v, 0.05, "decay-only step and parabola")
}

/// A PLM on the toy grammar with a deliberately peaked random init.
pub fn toy_model(variant: Variant, seed: u64) -> Result<(JointActionVocab, Model<f32>, Vec<Tree>)> {
    let trees = sample_corpus(&toy_grammar(seed), 50)?;
    let vocab = JointActionVocab::from_trees(build_token_vocab(&trees, 1)?, &trees);
    let config = ModelConfig {
        hidden: 16,
        heads: 4,
        layers: 2,
        max_len: 9,
        dropout: 0.0,
        ..ModelConfig::desk(variant, vocab.len(), 0)
    };
    let mut model = Model::<f32>::new(config, seed)?;
    for p in model.params_mut() {
        if p.rows() > 1 {
            p.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
    }
    Ok((vocab, model, trees))
}

/// Beam large enough to hold every reachable prefix of the toy grammar.
pub fn exhaustive_beam() -> BeamConfig {
    BeamConfig {
        action_beam: 1 << 20,
        word_beam: 1 << 20,
        fast_track: 0,
        max_struct_per_word: 16,
    }
}

/// Largest relative gap between beam marginals and exhaustive enumeration at
/// every word step of `sentences` toy sentences.
pub fn beam_exactness(variant: Variant, seed: u64, sentences: usize) -> Result<Check> {
    let (vocab, model, trees) = toy_model(variant, seed)?;
    let scorer = PlmScorer::new(&model, &vocab)?;
    let table = enumerate_joint(&scorer, 8)?;
    let mut worst = 0.0f64;
    let mut steps = 0;
    for t in trees.iter().take(sentences) {
        let words = t.words();
        let m = marginal_logprob(&scorer, &words, &exhaustive_beam())?;
        let ids: Vec<u32> = words.iter().map(|w| vocab.tokens().encode(w)).collect();
        for k in 1..=words.len() {
            let exact = table.prefix_prob(&ids[..k]).ln();
            let rel = (m[k - 1] - exact).abs() / m[k - 1].abs().max(exact.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            steps += 1;
        }
    }
    Ok(Check::new(
        format!("beam_exactness_{variant}"),
        worst,
        1e-9,
        format!("{steps} word steps, {} enumerated prefixes", table.len()),
    ))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![round_trip(seed, 1000), mask_equivalence(seed, 10_000)];
    for v in Variant::ALL {
        out.push(gradient(v, seed, 1e-4)?);
    }
    let (a, b) = attention(seed, 20, false)?;
    out.push(a);
    out.push(b);
    out.push(mask_neutrality(seed)?);
    out.push(scaffold_alignment());
    out.push(adamw());
    out.push(beam_exactness(Variant::PlmMask, seed, 5)?);
    Ok(out)
}
