//! Targeted syntactic evaluation and perplexity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::beam::{marginal_logprob, BeamConfig, BeamError, JointScorer};
use crate::model::{HeadMasks, Model, ModelError};
use crate::tensor::Float;
use crate::transitions::{head_masks, Action};
use crate::vocab::{JointActionVocab, TokenVocab, BOS, UNK};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    BadSuite(String),
    MissingGoldParse,
    Beam(BeamError),
    Model(ModelError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::BadSuite(m) => write!(f, "bad suite item: {m}"),
            EvalError::MissingGoldParse => f.write_str("joint models need gold parses for perplexity"),
            EvalError::Beam(e) => write!(f, "{e}"),
            EvalError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl From<BeamError> for EvalError {
    fn from(e: BeamError) -> Self {
        EvalError::Beam(e)
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// Anything that yields `log p(w_1..w_t)` for every prefix of a sentence.
pub trait PrefixScorer {
    fn prefix_logprobs(&self, words: &[&str]) -> Result<Vec<f64>, EvalError>;

    /// Words of `words` outside the vocabulary.
    fn unknown_words(&self, words: &[&str]) -> usize;
}

/// Exact scoring for word-level models (LM and ScLM).
pub struct WordScorer<'m, F: Float> {
    pub model: &'m Model<F>,
    pub tokens: &'m TokenVocab,
}

/// Natural-log probability of each word given its prefix.
pub fn word_logprobs<F: Float>(model: &Model<F>, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
    if model.variant().is_joint() {
        return Err(ModelError::VariantMismatch {
            variant: model.variant(),
            op: "word scoring",
        });
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let mut input = Vec::with_capacity(ids.len());
    input.push(BOS);
    input.extend_from_slice(&ids[..ids.len() - 1]);
    let rows = model.next_log_probs(&input, HeadMasks::None)?;
    Ok(rows.iter().zip(ids).map(|(r, &i)| r[i as usize]).collect())
}

impl<F: Float> PrefixScorer for WordScorer<'_, F> {
    fn prefix_logprobs(&self, words: &[&str]) -> Result<Vec<f64>, EvalError> {
        let ids: Vec<u32> = words.iter().map(|w| self.tokens.encode(w)).collect();
        let lps = word_logprobs(self.model, &ids)?;
        let mut acc = 0.0;
        Ok(lps
            .into_iter()
            .map(|lp| {
                acc += lp;
                acc
            })
            .collect())
    }

    fn unknown_words(&self, words: &[&str]) -> usize {
        words.iter().filter(|w| self.tokens.encode(w) == UNK).count()
    }
}

/// Beam-approximated marginals for joint models.
pub struct BeamScorer<'s, J: JointScorer> {
    pub scorer: &'s J,
    pub config: BeamConfig,
}

impl<J: JointScorer> PrefixScorer for BeamScorer<'_, J> {
    fn prefix_logprobs(&self, words: &[&str]) -> Result<Vec<f64>, EvalError> {
        Ok(marginal_logprob(self.scorer, words, &self.config)?)
    }

    fn unknown_words(&self, words: &[&str]) -> usize {
        let t = self.scorer.vocab().tokens();
        words.iter().filter(|w| t.encode(w) == UNK).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Region {
    pub name: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SentenceVariant {
    pub name: String,
    pub regions: Vec<Region>,
}

/// One `(variant, region)` surprisal term.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Term {
    pub variant: String,
    pub region: String,
}

/// `Σ left < Σ right` over region surprisals.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Condition {
    pub left: Vec<Term>,
    pub right: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SuiteItem {
    pub item_id: String,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub suite: Option<String>,
    pub variants: Vec<SentenceVariant>,
    pub conditions: Vec<Condition>,
}

impl SuiteItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::BadSuite(format!("{}: {m}", self.item_id)));
        if self.variants.is_empty() || self.conditions.is_empty() {
            return bad("needs at least one variant and one condition".into());
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|o| o.name == v.name) {
                return bad(format!("duplicate variant {}", v.name));
            }
            if v.regions.is_empty() {
                return bad(format!("variant {} has no regions", v.name));
            }
            for (j, r) in v.regions.iter().enumerate() {
                if r.tokens.is_empty() {
                    return bad(format!("empty region {}", r.name));
                }
                if v.regions[..j].iter().any(|o| o.name == r.name) {
                    return bad(format!("duplicate region {}", r.name));
                }
            }
        }
        for c in &self.conditions {
            if c.left.is_empty() || c.right.is_empty() {
                return bad("empty condition side".into());
            }
            for t in c.left.iter().chain(&c.right) {
                let Some(v) = self.variants.iter().find(|v| v.name == t.variant) else {
                    return bad(format!("unknown variant {}", t.variant));
                };
                if !v.regions.iter().any(|r| r.name == t.region) {
                    return bad(format!("unknown region {}.{}", t.variant, t.region));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ConditionResult {
    /// Summed surprisal (bits) of each side.
    pub left: f64,
    pub right: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ItemResult {
    pub item_id: String,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub suite: Option<String>,
    pub pass: bool,
    pub conditions: Vec<ConditionResult>,
    /// Region surprisals in bits, keyed `variant.region`.
    pub regions: BTreeMap<String, f64>,
    pub unknown_words: usize,
}

/// Region surprisals (bits) of one sentence variant.
fn region_surprisals<P: PrefixScorer + ?Sized>(scorer: &P, v: &SentenceVariant) -> Result<(Vec<f64>, usize), EvalError> {
    let words: Vec<&str> = v.regions.iter().flat_map(|r| r.tokens.iter().map(String::as_str)).collect();
    let lp = scorer.prefix_logprobs(&words)?;
    let mut out = Vec::with_capacity(v.regions.len());
    let mut start = 0;
    for r in &v.regions {
        let end = start + r.tokens.len();
        let before = if start == 0 { 0.0 } else { lp[start - 1] };
        out.push(-(lp[end - 1] - before) / core::f64::consts::LN_2);
        start = end;
    }
    Ok((out, scorer.unknown_words(&words)))
}

pub fn eval_item<P: PrefixScorer + ?Sized>(scorer: &P, item: &SuiteItem) -> Result<ItemResult, EvalError> {
    item.validate()?;
    let mut regions = BTreeMap::new();
    let mut unknown_words = 0;
    for v in &item.variants {
        let (s, unk) = region_surprisals(scorer, v)?;
        unknown_words += unk;
        for (r, x) in v.regions.iter().zip(s) {
            regions.insert(format!("{}.{}", v.name, r.name), x);
        }
    }
    let sum = |terms: &[Term]| -> f64 { terms.iter().map(|t| regions[&format!("{}.{}", t.variant, t.region)]).sum() };
    let conditions: Vec<ConditionResult> = item
        .conditions
        .iter()
        .map(|c| {
            let (left, right) = (sum(&c.left), sum(&c.right));
            ConditionResult {
                left,
                right,
                holds: left < right,
            }
        })
        .collect();
    Ok(ItemResult {
        item_id: item.item_id.clone(),
        suite: item.suite.clone(),
        pass: conditions.iter().all(|c| c.holds),
        conditions,
        regions,
        unknown_words,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SuiteSummary {
    pub items: usize,
    pub passed: usize,
    /// Passed items over all items.
    pub micro_accuracy: f64,
    /// Unweighted mean of per-suite accuracies.
    pub macro_accuracy: f64,
    pub per_suite: BTreeMap<String, f64>,
}

pub const DEFAULT_SUITE: &str = "default";

pub fn summarize_suite(results: &[ItemResult]) -> SuiteSummary {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in results {
        let e = per.entry(r.suite.clone().unwrap_or_else(|| DEFAULT_SUITE.into())).or_default();
        e.0 += r.pass as usize;
        e.1 += 1;
    }
    let per_suite: BTreeMap<String, f64> = per.iter().map(|(k, &(p, n))| (k.clone(), p as f64 / n as f64)).collect();
    let passed = results.iter().filter(|r| r.pass).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    SuiteSummary {
        items: results.len(),
        passed,
        micro_accuracy: ratio(passed, results.len()),
        macro_accuracy: if per_suite.is_empty() {
            0.0
        } else {
            per_suite.values().sum::<f64>() / per_suite.len() as f64
        },
        per_suite,
    }
}

/// Evaluates every item; results follow input order.
pub fn eval_suite<P: PrefixScorer + ?Sized>(scorer: &P, items: &[SuiteItem]) -> Result<(Vec<ItemResult>, SuiteSummary), EvalError> {
    let results = items.iter().map(|i| eval_item(scorer, i)).collect::<Result<Vec<_>, _>>()?;
    let summary = summarize_suite(&results);
    Ok((results, summary))
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MinimalPair {
    pub pair_id: String,
    pub grammatical: Vec<String>,
    pub ungrammatical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PairResult {
    pub pair_id: String,
    pub logp_grammatical: f64,
    pub logp_ungrammatical: f64,
    /// Strictly higher likelihood for the grammatical sentence.
    pub correct: bool,
}

pub fn eval_pair<P: PrefixScorer + ?Sized>(scorer: &P, pair: &MinimalPair) -> Result<PairResult, EvalError> {
    if pair.grammatical.is_empty() || pair.ungrammatical.is_empty() {
        return Err(EvalError::BadSuite(format!("{}: empty sentence", pair.pair_id)));
    }
    let full = |s: &[String]| -> Result<f64, EvalError> {
        let w: Vec<&str> = s.iter().map(String::as_str).collect();
        Ok(*scorer.prefix_logprobs(&w)?.last().expect("non-empty"))
    };
    let (g, u) = (full(&pair.grammatical)?, full(&pair.ungrammatical)?);
    Ok(PairResult {
        pair_id: pair.pair_id.clone(),
        logp_grammatical: g,
        logp_ungrammatical: u,
        correct: g > u,
    })
}

/// Fraction of correct results (0 for an empty list).
pub fn pair_accuracy(results: &[PairResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.correct).count() as f64 / results.len() as f64
}

pub fn eval_pairs<P: PrefixScorer + ?Sized>(scorer: &P, pairs: &[MinimalPair]) -> Result<(Vec<PairResult>, f64), EvalError> {
    let results = pairs.iter().map(|p| eval_pair(scorer, p)).collect::<Result<Vec<_>, _>>()?;
    let acc = pair_accuracy(&results);
    Ok((results, acc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Perplexity {
    /// Total negative log-likelihood (nats).
    pub nll: f64,
    pub words: usize,
    /// `exp(nll / words)`.
    pub perplexity: f64,
}

impl Perplexity {
    fn new(nll: f64, words: usize) -> Self {
        Perplexity {
            nll,
            words,
            perplexity: num_traits::Float::exp(nll / words.max(1) as f64),
        }
    }
}

/// `log p(actions)` under a joint model, BOS first, via one full forward.
pub fn joint_logprob<F: Float>(model: &Model<F>, vocab: &JointActionVocab, actions: &[Action]) -> Result<f64, EvalError> {
    let ids = vocab
        .encode_sequence(actions)
        .map_err(|e| EvalError::BadSuite(format!("{e}")))?;
    if ids.len() < 2 {
        return Ok(0.0);
    }
    let rows;
    let masks = if model.variant() == crate::model::Variant::PlmMask {
        rows = head_masks(actions).map_err(ModelError::from)?;
        HeadMasks::Rows(&rows[..ids.len() - 1])
    } else {
        HeadMasks::None
    };
    let lps = model.next_log_probs(&ids[..ids.len() - 1], masks)?;
    Ok(lps.iter().zip(&ids[1..]).map(|(r, &i)| r[i as usize]).sum())
}

/// Gold-parse perplexity of a joint model, normalised by word tokens.
pub fn perplexity_joint<F: Float>(
    model: &Model<F>,
    vocab: &JointActionVocab,
    gold: &[Vec<Action>],
) -> Result<Perplexity, EvalError> {
    if !model.variant().is_joint() {
        return Err(EvalError::Model(ModelError::VariantMismatch {
            variant: model.variant(),
            op: "gold-parse perplexity",
        }));
    }
    let mut nll = 0.0;
    let mut words = 0;
    for seq in gold {
        nll -= joint_logprob(model, vocab, seq)?;
        words += seq.iter().filter(|a| a.is_word()).count();
    }
    Ok(Perplexity::new(nll, words))
}

/// Word perplexity of a word-level model.
pub fn perplexity_words<F: Float>(model: &Model<F>, tokens: &TokenVocab, sentences: &[Vec<String>]) -> Result<Perplexity, EvalError> {
    if model.variant().is_joint() {
        return Err(EvalError::MissingGoldParse);
    }
    let mut nll = 0.0;
    let mut words = 0;
    for s in sentences {
        let ids: Vec<u32> = s.iter().map(|w| tokens.encode(w)).collect();
        nll -= word_logprobs(model, &ids)?.iter().sum::<f64>();
        words += ids.len();
    }
    Ok(Perplexity::new(nll, words))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    /// Uniform over `n` words at every step.
    struct Uniform(usize);

    impl PrefixScorer for Uniform {
        fn prefix_logprobs(&self, words: &[&str]) -> Result<Vec<f64>, EvalError> {
            let l = -num_traits::Float::ln(self.0 as f64);
            Ok((1..=words.len()).map(|k| k as f64 * l).collect())
        }

        fn unknown_words(&self, _: &[&str]) -> usize {
            0
        }
    }

    /// Likes sentences containing "good".
    struct Picky;

    impl PrefixScorer for Picky {
        fn prefix_logprobs(&self, words: &[&str]) -> Result<Vec<f64>, EvalError> {
            let mut acc = 0.0;
            Ok(words
                .iter()
                .map(|w| {
                    acc += if *w == "good" { -0.1 } else { -3.0 };
                    acc
                })
                .collect())
        }

        fn unknown_words(&self, _: &[&str]) -> usize {
            0
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    fn item(a: &str, b: &str) -> SuiteItem {
        let var = |name: &str, s: &str| SentenceVariant {
            name: name.into(),
            regions: vec![
                Region {
                    name: "prefix".into(),
                    tokens: toks("the dog"),
                },
                Region {
                    name: "verb".into(),
                    tokens: toks(s),
                },
            ],
        };
        SuiteItem {
            item_id: "i1".into(),
            suite: Some("agr".into()),
            variants: vec![var("match", a), var("mismatch", b)],
            conditions: vec![Condition {
                left: vec![Term {
                    variant: "match".into(),
                    region: "verb".into(),
                }],
                right: vec![Term {
                    variant: "mismatch".into(),
                    region: "verb".into(),
                }],
            }],
        }
    }

    #[test]
    fn identical_variants_fail_strict_inequality() {
        let r = eval_item(&Picky, &item("runs", "runs")).unwrap();
        assert!(!r.pass);
        assert_eq!(r.conditions[0].left, r.conditions[0].right);
    }

    #[test]
    fn preferred_variant_passes() {
        let r = eval_item(&Picky, &item("good", "bad")).unwrap();
        assert!(r.pass);
        assert!((r.regions["match.verb"] - 0.1 / core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn suite_validation() {
        let mut it = item("a", "b");
        it.conditions[0].left[0].region = "nope".into();
        assert!(matches!(eval_item(&Picky, &it), Err(EvalError::BadSuite(_))));
        let mut it = item("a", "b");
        it.variants[1].name = "match".into();
        assert!(it.validate().is_err());
    }

    #[test]
    fn macro_and_micro_accuracy() {
        let mk = |suite: &str, pass: bool| ItemResult {
            item_id: "x".into(),
            suite: Some(suite.into()),
            pass,
            conditions: vec![],
            regions: BTreeMap::new(),
            unknown_words: 0,
        };
        let s = summarize_suite(&[mk("a", true), mk("a", true), mk("a", false), mk("b", false)]);
        assert_eq!(s.micro_accuracy, 0.5);
        assert!((s.macro_accuracy - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn pairs_tie_counts_incorrect() {
        let p = MinimalPair {
            pair_id: "p".into(),
            grammatical: toks("the dog runs"),
            ungrammatical: toks("the dog runs"),
        };
        assert!(!eval_pair(&Uniform(7), &p).unwrap().correct);
        let q = MinimalPair {
            pair_id: "q".into(),
            grammatical: toks("good"),
            ungrammatical: toks("bad"),
        };
        let (res, acc) = eval_pairs(&Picky, &[p.clone(), q.clone()]).unwrap();
        assert_eq!(acc, 0.5);
        let (_, acc2) = eval_pairs(&Picky, &[q, p]).unwrap();
        assert_eq!(acc2, acc);
        assert_eq!(res.len(), 2);
    }
}
