//! Word-synchronous beam search over joint action sequences.
//!
//! Each word step expands the current beam in rounds. A round scores every
//! legal continuation of the frontier (all NT labels, REDUCE and
//! `GEN(next_word)`), sorts the candidates by joint log-probability (ties
//! broken by the lexicographic order of their action ids) and keeps the best
//! `action_beam`. Kept `GEN` candidates join the synchronized pool, kept
//! structural candidates form the next frontier. In addition the best
//! `fast_track` `GEN` candidates of every round enter the pool even if they
//! fell outside the action beam. Extending a hypothesis never raises its
//! score, so once the pool holds `word_beam` entries, frontier hypotheses
//! scoring no better than the `word_beam`-th pool entry are dropped. Rounds
//! stop when the frontier is empty or `max_struct_per_word` structural
//! actions have been taken since the last word; the best `word_beam` pool
//! entries form the next beam.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::model::{log_softmax, DecoderState, Model, ModelError, Variant};
use crate::transitions::{reconstruct, Action, ActionSequence, HeadMaskRow, LegalityConfig, ParserState, TransitionError};
use crate::tree::Tree;
use crate::tensor::Float;
use crate::vocab::{JointActionVocab, BOS};

#[derive(Debug, Clone, PartialEq)]
pub enum BeamError {
    /// No hypothesis could legally generate word `index` (0-based).
    BeamExhausted { index: usize },
    Config(&'static str),
    Model(ModelError),
    Transition(TransitionError),
    /// A log-probability was NaN.
    Numeric,
}

impl fmt::Display for BeamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeamError::BeamExhausted { index } => write!(f, "beam exhausted at word {index}"),
            BeamError::Config(m) => write!(f, "invalid beam configuration: {m}"),
            BeamError::Model(e) => write!(f, "{e}"),
            BeamError::Transition(e) => write!(f, "{e}"),
            BeamError::Numeric => f.write_str("NaN log-probability"),
        }
    }
}

impl From<ModelError> for BeamError {
    fn from(e: ModelError) -> Self {
        BeamError::Model(e)
    }
}

impl From<TransitionError> for BeamError {
    fn from(e: TransitionError) -> Self {
        BeamError::Transition(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BeamConfig {
    pub action_beam: usize,
    pub word_beam: usize,
    pub fast_track: usize,
    pub max_struct_per_word: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            action_beam: 100,
            word_beam: 10,
            fast_track: 5,
            max_struct_per_word: 16,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), BeamError> {
        if self.word_beam == 0 {
            return Err(BeamError::Config("word_beam must be positive"));
        }
        if self.fast_track > self.word_beam || self.word_beam > self.action_beam {
            return Err(BeamError::Config("need fast_track <= word_beam <= action_beam"));
        }
        Ok(())
    }
}

/// Source of next-action distributions over a joint action vocabulary.
pub trait JointScorer {
    type State: Clone;

    fn vocab(&self) -> &JointActionVocab;

    /// Longest scorable sequence, BOS included.
    fn max_len(&self) -> usize;

    fn legality(&self) -> LegalityConfig {
        LegalityConfig::default()
    }

    /// Consumes `id` after `state` (`None` before BOS) and returns the new
    /// state with natural-log probabilities of every next action.
    /// `window` is the innermost open constituent after consuming `id`.
    fn advance(&self, state: Option<&Self::State>, id: u32, window: Option<usize>) -> Result<(Self::State, Vec<f64>), BeamError>;
}

/// A joint model scored through its incremental decoder.
pub struct PlmScorer<'m, F: Float> {
    model: &'m Model<F>,
    vocab: &'m JointActionVocab,
    legality: LegalityConfig,
}

impl<'m, F: Float> PlmScorer<'m, F> {
    pub fn new(model: &'m Model<F>, vocab: &'m JointActionVocab) -> Result<Self, BeamError> {
        if !model.variant().is_joint() {
            return Err(BeamError::Model(ModelError::VariantMismatch {
                variant: model.variant(),
                op: "beam search",
            }));
        }
        if model.config().vocab_size != vocab.len() {
            return Err(BeamError::Config("model and vocabulary sizes differ"));
        }
        Ok(PlmScorer {
            model,
            vocab,
            legality: LegalityConfig::default(),
        })
    }

    pub fn with_legality(mut self, legality: LegalityConfig) -> Self {
        self.legality = legality;
        self
    }
}

impl<F: Float> JointScorer for PlmScorer<'_, F> {
    type State = DecoderState<F>;

    fn vocab(&self) -> &JointActionVocab {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.model.config().max_len
    }

    fn legality(&self) -> LegalityConfig {
        self.legality
    }

    fn advance(&self, state: Option<&Self::State>, id: u32, window: Option<usize>) -> Result<(Self::State, Vec<f64>), BeamError> {
        let fresh;
        let state = match state {
            Some(s) => s,
            None => {
                fresh = self.model.start_incremental();
                &fresh
            }
        };
        let row = (self.model.variant() == Variant::PlmMask).then(|| HeadMaskRow::new(state.len() + 1, window));
        let (next, logits) = self.model.step(state, id, row.as_ref())?;
        Ok((next, log_softmax(&logits)))
    }
}

/// A partial joint sequence with its score and decoder cache.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Action ids, BOS first.
    pub ids: Vec<u32>,
    pub parser: ParserState,
    /// Natural-log joint probability of `ids`.
    pub logp: f64,
    state: S,
    next: Arc<Vec<f64>>,
}

impl<S> Hypothesis<S> {
    pub fn actions(&self, vocab: &JointActionVocab) -> ActionSequence {
        ActionSequence::new(self.ids.iter().filter_map(|&i| vocab.decode(i)).collect())
    }

    /// Log-probabilities of every next action.
    pub fn next_logprobs(&self) -> &[f64] {
        &self.next
    }
}

struct Candidate<S> {
    parent: Arc<Hypothesis<S>>,
    id: u32,
    logp: f64,
    is_gen: bool,
}

fn seq_cmp<S>(a: &Candidate<S>, b: &Candidate<S>) -> Ordering {
    let sa = a.parent.ids.iter().chain(core::iter::once(&a.id));
    let sb = b.parent.ids.iter().chain(core::iter::once(&b.id));
    sa.cmp(sb)
}

fn candidate_order<S>(a: &Candidate<S>, b: &Candidate<S>) -> Ordering {
    b.logp.total_cmp(&a.logp).then_with(|| seq_cmp(a, b))
}

fn action_of(vocab: &JointActionVocab, id: u32, word: &str) -> Action {
    if vocab.is_word_id(id) {
        Action::Gen(word.into())
    } else {
        vocab.decode(id).expect("structural id in range")
    }
}

fn materialize<J: JointScorer>(scorer: &J, c: &Candidate<J::State>, word: &str) -> Result<Hypothesis<J::State>, BeamError> {
    let p = &c.parent;
    let action = action_of(scorer.vocab(), c.id, word);
    let parser = p.parser.apply(&action, &scorer.legality())?;
    let (state, next) = scorer.advance(Some(&p.state), c.id, parser.stack_window_start())?;
    let mut ids = p.ids.clone();
    ids.push(c.id);
    Ok(Hypothesis {
        ids,
        parser,
        logp: c.logp,
        state,
        next: Arc::new(next),
    })
}

/// The beam before any word: just BOS.
pub fn initial_beam<J: JointScorer>(scorer: &J) -> Result<Vec<Hypothesis<J::State>>, BeamError> {
    let (state, next) = scorer.advance(None, BOS, None)?;
    Ok(vec![Hypothesis {
        ids: vec![BOS],
        parser: ParserState::new(),
        logp: 0.0,
        state,
        next: Arc::new(next),
    }])
}

/// Advances every hypothesis of `beam` until it has generated `word`.
/// `index` is only used for error reporting.
pub fn word_sync_step<J: JointScorer>(
    scorer: &J,
    beam: Vec<Hypothesis<J::State>>,
    word: &str,
    index: usize,
    config: &BeamConfig,
) -> Result<Vec<Hypothesis<J::State>>, BeamError> {
    config.validate()?;
    let vocab = scorer.vocab();
    let legality = scorer.legality();
    let word_id = vocab.tokens().encode(word);
    let reduce = vocab.reduce_id();
    let mut frontier: Vec<Arc<Hypothesis<J::State>>> = beam.into_iter().map(Arc::new).collect();
    let mut pool: Vec<Candidate<J::State>> = Vec::new();

    let mut round = 0;
    while !frontier.is_empty() {
        let structural_ok = round < config.max_struct_per_word;
        let mut cands: Vec<Candidate<J::State>> = Vec::new();
        for h in &frontier {
            if h.ids.len() >= scorer.max_len() {
                continue;
            }
            let kinds = h.parser.legal_actions(&legality);
            let mut push = |id: u32, is_gen: bool| -> Result<(), BeamError> {
                let lp = h.next[id as usize];
                if lp.is_nan() {
                    return Err(BeamError::Numeric);
                }
                if lp != f64::NEG_INFINITY {
                    cands.push(Candidate {
                        parent: h.clone(),
                        id,
                        logp: h.logp + lp,
                        is_gen,
                    });
                }
                Ok(())
            };
            if kinds.gen {
                push(word_id, true)?;
            }
            if structural_ok {
                if kinds.nt {
                    for id in vocab.nt_ids() {
                        push(id, false)?;
                    }
                }
                if kinds.reduce {
                    push(reduce, false)?;
                }
            }
        }
        cands.sort_by(candidate_order);

        let mut next_frontier = Vec::new();
        let mut fast = 0;
        for (rank, c) in cands.into_iter().enumerate() {
            let in_beam = rank < config.action_beam;
            if c.is_gen {
                if in_beam || fast < config.fast_track {
                    pool.push(c);
                }
                fast += 1;
            } else if in_beam {
                next_frontier.push(c);
            }
        }
        if pool.len() >= config.word_beam {
            pool.sort_by(candidate_order);
            pool.truncate(config.word_beam);
            let floor = pool[config.word_beam - 1].logp;
            next_frontier.retain(|c| c.logp > floor);
        }
        frontier = next_frontier
            .iter()
            .map(|c| materialize(scorer, c, word).map(Arc::new))
            .collect::<Result<_, _>>()?;
        round += 1;
    }

    if pool.is_empty() {
        return Err(BeamError::BeamExhausted { index });
    }
    pool.sort_by(candidate_order);
    pool.truncate(config.word_beam);
    pool.iter().map(|c| materialize(scorer, c, word)).collect()
}

/// `log Σ exp(x)`, stable; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.iter().map(|x| num_traits::Float::exp(x - max)).sum();
    max + num_traits::Float::ln(s)
}

/// Runs the search over `words`; returns the beam log-marginal after every
/// word together with the final beam.
pub fn run_beam<J: JointScorer, W: AsRef<str>>(
    scorer: &J,
    words: &[W],
    config: &BeamConfig,
) -> Result<(Vec<f64>, Vec<Hypothesis<J::State>>), BeamError> {
    config.validate()?;
    let mut beam = initial_beam(scorer)?;
    let mut marginals = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        beam = word_sync_step(scorer, beam, w.as_ref(), i, config)?;
        let lps: Vec<f64> = beam.iter().map(|h| h.logp).collect();
        marginals.push(log_sum_exp(&lps));
    }
    Ok((marginals, beam))
}

/// Beam approximation of `log p(w_1..w_t)` for every `t`.
pub fn marginal_logprob<J: JointScorer, W: AsRef<str>>(scorer: &J, words: &[W], config: &BeamConfig) -> Result<Vec<f64>, BeamError> {
    if words.is_empty() {
        return Err(BeamError::BeamExhausted { index: 0 });
    }
    Ok(run_beam(scorer, words, config)?.0)
}

/// Surprisal in bits of `continuation` given `prefix`.
pub fn surprisal<J: JointScorer, W: AsRef<str>>(
    scorer: &J,
    prefix: &[W],
    continuation: &[W],
    config: &BeamConfig,
) -> Result<f64, BeamError> {
    if continuation.is_empty() {
        return Err(BeamError::Config("empty continuation"));
    }
    let all: Vec<&str> = prefix.iter().chain(continuation).map(AsRef::as_ref).collect();
    let m = marginal_logprob(scorer, &all, config)?;
    let before = if prefix.is_empty() { 0.0 } else { m[prefix.len() - 1] };
    Ok(-(m[all.len() - 1] - before) / core::f64::consts::LN_2)
}

/// A completed parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Parse {
    pub tree: Tree,
    pub actions: ActionSequence,
    /// Joint log-probability of the completed sequence.
    pub logp: f64,
}

/// Parses `words`: every final hypothesis is closed with REDUCEs (their
/// log-probabilities included) and the best completion wins.
pub fn parse<J: JointScorer, W: AsRef<str>>(scorer: &J, words: &[W], config: &BeamConfig) -> Result<Parse, BeamError> {
    if words.is_empty() {
        return Err(BeamError::BeamExhausted { index: 0 });
    }
    let (_, beam) = run_beam(scorer, words, config)?;
    let vocab = scorer.vocab();
    let reduce = vocab.reduce_id();
    let legality = scorer.legality();
    let mut best: Option<(f64, Vec<u32>)> = None;
    for h in beam {
        let mut h = h;
        let mut ok = true;
        while !h.parser.is_complete() {
            if h.ids.len() >= scorer.max_len() || !h.parser.legal_actions(&legality).reduce {
                ok = false;
                break;
            }
            let logp = h.logp + h.next[reduce as usize];
            let parser = h.parser.apply(&Action::Reduce, &legality)?;
            let mut ids = h.ids.clone();
            ids.push(reduce);
            let (state, next) = if parser.is_complete() {
                (h.state.clone(), Arc::new(Vec::new()))
            } else {
                let (s, n) = scorer.advance(Some(&h.state), reduce, parser.stack_window_start())?;
                (s, Arc::new(n))
            };
            h = Hypothesis {
                ids,
                parser,
                logp,
                state,
                next,
            };
        }
        if !ok || h.logp == f64::NEG_INFINITY {
            continue;
        }
        let better = match &best {
            None => true,
            Some((lp, ids)) => h.logp > *lp || (h.logp == *lp && h.ids < *ids),
        };
        if better {
            best = Some((h.logp, h.ids));
        }
    }
    let (logp, ids) = best.ok_or(BeamError::BeamExhausted { index: words.len() - 1 })?;
    let mut actions = Vec::with_capacity(ids.len());
    let mut w = words.iter();
    for &id in &ids {
        actions.push(if vocab.is_word_id(id) {
            Action::Gen(w.next().expect("one GEN per word").as_ref().into())
        } else {
            vocab.decode(id).expect("valid id")
        });
    }
    let tree = reconstruct(&actions)?;
    Ok(Parse {
        tree,
        actions: ActionSequence::new(actions),
        logp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::TokenVocab;
    use alloc::string::ToString;

    /// Puts all mass on one fixed action sequence.
    struct Deterministic {
        vocab: JointActionVocab,
        script: Vec<u32>,
    }

    impl JointScorer for Deterministic {
        type State = usize;

        fn vocab(&self) -> &JointActionVocab {
            &self.vocab
        }

        fn max_len(&self) -> usize {
            16
        }

        fn advance(&self, state: Option<&usize>, _id: u32, _w: Option<usize>) -> Result<(usize, Vec<f64>), BeamError> {
            let pos = state.map_or(0, |s| s + 1);
            let mut lp = vec![f64::NEG_INFINITY; self.vocab.len()];
            if let Some(&next) = self.script.get(pos + 1) {
                lp[next as usize] = 0.0;
            }
            Ok((pos, lp))
        }
    }

    fn det() -> Deterministic {
        let tokens = TokenVocab::from_words(["The", "birds", "sang"], 1).unwrap();
        let vocab = JointActionVocab::new(tokens, ["S", "NP", "VP"]);
        let acts = ActionSequence::from_line("NT(S) NT(NP) GEN(The) GEN(birds) REDUCE NT(VP) GEN(sang) REDUCE REDUCE").unwrap();
        let script = vocab.encode_sequence(&acts).unwrap();
        Deterministic { vocab, script }
    }

    #[test]
    fn deterministic_model_gives_single_certain_hypothesis() {
        let s = det();
        let words = ["The", "birds", "sang"];
        let (m, beam) = run_beam(&s, &words, &BeamConfig::default()).unwrap();
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].logp, 0.0);
        assert_eq!(m, vec![0.0; 3]);
        let p = parse(&s, &words, &BeamConfig::default()).unwrap();
        assert_eq!(p.tree.to_string(), "(S (NP The birds) (VP sang))");
        assert_eq!(p.logp, 0.0);
    }

    /// Gives the scripted next action 0.9 and spreads the rest evenly.
    struct Preferring(Deterministic);

    impl JointScorer for Preferring {
        type State = Vec<u32>;

        fn vocab(&self) -> &JointActionVocab {
            &self.0.vocab
        }

        fn max_len(&self) -> usize {
            16
        }

        fn advance(&self, state: Option<&Vec<u32>>, id: u32, _w: Option<usize>) -> Result<(Vec<u32>, Vec<f64>), BeamError> {
            let mut ids = state.cloned().unwrap_or_default();
            ids.push(id);
            let n = self.0.vocab.len();
            let on_script = self.0.script.starts_with(&ids) && ids.len() < self.0.script.len();
            let lp = if on_script {
                let mut lp = vec![num_traits::Float::ln(0.1 / (n - 1) as f64); n];
                lp[self.0.script[ids.len()] as usize] = num_traits::Float::ln(0.9);
                lp
            } else {
                vec![-num_traits::Float::ln(n as f64); n]
            };
            Ok((ids, lp))
        }
    }

    #[test]
    fn structural_detours_beat_an_early_full_pool() {
        let s = Preferring(det());
        let cfg = BeamConfig {
            action_beam: 10,
            word_beam: 1,
            fast_track: 0,
            max_struct_per_word: 16,
        };
        let p = parse(&s, &["The", "birds", "sang"], &cfg).unwrap();
        assert_eq!(p.tree.to_string(), "(S (NP The birds) (VP sang))");
        assert!((p.logp - 9.0 * num_traits::Float::ln(0.9)).abs() < 1e-12);
    }

    #[test]
    fn impossible_word_exhausts_beam() {
        let s = det();
        assert_eq!(
            run_beam(&s, &["The", "sang"], &BeamConfig::default()).err(),
            Some(BeamError::BeamExhausted { index: 1 })
        );
    }

    #[test]
    fn config_invariants() {
        assert!(BeamConfig::default().validate().is_ok());
        let bad = BeamConfig {
            fast_track: 11,
            ..BeamConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BeamConfig {
            word_beam: 200,
            ..BeamConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + core::f64::consts::LN_2)).abs() < 1e-12);
    }
}
