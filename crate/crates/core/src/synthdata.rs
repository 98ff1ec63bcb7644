//! Seeded toy grammars, corpus sampling and exhaustive enumeration.
//!
//! Nonterminal naming conventions:
//!
//! * `X@tag` is a distinct nonterminal whose tree node is labelled `X`, so
//!   feature-split categories (`NP@sg`, `NP@pl`) render with plain labels.
//! * `_X` is a preterminal macro: its expansion is spliced into the parent
//!   without creating a node.
//!
//! Every symbol that is never a left-hand side is a terminal.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beam::{BeamError, JointScorer};
use crate::eval::MinimalPair;
use crate::transitions::{Action, ParserState};
use crate::tree::Tree;
use crate::vocab::{BOS, PAD};

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    /// Probabilities of the rules for `lhs` do not sum to one.
    BadProbabilities { lhs: String },
    NoRules { symbol: String },
    /// Nearly every derivation exceeded the depth cap.
    ImproperGrammar,
    TooLarge(&'static str),
    Beam(BeamError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadProbabilities { lhs } => write!(f, "rule probabilities for {lhs} do not sum to 1"),
            SynthError::NoRules { symbol } => write!(f, "no rules for {symbol}"),
            SynthError::ImproperGrammar => f.write_str("grammar rejected more than 99% of derivations at the depth cap"),
            SynthError::TooLarge(m) => write!(f, "enumeration too large: {m}"),
            SynthError::Beam(e) => write!(f, "{e}"),
        }
    }
}

impl From<BeamError> for SynthError {
    fn from(e: BeamError) -> Self {
        SynthError::Beam(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: String,
    pub rhs: Vec<String>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPCFG {
    pub rules: Vec<Rule>,
    pub start: String,
    pub seed: u64,
    pub max_depth: usize,
}

fn rule(lhs: &str, rhs: &str, prob: f64) -> Rule {
    Rule {
        lhs: lhs.into(),
        rhs: rhs.split_whitespace().map(String::from).collect(),
        prob,
    }
}

fn uniform(lhs: &str, alternatives: &[&str]) -> Vec<Rule> {
    let p = 1.0 / alternatives.len() as f64;
    alternatives.iter().map(|a| rule(lhs, a, p)).collect()
}

impl ToyPCFG {
    pub fn new(rules: Vec<Rule>, start: &str, seed: u64) -> Result<Self, SynthError> {
        let g = ToyPCFG {
            rules,
            start: start.into(),
            seed,
            max_depth: 32,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        for r in &self.rules {
            *sums.entry(&r.lhs).or_default() += r.prob;
            if r.rhs.is_empty() || r.prob < 0.0 {
                return Err(SynthError::BadProbabilities { lhs: r.lhs.clone() });
            }
        }
        if !sums.contains_key(self.start.as_str()) {
            return Err(SynthError::NoRules { symbol: self.start.clone() });
        }
        for (lhs, s) in sums {
            if (s - 1.0).abs() > 1e-9 {
                return Err(SynthError::BadProbabilities { lhs: lhs.into() });
            }
        }
        Ok(())
    }

    fn is_nonterminal(&self, s: &str) -> bool {
        self.rules.iter().any(|r| r.lhs == s)
    }

    /// One derivation, or `None` when it exceeds the depth cap.
    fn derive(&self, symbol: &str, depth: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Tree>> {
        if depth > self.max_depth {
            return None;
        }
        if !self.is_nonterminal(symbol) {
            return Some(vec![Tree::leaf(symbol)]);
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let candidates: Vec<&Rule> = self.rules.iter().filter(|r| r.lhs == symbol).collect();
        let mut chosen = candidates[candidates.len() - 1];
        for r in &candidates {
            acc += r.prob;
            if u < acc {
                chosen = r;
                break;
            }
        }
        let mut children = Vec::new();
        for s in &chosen.rhs {
            children.extend(self.derive(s, depth + 1, rng)?);
        }
        if symbol.starts_with('_') {
            Some(children)
        } else {
            let label = symbol.split('@').next().unwrap_or(symbol);
            Some(vec![Tree::node(label, children)])
        }
    }
}

/// `n` i.i.d. trees, deterministic in the grammar's seed.
pub fn sample_corpus(grammar: &ToyPCFG, n: usize) -> Result<Vec<Tree>, SynthError> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(grammar.seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut accepted = None;
        for _ in 0..100 {
            if let Some(mut t) = grammar.derive(&grammar.start, 0, &mut rng) {
                if t.len() == 1 && !t[0].is_leaf() {
                    accepted = t.pop();
                    break;
                }
            }
        }
        out.push(accepted.ok_or(SynthError::ImproperGrammar)?);
    }
    Ok(out)
}

/// Two labels (`S`, `X`) and three words:
///
/// ```text
/// S -> a X (0.4) | X b (0.3) | c (0.3)
/// X -> a (0.5) | b c (0.5)
/// ```
///
/// Every oracle has at most 7 actions after BOS.
pub fn toy_grammar(seed: u64) -> ToyPCFG {
    ToyPCFG::new(
        vec![
            rule("S", "a X", 0.4),
            rule("S", "X b", 0.3),
            rule("S", "c", 0.3),
            rule("X", "a", 0.5),
            rule("X", "b c", 0.5),
        ],
        "S",
        seed,
    )
    .expect("valid toy grammar")
}

pub const SG_NOUNS: [&str; 5] = ["dog", "cat", "bird", "author", "pilot"];
pub const PL_NOUNS: [&str; 5] = ["dogs", "cats", "birds", "authors", "pilots"];
pub const SG_VERBS: [&str; 4] = ["runs", "sleeps", "sings", "laughs"];
pub const PL_VERBS: [&str; 4] = ["run", "sleep", "sing", "laugh"];
pub const PREPOSITIONS: [&str; 3] = ["near", "behind", "with"];
pub const ADJECTIVES: [&str; 3] = ["old", "small", "happy"];

/// Subject-verb agreement with prepositional attractors:
///
/// ```text
/// S      -> NP@sg VP@sg (0.5) | NP@pl VP@pl (0.5)
/// NP@sg  -> the _Nsg (0.45) | the _Adj _Nsg (0.15) | the _Nsg PP (0.4)
/// NP@pl  -> the _Npl (0.45) | the _Adj _Npl (0.15) | the _Npl PP (0.4)
/// PP     -> _P NP@obj
/// NP@obj -> the _Nsg (0.5) | the _Npl (0.5)
/// VP@sg  -> _Vsg (0.6) | _Vsg PP (0.4)
/// VP@pl  -> _Vpl (0.6) | _Vpl PP (0.4)
/// ```
///
/// `_Nsg`, `_Npl`, `_Vsg`, `_Vpl`, `_P` and `_Adj` pick uniformly from the
/// word lists above. Nodes are labelled `S`, `NP`, `VP` and `PP`.
pub fn agreement_grammar(seed: u64) -> ToyPCFG {
    let mut rules = vec![rule("S", "NP@sg VP@sg", 0.5), rule("S", "NP@pl VP@pl", 0.5)];
    for n in ["sg", "pl"] {
        let np = alloc::format!("NP@{n}");
        let noun = alloc::format!("_N{n}");
        let vp = alloc::format!("VP@{n}");
        let verb = alloc::format!("_V{n}");
        rules.push(rule(&np, &alloc::format!("the {noun}"), 0.45));
        rules.push(rule(&np, &alloc::format!("the _Adj {noun}"), 0.15));
        rules.push(rule(&np, &alloc::format!("the {noun} PP"), 0.4));
        rules.push(rule(&vp, &verb, 0.6));
        rules.push(rule(&vp, &alloc::format!("{verb} PP"), 0.4));
    }
    rules.push(rule("PP", "_P NP@obj", 1.0));
    rules.push(rule("NP@obj", "the _Nsg", 0.5));
    rules.push(rule("NP@obj", "the _Npl", 0.5));
    rules.extend(uniform("_Nsg", &SG_NOUNS));
    rules.extend(uniform("_Npl", &PL_NOUNS));
    rules.extend(uniform("_Vsg", &SG_VERBS));
    rules.extend(uniform("_Vpl", &PL_VERBS));
    rules.extend(uniform("_P", &PREPOSITIONS));
    rules.extend(uniform("_Adj", &ADJECTIVES));
    ToyPCFG::new(rules, "S", seed).expect("valid agreement grammar")
}

/// Long sentences of `clauses` coordinated clauses, each
/// `(CL (NP the N) (VP V (NP the N)))`; the oracle has `13 * clauses + 2`
/// actions after BOS.
pub fn clause_chain_grammar(clauses: usize, seed: u64) -> ToyPCFG {
    let body: Vec<&str> = vec!["CL"; clauses];
    let mut rules = vec![rule("S", &body.join(" "), 1.0)];
    rules.push(rule("CL", "NP VP", 1.0));
    rules.push(rule("NP", "the _N", 1.0));
    rules.push(rule("VP", "_V NP", 1.0));
    let nouns: Vec<&str> = SG_NOUNS.iter().chain(&PL_NOUNS).copied().collect();
    let verbs = ["sees", "chases", "likes", "follows", "greets", "helps"];
    rules.extend(uniform("_N", &nouns));
    rules.extend(uniform("_V", &verbs));
    ToyPCFG::new(rules, "S", seed).expect("valid clause grammar")
}

/// Subject number of an agreement sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Number {
    Singular,
    Plural,
}

fn flip_verb(w: &str) -> Option<(&'static str, Number)> {
    if let Some(i) = SG_VERBS.iter().position(|v| *v == w) {
        return Some((PL_VERBS[i], Number::Singular));
    }
    PL_VERBS
        .iter()
        .position(|v| *v == w)
        .map(|i| (SG_VERBS[i], Number::Plural))
}

/// The main-verb number flip of an agreement-grammar tree.
pub fn agreement_pair(tree: &Tree) -> Option<(Vec<String>, Vec<String>, Number)> {
    let Tree::Node { children, .. } = tree else { return None };
    let vp = children.iter().find(|c| c.label() == Some("VP"))?;
    let Tree::Node { children: vpc, .. } = vp else { return None };
    let Tree::Leaf(verb) = vpc.first()? else { return None };
    let (flipped, number) = flip_verb(verb)?;
    let words: Vec<String> = tree.words().into_iter().map(String::from).collect();
    let np_len = children.first()?.words().len();
    let mut bad = words.clone();
    bad[np_len] = flipped.to_string();
    Some((words, bad, number))
}

/// `n` (even) held-out agreement minimal pairs, half with singular and half
/// with plural subjects, sampled with `seed` and skipping any sentence in
/// `exclude`.
pub fn agreement_pairs(n: usize, seed: u64, exclude: &BTreeSet<Vec<String>>) -> Result<Vec<MinimalPair>, SynthError> {
    let mut g = agreement_grammar(seed);
    let mut out = Vec::with_capacity(n);
    let (mut sg, mut pl) = (0, 0);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 1) {
            return Err(SynthError::ImproperGrammar);
        }
        let t = sample_corpus(&g, 1)?.pop().expect("one tree");
        g.seed = g.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let Some((good, bad, number)) = agreement_pair(&t) else { continue };
        if exclude.contains(&good) || !seen.insert(good.clone()) {
            continue;
        }
        let slot = match number {
            Number::Singular => &mut sg,
            Number::Plural => &mut pl,
        };
        if *slot >= n / 2 + n % 2 {
            continue;
        }
        *slot += 1;
        out.push(MinimalPair {
            pair_id: alloc::format!("agr-{:04}", out.len()),
            grammatical: good,
            ungrammatical: bad,
        });
    }
    Ok(out)
}

/// Every legal joint sequence of a scorer up to a length cap, with its
/// probability, stored as a prefix tree.
#[derive(Debug, Clone)]
pub struct JointTable {
    nodes: Vec<Node>,
    /// Word-prefix trie: `(parent trie node, word id) -> trie node`.
    trie: BTreeMap<(u32, u32), u32>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    parent: u32,
    id: u32,
    logp: f64,
    complete: bool,
    is_gen: bool,
    /// Trie node of the words generated so far.
    words: u32,
    len: u8,
}

const ROOT: u32 = u32::MAX;

/// Enumerates every legal action sequence of at most `max_len` actions after
/// BOS. Caps: at most 8 generatable joint symbols (every id except PAD and
/// BOS) and `max_len <= 10`.
pub fn enumerate_joint<J: JointScorer>(scorer: &J, max_len: usize) -> Result<JointTable, SynthError> {
    let vocab = scorer.vocab();
    if vocab.len() - 2 > 8 {
        return Err(SynthError::TooLarge("more than 8 joint symbols"));
    }
    if max_len > 10 {
        return Err(SynthError::TooLarge("max_len above 10"));
    }
    if max_len + 1 > scorer.max_len() {
        return Err(SynthError::TooLarge("max_len exceeds the scorer's context"));
    }
    let legality = scorer.legality();
    let word_ids: Vec<u32> = (0..vocab.tokens().len() as u32).filter(|&i| i != PAD && i != BOS).collect();
    let mut table = JointTable {
        nodes: Vec::new(),
        trie: BTreeMap::new(),
    };
    let (state, next) = scorer.advance(None, BOS, None)?;
    // (node index or ROOT, parser, scorer state, next log-probs)
    let mut stack = vec![(ROOT, ParserState::new(), state, next)];
    while let Some((at, parser, state, next)) = stack.pop() {
        let (logp, words, len) = match at {
            ROOT => (0.0, 0, 0),
            i => {
                let n = table.nodes[i as usize];
                (n.logp, n.words, n.len as usize)
            }
        };
        if len >= max_len {
            continue;
        }
        let kinds = parser.legal_actions(&legality);
        let mut moves: Vec<(u32, Action)> = Vec::new();
        if kinds.nt {
            moves.extend(vocab.nt_ids().map(|i| (i, vocab.decode(i).expect("label"))));
        }
        if kinds.reduce {
            moves.push((vocab.reduce_id(), Action::Reduce));
        }
        if kinds.gen {
            moves.extend(word_ids.iter().map(|&i| (i, Action::Gen(String::new()))));
        }
        for (id, action) in moves {
            let lp = next[id as usize];
            if lp.is_nan() {
                return Err(SynthError::Beam(BeamError::Numeric));
            }
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let child_parser = parser.apply(&action, &legality).expect("legal move");
            let is_gen = action.is_word();
            let child_words = if is_gen {
                let next_trie = table.trie.len() as u32 + 1;
                *table.trie.entry((words, id)).or_insert(next_trie)
            } else {
                words
            };
            let idx = table.nodes.len() as u32;
            table.nodes.push(Node {
                parent: at,
                id,
                logp: logp + lp,
                complete: child_parser.is_complete(),
                is_gen,
                words: child_words,
                len: (len + 1) as u8,
            });
            if len + 1 < max_len && !child_parser.is_complete() {
                let (s, n) = scorer.advance(Some(&state), id, child_parser.stack_window_start())?;
                stack.push((idx, child_parser, s, n));
            }
        }
    }
    Ok(table)
}

impl JointTable {
    /// Number of enumerated prefixes (BOS excluded).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn trie_of(&self, word_ids: &[u32]) -> Option<u32> {
        let mut at = 0;
        for &w in word_ids {
            at = *self.trie.get(&(at, w))?;
        }
        Some(at)
    }

    /// Action ids of node `i`, BOS first.
    fn ids(&self, mut i: u32) -> Vec<u32> {
        let mut out = Vec::new();
        while i != ROOT {
            let n = self.nodes[i as usize];
            out.push(n.id);
            i = n.parent;
        }
        out.push(BOS);
        out.reverse();
        out
    }

    /// Every complete sequence (action ids, BOS first) with its log-probability.
    pub fn complete(&self) -> impl Iterator<Item = (Vec<u32>, f64)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.complete)
            .map(|(i, n)| (self.ids(i as u32), n.logp))
    }

    /// Σ p(Y) over complete sequences.
    pub fn total_complete(&self) -> f64 {
        self.nodes.iter().filter(|n| n.complete).map(|n| libm_exp(n.logp)).sum()
    }

    /// Mass of incomplete prefixes cut off at the length cap.
    pub fn truncated_mass(&self, max_len: usize) -> f64 {
        self.nodes
            .iter()
            .filter(|n| !n.complete && n.len as usize == max_len)
            .map(|n| libm_exp(n.logp))
            .sum()
    }

    /// Exact `p(w_1..w_t)`: the mass of every enumerated prefix ending in
    /// `GEN(w_t)` after generating exactly these words.
    pub fn prefix_prob(&self, word_ids: &[u32]) -> f64 {
        let Some(t) = self.trie_of(word_ids) else { return 0.0 };
        if word_ids.is_empty() {
            return 1.0;
        }
        self.nodes.iter().filter(|n| n.is_gen && n.words == t).map(|n| libm_exp(n.logp)).sum()
    }

    /// Exact `p(W) = Σ_Y p(Y, W)` over complete sequences with yield `W`.
    pub fn sentence_prob(&self, word_ids: &[u32]) -> f64 {
        let Some(t) = self.trie_of(word_ids) else { return 0.0 };
        self.nodes.iter().filter(|n| n.complete && n.words == t).map(|n| libm_exp(n.logp)).sum()
    }

    /// Most probable complete sequence with yield `W` (ties: smallest ids).
    pub fn best_parse(&self, word_ids: &[u32]) -> Option<(Vec<u32>, f64)> {
        let t = self.trie_of(word_ids)?;
        let mut best: Option<(Vec<u32>, f64)> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            if !(n.complete && n.words == t) {
                continue;
            }
            let ids = self.ids(i as u32);
            let better = match &best {
                None => true,
                Some((b, lp)) => n.logp > *lp || (n.logp == *lp && ids < *b),
            };
            if better {
                best = Some((ids, n.logp));
            }
        }
        best
    }

    /// Log-probability of one sequence (BOS first), if it was enumerated.
    pub fn sequence_logp(&self, ids: &[u32]) -> Option<f64> {
        // Linear scan; tables are small.
        self.nodes
            .iter()
            .enumerate()
            .find(|(i, n)| n.len as usize + 1 == ids.len() && self.ids(*i as u32) == ids)
            .map(|(_, n)| n.logp)
    }

    /// Number of distinct prefixes of each length (index 0 = BOS only).
    pub fn prefix_counts(&self) -> Vec<usize> {
        let mut counts = vec![1usize];
        for n in &self.nodes {
            let l = n.len as usize;
            if counts.len() <= l {
                counts.resize(l + 1, 0);
            }
            counts[l] += 1;
        }
        counts
    }
}

fn libm_exp(x: f64) -> f64 {
    num_traits::Float::exp(x)
}

/// Trees of a corpus as action oracles, for convenience in tests and tools.
pub fn oracles(trees: &[Tree]) -> Vec<crate::transitions::ActionSequence> {
    trees.iter().map(crate::transitions::oracle).collect()
}
