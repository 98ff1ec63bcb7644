//! Word, joint-action and scaffold n-gram vocabularies.
//!
//! All three serialize to `id<TAB>surface` lines with ids `0..n` in order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::transitions::{Action, ActionSequence, SyncSegment};
use crate::tree::Tree;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
/// Empty scaffold n-gram.
pub const BLANK: u32 = 1;

pub const PAD_SURFACE: &str = "<pad>";
pub const UNK_SURFACE: &str = "<unk>";
pub const BOS_SURFACE: &str = "<bos>";
pub const BLANK_SURFACE: &str = "<blank>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VocabError {
    EmptyCorpus,
    /// A vocabulary file line that is malformed or out of sequence.
    BadLine { line: usize },
    Duplicate { line: usize },
    UnknownLabel(String),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::EmptyCorpus => f.write_str("empty corpus"),
            VocabError::BadLine { line } => write!(f, "malformed vocabulary line {line}"),
            VocabError::Duplicate { line } => write!(f, "duplicate vocabulary entry on line {line}"),
            VocabError::UnknownLabel(l) => write!(f, "nonterminal {l:?} is not in the vocabulary"),
        }
    }
}

fn to_lines<'a>(surfaces: impl Iterator<Item = &'a str>) -> String {
    let mut s = String::new();
    for (i, w) in surfaces.enumerate() {
        s.push_str(&i.to_string());
        s.push('\t');
        s.push_str(w);
        s.push('\n');
    }
    s
}

fn from_lines(text: &str) -> Result<Vec<String>, VocabError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (id, surface) = line.split_once('\t').ok_or(VocabError::BadLine { line: i + 1 })?;
        if id.parse::<usize>().ok() != Some(out.len()) || surface.is_empty() {
            return Err(VocabError::BadLine { line: i + 1 });
        }
        out.push(surface.to_string());
    }
    Ok(out)
}

/// Sorts `(surface, count)` pairs by count descending, then lexicographically.
fn frequency_order(counts: BTreeMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Word vocabulary with reserved `PAD=0`, `UNK=1`, `BOS=2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl TokenVocab {
    fn from_entries(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate { line: i + 1 });
            }
        }
        Ok(TokenVocab { tokens, index })
    }

    /// Builds from raw words in order of frequency; words seen fewer than
    /// `min_count` times are left out (and encode as UNK).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self, VocabError> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for w in words {
            any = true;
            *counts.entry(w.to_string()).or_default() += 1;
        }
        if !any {
            return Err(VocabError::EmptyCorpus);
        }
        let mut tokens: Vec<String> = [PAD_SURFACE, UNK_SURFACE, BOS_SURFACE].iter().map(|s| s.to_string()).collect();
        for (w, c) in frequency_order(counts) {
            if c >= min_count && !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_entries(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, word: &str) -> u32 {
        self.get(word).unwrap_or(UNK)
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_lines(&self) -> String {
        to_lines(self.tokens.iter().map(String::as_str))
    }

    pub fn from_lines(text: &str) -> Result<Self, VocabError> {
        let tokens = from_lines(text)?;
        if tokens.len() < 3 || tokens[..3] != [PAD_SURFACE, UNK_SURFACE, BOS_SURFACE] {
            return Err(VocabError::BadLine { line: 1 });
        }
        Self::from_entries(tokens)
    }
}

/// Builds the word vocabulary from the yields of a tree stream.
pub fn build_token_vocab<'a>(corpus: impl IntoIterator<Item = &'a Tree>, min_count: usize) -> Result<TokenVocab, VocabError> {
    let trees: Vec<&Tree> = corpus.into_iter().collect();
    TokenVocab::from_words(trees.iter().flat_map(|t| t.words()), min_count)
}

/// Word ids followed by one id per nonterminal label and one for `REDUCE`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointActionVocab {
    tokens: TokenVocab,
    labels: Vec<String>,
    label_index: BTreeMap<String, u32>,
}

impl JointActionVocab {
    /// Labels are deduplicated and sorted.
    pub fn new<'a>(tokens: TokenVocab, labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut labels: Vec<String> = labels.into_iter().map(|l| l.to_string()).collect();
        labels.sort();
        labels.dedup();
        let base = tokens.len() as u32;
        let label_index = labels.iter().enumerate().map(|(i, l)| (l.clone(), base + i as u32)).collect();
        JointActionVocab {
            tokens,
            labels,
            label_index,
        }
    }

    pub fn from_trees<'a>(tokens: TokenVocab, corpus: impl IntoIterator<Item = &'a Tree>) -> Self {
        let trees: Vec<&Tree> = corpus.into_iter().collect();
        Self::new(tokens, trees.iter().flat_map(|t| t.labels()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + self.labels.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &TokenVocab {
        &self.tokens
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn reduce_id(&self) -> u32 {
        (self.tokens.len() + self.labels.len()) as u32
    }

    pub fn label_id(&self, label: &str) -> Option<u32> {
        self.label_index.get(label).copied()
    }

    /// Ids of every `NT(x)`.
    pub fn nt_ids(&self) -> core::ops::Range<u32> {
        let base = self.tokens.len() as u32;
        base..base + self.labels.len() as u32
    }

    pub fn is_word_id(&self, id: u32) -> bool {
        (id as usize) < self.tokens.len() && id != PAD && id != BOS
    }

    /// Words map to UNK when out of vocabulary; unknown labels are an error.
    pub fn encode(&self, action: &Action) -> Result<u32, VocabError> {
        Ok(match action {
            Action::Bos => BOS,
            Action::Reduce => self.reduce_id(),
            Action::Gen(w) => self.tokens.encode(w),
            Action::Nt(l) => self.label_id(l).ok_or_else(|| VocabError::UnknownLabel(l.clone()))?,
        })
    }

    pub fn encode_sequence(&self, actions: &[Action]) -> Result<Vec<u32>, VocabError> {
        actions.iter().map(|a| self.encode(a)).collect()
    }

    /// `None` for PAD and out-of-range ids.
    pub fn decode(&self, id: u32) -> Option<Action> {
        let i = id as usize;
        let nt = self.tokens.len();
        if id == PAD {
            None
        } else if id == BOS {
            Some(Action::Bos)
        } else if i < nt {
            Some(Action::Gen(self.tokens.decode(id)?.to_string()))
        } else if i < nt + self.labels.len() {
            Some(Action::Nt(self.labels[i - nt].clone()))
        } else if id == self.reduce_id() {
            Some(Action::Reduce)
        } else {
            None
        }
    }

    fn surface(&self, id: u32) -> String {
        match id {
            PAD => PAD_SURFACE.to_string(),
            UNK => UNK_SURFACE.to_string(),
            _ => self.decode(id).map(|a| a.to_string()).unwrap_or_default(),
        }
    }

    pub fn to_lines(&self) -> String {
        let surfaces: Vec<String> = (0..self.len() as u32).map(|i| self.surface(i)).collect();
        to_lines(surfaces.iter().map(String::as_str))
    }

    pub fn from_lines(text: &str) -> Result<Self, VocabError> {
        let entries = from_lines(text)?;
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut saw_reduce = false;
        for (i, s) in entries.iter().enumerate() {
            let bad = VocabError::BadLine { line: i + 1 };
            match i {
                0 if s == PAD_SURFACE => tokens.push(s.clone()),
                1 if s == UNK_SURFACE => tokens.push(s.clone()),
                2 if s == "BOS" => tokens.push(BOS_SURFACE.to_string()),
                0..=2 => return Err(bad),
                _ => match s.parse::<Action>().map_err(|_| bad.clone())? {
                    Action::Gen(w) if labels.is_empty() && !saw_reduce => tokens.push(w),
                    Action::Nt(l) if !saw_reduce => labels.push(l),
                    Action::Reduce if !saw_reduce && i + 1 == entries.len() => saw_reduce = true,
                    _ => return Err(bad),
                },
            }
        }
        if !saw_reduce {
            return Err(VocabError::BadLine { line: entries.len() + 1 });
        }
        let tokens = TokenVocab::from_entries(tokens)?;
        let vocab = Self::new(tokens, labels.iter().map(String::as_str));
        if vocab.labels != labels {
            return Err(VocabError::BadLine { line: 4 });
        }
        Ok(vocab)
    }
}

/// Scaffold vocabulary: each distinct run of structural actions is one atomic type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramVocab {
    ngrams: Vec<Vec<Action>>,
    index: BTreeMap<Vec<Action>, u32>,
}

fn ngram_surface(ngram: &[Action]) -> String {
    let mut s = String::new();
    for (i, a) in ngram.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&a.to_string());
    }
    s
}

impl NGramVocab {
    fn from_entries(ngrams: Vec<Vec<Action>>) -> Result<Self, VocabError> {
        let mut index = BTreeMap::new();
        for (i, g) in ngrams.iter().enumerate().skip(2) {
            if index.insert(g.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate { line: i + 1 });
            }
        }
        Ok(NGramVocab { ngrams, index })
    }

    pub fn len(&self) -> usize {
        self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, ngram: &[Action]) -> Option<u32> {
        if ngram.is_empty() {
            Some(BLANK)
        } else {
            self.index.get(ngram).copied()
        }
    }

    /// Out-of-vocabulary n-grams fall back to BLANK; the flag reports it.
    pub fn encode_or_blank(&self, ngram: &[Action]) -> (u32, bool) {
        match self.get(ngram) {
            Some(id) => (id, false),
            None => (BLANK, true),
        }
    }

    /// `None` for PAD; the empty slice for BLANK.
    pub fn decode(&self, id: u32) -> Option<&[Action]> {
        match id {
            PAD => None,
            _ => self.ngrams.get(id as usize).map(Vec::as_slice),
        }
    }

    pub fn to_lines(&self) -> String {
        let surfaces: Vec<String> = self
            .ngrams
            .iter()
            .enumerate()
            .map(|(i, g)| match i as u32 {
                PAD => PAD_SURFACE.to_string(),
                BLANK => BLANK_SURFACE.to_string(),
                _ => ngram_surface(g),
            })
            .collect();
        to_lines(surfaces.iter().map(String::as_str))
    }

    pub fn from_lines(text: &str) -> Result<Self, VocabError> {
        let entries = from_lines(text)?;
        if entries.len() < 2 || entries[0] != PAD_SURFACE || entries[1] != BLANK_SURFACE {
            return Err(VocabError::BadLine { line: 1 });
        }
        let mut ngrams = alloc::vec![Vec::new(), Vec::new()];
        for (i, s) in entries.iter().enumerate().skip(2) {
            let g: Vec<Action> = s
                .split(' ')
                .map(|a| a.parse::<Action>())
                .collect::<Result<_, _>>()
                .map_err(|_| VocabError::BadLine { line: i + 1 })?;
            if g.iter().any(|a| !a.is_structural()) {
                return Err(VocabError::BadLine { line: i + 1 });
            }
            ngrams.push(g);
        }
        Self::from_entries(ngrams)
    }
}

/// One entry per distinct non-empty run of structural actions preceding a
/// word, plus PAD and BLANK.
pub fn build_ngram_vocab<'a>(oracles: impl IntoIterator<Item = &'a ActionSequence>) -> NGramVocab {
    let mut counts: BTreeMap<Vec<Action>, usize> = BTreeMap::new();
    for o in oracles {
        let (segments, _) = crate::transitions::sync_ngrams(o);
        for SyncSegment { preceding, .. } in segments {
            if !preceding.is_empty() {
                *counts.entry(preceding).or_default() += 1;
            }
        }
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut ngrams = alloc::vec![Vec::new(), Vec::new()];
    ngrams.extend(v.into_iter().map(|(g, _)| g));
    NGramVocab::from_entries(ngrams).expect("distinct by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transitions::oracle;
    use crate::tree::parse_tree;

    fn trees(lines: &[&str]) -> Vec<Tree> {
        lines.iter().map(|l| parse_tree(l).unwrap()).collect()
    }

    #[test]
    fn min_count_filters() {
        let c = trees(&["(X a)", "(X a)", "(X b)"]);
        let v = build_token_vocab(&c, 2).unwrap();
        assert!(v.get("a").is_some());
        assert!(v.get("b").is_none());
        assert_eq!(v.encode("b"), UNK);
        let v1 = build_token_vocab(&c, 1).unwrap();
        assert!(v1.get("a").is_some() && v1.get("b").is_some());
        assert_eq!(v1.get("a"), Some(3));
        assert_eq!(v1.get("b"), Some(4));
    }

    #[test]
    fn deterministic_order() {
        let c = trees(&["(X c b a)", "(X b)"]);
        let v1 = build_token_vocab(&c, 1).unwrap();
        let v2 = build_token_vocab(&c, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(&v1.tokens()[3..], &["b", "a", "c"]);
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(build_token_vocab(&[], 1), Err(VocabError::EmptyCorpus));
    }

    #[test]
    fn joint_vocab_layout() {
        let c = trees(&["(S (NP The birds) (VP sang))"]);
        let tv = build_token_vocab(&c, 1).unwrap();
        let jv = JointActionVocab::from_trees(tv.clone(), &c);
        assert_eq!(jv.len(), tv.len() + 3 + 1);
        let o = oracle(&c[0]);
        let ids = jv.encode_sequence(&o).unwrap();
        assert_eq!(ids[0], BOS);
        for (id, a) in ids.iter().zip(o.iter()) {
            assert_eq!(jv.decode(*id).as_ref(), Some(a));
        }
        assert_eq!(jv.encode(&Action::Gen("zebra".into())).unwrap(), UNK);
        assert!(jv.encode(&Action::Nt("ADVP".into())).is_err());
        assert!(jv.decode(PAD).is_none());
    }

    #[test]
    fn single_oracle_ngram_vocab() {
        let o = oracle(&parse_tree("(X a)").unwrap());
        let v = build_ngram_vocab([&o]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.get(&[Action::Nt("X".into())]), Some(2));
        assert_eq!(v.get(&[]), Some(BLANK));
    }

    #[test]
    fn birds_sang_ngrams() {
        let o = oracle(&parse_tree("(S (NP The birds) (VP sang))").unwrap());
        let v = build_ngram_vocab([&o]);
        assert!(v.get(&[Action::Nt("S".into()), Action::Nt("NP".into())]).is_some());
        assert!(v.get(&[Action::Reduce, Action::Nt("VP".into())]).is_some());
        assert_eq!(v.encode_or_blank(&[Action::Reduce]), (BLANK, true));
    }

    #[test]
    fn file_round_trips() {
        let c = trees(&["(S (NP The birds) (VP sang))", "(S (NP a dog) (VP (V saw) (NP it)))"]);
        let tv = build_token_vocab(&c, 1).unwrap();
        assert_eq!(TokenVocab::from_lines(&tv.to_lines()).unwrap(), tv);
        let jv = JointActionVocab::from_trees(tv, &c);
        let text = jv.to_lines();
        assert_eq!(JointActionVocab::from_lines(&text).unwrap(), jv);
        assert_eq!(JointActionVocab::from_lines(&text).unwrap().to_lines(), text);
        let os: Vec<_> = c.iter().map(oracle).collect();
        let nv = build_ngram_vocab(&os);
        assert_eq!(NGramVocab::from_lines(&nv.to_lines()).unwrap(), nv);
        assert!(TokenVocab::from_lines("0\t<pad>\n2\t<unk>\n").is_err());
    }
}
