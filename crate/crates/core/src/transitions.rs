//! The generative transition system over joint word/structure sequences.
//!
//! A tree is generated top-down, left to right: `NT(x)` opens a constituent
//! labelled `x`, `GEN(w)` emits a word into the innermost open constituent
//! and `REDUCE` closes it. Every sequence starts with `BOS`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Deref;
use core::str::FromStr;

use crate::tree::{is_valid_symbol, Tree};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Bos,
    Nt(String),
    Reduce,
    Gen(String),
}

impl Action {
    pub fn is_word(&self) -> bool {
        matches!(self, Action::Gen(_))
    }

    /// NT or REDUCE.
    pub fn is_structural(&self) -> bool {
        matches!(self, Action::Nt(_) | Action::Reduce)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Bos => f.write_str("BOS"),
            Action::Nt(l) => write!(f, "NT({l})"),
            Action::Reduce => f.write_str("REDUCE"),
            Action::Gen(w) => write!(f, "GEN({w})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseActionError(pub String);

impl fmt::Display for ParseActionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed action {:?}", self.0)
    }
}

impl FromStr for Action {
    type Err = ParseActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(')'))
                .filter(|r| is_valid_symbol(r))
        };
        match s {
            "BOS" => Ok(Action::Bos),
            "REDUCE" => Ok(Action::Reduce),
            _ => {
                if let Some(l) = inner("NT(") {
                    Ok(Action::Nt(l.to_string()))
                } else if let Some(w) = inner("GEN(") {
                    Ok(Action::Gen(w.to_string()))
                } else {
                    Err(ParseActionError(s.to_string()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionError {
    MissingBos,
    IllegalAction { position: usize, action: Action },
    IncompleteSequence,
    TrailingActions { position: usize },
}

impl fmt::Display for TransitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionError::MissingBos => f.write_str("sequence does not start with BOS"),
            TransitionError::IllegalAction { position, action } => {
                write!(f, "illegal action {action} at position {position}")
            }
            TransitionError::IncompleteSequence => f.write_str("sequence ends with open constituents"),
            TransitionError::TrailingActions { position } => {
                write!(f, "actions after the root closed, starting at position {position}")
            }
        }
    }
}

/// A joint action sequence, `BOS` at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ActionSequence(Vec<Action>);

impl ActionSequence {
    pub fn new(actions: Vec<Action>) -> Self {
        ActionSequence(actions)
    }

    pub fn into_inner(self) -> Vec<Action> {
        self.0
    }

    pub fn push(&mut self, a: Action) {
        self.0.push(a);
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter_map(|a| match a {
            Action::Gen(w) => Some(w.as_str()),
            _ => None,
        })
    }

    /// Replays the sequence, returning the final state if every prefix is legal.
    pub fn replay(&self, config: &LegalityConfig) -> Result<ParserState, TransitionError> {
        match self.0.first() {
            Some(Action::Bos) => {}
            _ => return Err(TransitionError::MissingBos),
        }
        let mut state = ParserState::new();
        for a in &self.0[1..] {
            state.apply_mut(a, config)?;
        }
        Ok(state)
    }

    /// Space-separated action strings, `BOS` omitted.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        for a in self.0.iter().filter(|a| **a != Action::Bos) {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(&a.to_string());
        }
        s
    }

    /// Inverse of [`ActionSequence::to_line`]; `BOS` is prepended.
    pub fn from_line(line: &str) -> Result<Self, ParseActionError> {
        let mut v = vec![Action::Bos];
        for tok in line.split_whitespace() {
            v.push(tok.parse()?);
        }
        Ok(ActionSequence(v))
    }
}

impl Deref for ActionSequence {
    type Target = [Action];

    fn deref(&self) -> &[Action] {
        &self.0
    }
}

impl From<Vec<Action>> for ActionSequence {
    fn from(v: Vec<Action>) -> Self {
        ActionSequence(v)
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegalityConfig {
    /// Upper bound on simultaneously open constituents.
    pub max_open_constituents: usize,
}

impl Default for LegalityConfig {
    fn default() -> Self {
        LegalityConfig {
            max_open_constituents: 32,
        }
    }
}

impl LegalityConfig {
    pub fn unbounded() -> Self {
        LegalityConfig {
            max_open_constituents: usize::MAX,
        }
    }
}

/// Which kinds of action may come next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LegalKinds {
    pub nt: bool,
    pub reduce: bool,
    pub gen: bool,
}

impl LegalKinds {
    pub fn none(&self) -> bool {
        !(self.nt || self.reduce || self.gen)
    }

    pub fn allows(&self, action: &Action) -> bool {
        match action {
            Action::Bos => false,
            Action::Nt(_) => self.nt,
            Action::Reduce => self.reduce,
            Action::Gen(_) => self.gen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenConstituent {
    pub label: String,
    /// Index of the `NT` action that opened it.
    pub position: usize,
    pub children: usize,
}

/// Incremental parser state: the stack of open constituents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParserState {
    open: Vec<OpenConstituent>,
    completed_roots: usize,
    position: usize,
    words: usize,
}

impl Default for ParserState {
    fn default() -> Self {
        Self::new()
    }
}

impl ParserState {
    /// The state right after `BOS`.
    pub fn new() -> Self {
        ParserState {
            open: Vec::new(),
            completed_roots: 0,
            position: 1,
            words: 0,
        }
    }

    pub fn open_stack(&self) -> &[OpenConstituent] {
        &self.open
    }

    pub fn depth(&self) -> usize {
        self.open.len()
    }

    pub fn completed_roots(&self) -> usize {
        self.completed_roots
    }

    /// Index of the next action.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn words_generated(&self) -> usize {
        self.words
    }

    pub fn is_complete(&self) -> bool {
        self.completed_roots == 1
    }

    /// Position of the `NT` opening the innermost open constituent.
    pub fn stack_window_start(&self) -> Option<usize> {
        self.open.last().map(|c| c.position)
    }

    pub fn legal_actions(&self, config: &LegalityConfig) -> LegalKinds {
        if self.completed_roots > 0 {
            return LegalKinds::default();
        }
        match self.open.last() {
            None => LegalKinds {
                nt: config.max_open_constituents > 0,
                reduce: false,
                gen: false,
            },
            Some(top) => LegalKinds {
                nt: self.open.len() < config.max_open_constituents,
                reduce: top.children > 0,
                gen: true,
            },
        }
    }

    pub fn apply_mut(&mut self, action: &Action, config: &LegalityConfig) -> Result<(), TransitionError> {
        if !self.legal_actions(config).allows(action) {
            return Err(if self.completed_roots > 0 {
                TransitionError::TrailingActions {
                    position: self.position,
                }
            } else {
                TransitionError::IllegalAction {
                    position: self.position,
                    action: action.clone(),
                }
            });
        }
        match action {
            Action::Nt(label) => {
                if let Some(parent) = self.open.last_mut() {
                    parent.children += 1;
                }
                self.open.push(OpenConstituent {
                    label: label.clone(),
                    position: self.position,
                    children: 0,
                });
            }
            Action::Reduce => {
                self.open.pop();
                if self.open.is_empty() {
                    self.completed_roots += 1;
                }
            }
            Action::Gen(_) => {
                if let Some(top) = self.open.last_mut() {
                    top.children += 1;
                }
                self.words += 1;
            }
            Action::Bos => unreachable!("BOS is never legal"),
        }
        self.position += 1;
        Ok(())
    }

    pub fn apply(&self, action: &Action, config: &LegalityConfig) -> Result<ParserState, TransitionError> {
        let mut next = self.clone();
        next.apply_mut(action, config)?;
        Ok(next)
    }
}

/// Free-function form of [`ParserState::legal_actions`].
pub fn legal_actions(state: &ParserState, config: &LegalityConfig) -> LegalKinds {
    state.legal_actions(config)
}

/// Free-function form of [`ParserState::apply`].
pub fn apply(state: &ParserState, action: &Action, config: &LegalityConfig) -> Result<ParserState, TransitionError> {
    state.apply(action, config)
}

/// Depth-first, left-to-right oracle for a tree.
pub fn oracle(tree: &Tree) -> ActionSequence {
    fn walk(t: &Tree, out: &mut Vec<Action>) {
        match t {
            Tree::Leaf(w) => out.push(Action::Gen(w.clone())),
            Tree::Node { label, children } => {
                out.push(Action::Nt(label.clone()));
                children.iter().for_each(|c| walk(c, out));
                out.push(Action::Reduce);
            }
        }
    }
    let mut out = vec![Action::Bos];
    walk(tree, &mut out);
    ActionSequence(out)
}

/// Inverse of [`oracle`] on complete sequences.
pub fn reconstruct(actions: &[Action]) -> Result<Tree, TransitionError> {
    match actions.first() {
        Some(Action::Bos) => {}
        _ => return Err(TransitionError::MissingBos),
    }
    let config = LegalityConfig::unbounded();
    let mut state = ParserState::new();
    let mut stack: Vec<(String, Vec<Tree>)> = Vec::new();
    let mut root = None;
    for a in &actions[1..] {
        state.apply_mut(a, &config)?;
        match a {
            Action::Nt(l) => stack.push((l.clone(), Vec::new())),
            Action::Gen(w) => stack.last_mut().expect("legal GEN").1.push(Tree::Leaf(w.clone())),
            Action::Reduce => {
                let (label, children) = stack.pop().expect("legal REDUCE");
                let node = Tree::Node { label, children };
                match stack.last_mut() {
                    Some(parent) => parent.1.push(node),
                    None => root = Some(node),
                }
            }
            Action::Bos => unreachable!(),
        }
    }
    root.ok_or(TransitionError::IncompleteSequence)
}

/// A word together with the run of structural actions right before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncSegment {
    pub word: String,
    pub preceding: Vec<Action>,
}

/// Splits a (possibly partial) sequence into word-synchronous segments.
/// Returns the segments and the structural actions after the last word.
pub fn sync_ngrams(actions: &[Action]) -> (Vec<SyncSegment>, Vec<Action>) {
    let body = match actions.first() {
        Some(Action::Bos) => &actions[1..],
        _ => actions,
    };
    let mut segments = Vec::new();
    let mut run = Vec::new();
    for a in body {
        match a {
            Action::Gen(w) => segments.push(SyncSegment {
                word: w.clone(),
                preceding: core::mem::take(&mut run),
            }),
            Action::Bos => {}
            other => run.push(other.clone()),
        }
    }
    (segments, run)
}

/// Inverse of [`sync_ngrams`].
pub fn join_segments(segments: &[SyncSegment], trailing: &[Action]) -> ActionSequence {
    let mut out = vec![Action::Bos];
    for s in segments {
        out.extend(s.preceding.iter().cloned());
        out.push(Action::Gen(s.word.clone()));
    }
    out.extend(trailing.iter().cloned());
    ActionSequence(out)
}

/// Visibility of past positions for the two structure-constrained heads at one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadMaskRow {
    /// Positions inside the innermost open constituent (plus the most recent one).
    pub stack_visible: Vec<bool>,
    /// Every other past position.
    pub outside_visible: Vec<bool>,
}

impl HeadMaskRow {
    /// Row for query position `t >= 1` (keys `0..t`), given the innermost open
    /// constituent's `NT` position after consuming `a_{<t}`.
    pub fn new(t: usize, window_start: Option<usize>) -> Self {
        assert!(t >= 1, "query position 0 has no past");
        let mut stack_visible = vec![false; t];
        let mut outside_visible = vec![false; t];
        match window_start {
            Some(p) => {
                debug_assert!(p >= 1 && p < t);
                stack_visible[p..t].iter_mut().for_each(|v| *v = true);
                outside_visible[..p].iter_mut().for_each(|v| *v = true);
            }
            None => {
                stack_visible[t - 1] = true;
                outside_visible[..t - 1].iter_mut().for_each(|v| *v = true);
            }
        }
        if !outside_visible.iter().any(|&v| v) {
            outside_visible[0] = true;
        }
        HeadMaskRow {
            stack_visible,
            outside_visible,
        }
    }
}

/// For each position `p` of a prefix, the innermost open constituent after
/// consuming `a_0..=a_p`. This is what decoder position `p` may see through
/// the stack head.
pub fn window_starts(actions: &[Action]) -> Result<Vec<Option<usize>>, TransitionError> {
    match actions.first() {
        Some(Action::Bos) => {}
        _ => return Err(TransitionError::MissingBos),
    }
    let config = LegalityConfig::unbounded();
    let mut state = ParserState::new();
    let mut out = Vec::with_capacity(actions.len());
    out.push(None);
    for a in &actions[1..] {
        state.apply_mut(a, &config)?;
        out.push(state.stack_window_start());
    }
    Ok(out)
}

/// One mask row per query position `t = 1..=len(actions)`.
pub fn head_masks(actions: &[Action]) -> Result<Vec<HeadMaskRow>, TransitionError> {
    Ok(window_starts(actions)?
        .into_iter()
        .enumerate()
        .map(|(p, w)| HeadMaskRow::new(p + 1, w))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_tree;

    fn acts(s: &str) -> Vec<Action> {
        ActionSequence::from_line(s).unwrap().into_inner()
    }

    #[test]
    fn action_strings_round_trip() {
        for s in ["NT(S)", "REDUCE", "GEN(The)", "BOS"] {
            assert_eq!(s.parse::<Action>().unwrap().to_string(), s);
        }
        assert!("NT()".parse::<Action>().is_err());
        assert!("GEN(a b)".parse::<Action>().is_err());
        assert!("SHIFT".parse::<Action>().is_err());
    }

    #[test]
    fn birds_sang_oracle() {
        let t = parse_tree("(S (NP The birds) (VP sang))").unwrap();
        let o = oracle(&t);
        assert_eq!(
            o.to_line(),
            "NT(S) NT(NP) GEN(The) GEN(birds) REDUCE NT(VP) GEN(sang) REDUCE REDUCE"
        );
        assert_eq!(o[0], Action::Bos);
        assert_eq!(reconstruct(&o).unwrap(), t);
    }

    #[test]
    fn minimal_oracle() {
        let t = parse_tree("(X a)").unwrap();
        assert_eq!(oracle(&t).into_inner(), acts("NT(X) GEN(a) REDUCE"));
        assert_eq!(reconstruct(&acts("NT(X) GEN(a) REDUCE")).unwrap(), t);
    }

    #[test]
    fn reconstruct_errors() {
        assert!(matches!(
            reconstruct(&acts("NT(S) REDUCE")),
            Err(TransitionError::IllegalAction { position: 2, .. })
        ));
        assert_eq!(
            reconstruct(&acts("NT(S) GEN(a)")),
            Err(TransitionError::IncompleteSequence)
        );
        assert_eq!(
            reconstruct(&acts("NT(S) GEN(a) REDUCE GEN(b)")),
            Err(TransitionError::TrailingActions { position: 4 })
        );
        assert!(matches!(
            reconstruct(&acts("GEN(a)")),
            Err(TransitionError::IllegalAction { .. })
        ));
        assert_eq!(reconstruct(&[Action::Nt("X".into())]), Err(TransitionError::MissingBos));
        assert_eq!(reconstruct(&acts("")), Err(TransitionError::IncompleteSequence));
    }

    #[test]
    fn apply_examples() {
        let cfg = LegalityConfig::default();
        let s = ParserState::new().apply(&Action::Nt("S".into()), &cfg).unwrap();
        assert_eq!(s.open_stack().len(), 1);
        assert_eq!((s.open_stack()[0].label.as_str(), s.open_stack()[0].position), ("S", 1));

        let s2 = s.apply(&Action::Nt("NP".into()), &cfg).unwrap();
        let s3 = s2.apply(&Action::Gen("a".into()), &cfg).unwrap();
        let s4 = s3.apply(&Action::Reduce, &cfg).unwrap();
        assert_eq!(s4.open_stack().len(), 1);
        assert_eq!(s4.open_stack()[0].position, 1);

        assert!(matches!(
            ParserState::new().apply(&Action::Reduce, &cfg),
            Err(TransitionError::IllegalAction { .. })
        ));
    }

    #[test]
    fn legality_rules() {
        let cfg = LegalityConfig::default();
        let init = ParserState::new();
        assert_eq!(
            init.legal_actions(&cfg),
            LegalKinds {
                nt: true,
                reduce: false,
                gen: false
            }
        );
        let s = init.apply(&Action::Nt("S".into()), &cfg).unwrap();
        assert_eq!(
            s.legal_actions(&cfg),
            LegalKinds {
                nt: true,
                reduce: false,
                gen: true
            }
        );
        let done = ActionSequence::from_line("NT(X) GEN(a) REDUCE").unwrap().replay(&cfg).unwrap();
        assert_eq!(done.completed_roots(), 1);
        assert!(done.legal_actions(&cfg).none());

        let capped = LegalityConfig {
            max_open_constituents: 2,
        };
        let deep = ActionSequence::from_line("NT(A) NT(B)").unwrap().replay(&capped).unwrap();
        assert!(!deep.legal_actions(&capped).nt);
        assert!(deep.legal_actions(&capped).gen);
    }

    #[test]
    fn birds_sang_sync_ngrams() {
        let prefix = acts("NT(S) NT(NP) GEN(The) GEN(birds) REDUCE NT(VP) GEN(sang) NT(ADVP)");
        let (segs, trailing) = sync_ngrams(&prefix);
        let nt = |l: &str| Action::Nt(l.into());
        assert_eq!(
            segs,
            vec![
                SyncSegment {
                    word: "The".into(),
                    preceding: vec![nt("S"), nt("NP")]
                },
                SyncSegment {
                    word: "birds".into(),
                    preceding: vec![]
                },
                SyncSegment {
                    word: "sang".into(),
                    preceding: vec![Action::Reduce, nt("VP")]
                },
            ]
        );
        assert_eq!(trailing, vec![nt("ADVP")]);
        assert_eq!(join_segments(&segs, &trailing).into_inner(), prefix);

        let (segs, trailing) = sync_ngrams(&acts("NT(X) GEN(a) REDUCE"));
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].preceding, vec![nt("X")]);
        assert_eq!(trailing, vec![Action::Reduce]);
    }

    #[test]
    fn nested_prefix_masks() {
        let prefix = acts("NT(S) NT(NP) GEN(The) GEN(birds)");
        let rows = head_masks(&prefix).unwrap();
        assert_eq!(rows.len(), 5);
        let last = rows.last().unwrap();
        assert_eq!(last.stack_visible, vec![false, false, true, true, true]);
        assert_eq!(last.outside_visible, vec![true, true, false, false, false]);
    }

    #[test]
    fn degenerate_first_row() {
        let rows = head_masks(&[Action::Bos]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].stack_visible, vec![true]);
        assert_eq!(rows[0].outside_visible, vec![true]);
    }

    #[test]
    fn closed_root_row() {
        let prefix = acts("NT(X) GEN(a) REDUCE");
        let last = head_masks(&prefix).unwrap().pop().unwrap();
        assert_eq!(last.stack_visible, vec![false, false, false, true]);
        assert_eq!(last.outside_visible, vec![true, true, true, false]);
    }

    #[test]
    fn reduce_moves_window_left() {
        let prefix = acts("NT(S) NT(NP) GEN(a) NT(PP) GEN(b) REDUCE REDUCE GEN(c) REDUCE");
        let starts = window_starts(&prefix).unwrap();
        for (p, a) in prefix.iter().enumerate().skip(1) {
            if *a == Action::Reduce {
                match (starts[p - 1], starts[p]) {
                    (Some(before), Some(after)) => assert!(after < before),
                    (Some(_), None) => assert_eq!(p, prefix.len() - 1),
                    other => panic!("unexpected window transition {other:?}"),
                }
            }
        }
    }
}
