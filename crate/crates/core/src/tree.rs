//! Bracketed constituency trees.
//!
//! Trees are n-ary and labelled; any label may dominate a leaf directly.
//! The canonical rendering is single-space separated with no trailing
//! whitespace, e.g. `(S (NP The birds) (VP sang))`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

/// An n-ary labelled constituency tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tree {
    Leaf(String),
    Node { label: String, children: Vec<Tree> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeError {
    EmptyInput,
    UnbalancedBrackets { offset: usize },
    EmptyConstituent { offset: usize },
    BadLabel { offset: usize },
    /// A token outside of any bracket, or input left over after the root closed.
    TrailingInput { offset: usize },
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::EmptyInput => write!(f, "empty input"),
            TreeError::UnbalancedBrackets { offset } => {
                write!(f, "unbalanced brackets at byte {offset}")
            }
            TreeError::EmptyConstituent { offset } => {
                write!(f, "constituent with no children at byte {offset}")
            }
            TreeError::BadLabel { offset } => write!(f, "missing or malformed label at byte {offset}"),
            TreeError::TrailingInput { offset } => {
                write!(f, "unexpected input outside the tree at byte {offset}")
            }
        }
    }
}

/// True for strings usable as a label or a leaf token.
pub fn is_valid_symbol(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c == '(' || c == ')' || c.is_whitespace())
}

impl Tree {
    pub fn leaf(token: impl Into<String>) -> Tree {
        Tree::Leaf(token.into())
    }

    pub fn node(label: impl Into<String>, children: Vec<Tree>) -> Tree {
        Tree::Node {
            label: label.into(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Tree::Leaf(_))
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Tree::Leaf(_) => None,
            Tree::Node { label, .. } => Some(label),
        }
    }

    /// The in-order leaf sequence.
    pub fn words(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_words(&mut out);
        out
    }

    fn collect_words<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Tree::Leaf(w) => out.push(w),
            Tree::Node { children, .. } => children.iter().for_each(|c| c.collect_words(out)),
        }
    }

    /// Labels of every internal node, pre-order.
    pub fn labels(&self) -> Vec<&str> {
        fn walk<'a>(t: &'a Tree, out: &mut Vec<&'a str>) {
            if let Tree::Node { label, children } = t {
                out.push(label);
                children.iter().for_each(|c| walk(c, out));
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Node { children, .. } => 1 + children.iter().map(Tree::depth).max().unwrap_or(0),
        }
    }

    /// Checks the structural invariants: non-empty nodes and well-formed symbols.
    pub fn is_valid(&self) -> bool {
        match self {
            Tree::Leaf(w) => is_valid_symbol(w),
            Tree::Node { label, children } => {
                is_valid_symbol(label) && !children.is_empty() && children.iter().all(Tree::is_valid)
            }
        }
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Tree::Leaf(w) => out.push_str(w),
            Tree::Node { label, children } => {
                out.push('(');
                out.push_str(label);
                for c in children {
                    out.push(' ');
                    c.render_into(out);
                }
                out.push(')');
            }
        }
    }
}

/// Canonical bracketed rendering.
pub fn render_tree(tree: &Tree) -> String {
    let mut s = String::new();
    tree.render_into(&mut s);
    s
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_tree(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Lexeme<'a> {
    Open,
    Close,
    Symbol(&'a str),
}

fn lex(text: &str) -> Vec<(usize, Lexeme<'_>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, Lexeme::Symbol(&text[s..i])));
            }
            if c == '(' {
                out.push((i, Lexeme::Open));
            } else if c == ')' {
                out.push((i, Lexeme::Close));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Lexeme::Symbol(&text[s..])));
    }
    out
}

/// Parses a single bracketed tree. Whitespace between lexemes is not significant.
pub fn parse_tree(text: &str) -> Result<Tree, TreeError> {
    let lexemes = lex(text);
    let Some(&(first_off, first)) = lexemes.first() else {
        return Err(TreeError::EmptyInput);
    };
    match first {
        Lexeme::Open => {}
        Lexeme::Close => return Err(TreeError::UnbalancedBrackets { offset: first_off }),
        Lexeme::Symbol(_) => return Err(TreeError::TrailingInput { offset: first_off }),
    }

    // (label, children, offset of the opening bracket)
    let mut stack: Vec<(String, Vec<Tree>, usize)> = Vec::new();
    let mut i = 0;
    while i < lexemes.len() {
        let (off, lexeme) = lexemes[i];
        match lexeme {
            Lexeme::Open => {
                let label = match lexemes.get(i + 1) {
                    Some(&(_, Lexeme::Symbol(l))) => l,
                    Some(&(o, _)) => return Err(TreeError::BadLabel { offset: o }),
                    None => return Err(TreeError::UnbalancedBrackets { offset: text.len() }),
                };
                stack.push((label.to_string(), Vec::new(), off));
                i += 2;
            }
            Lexeme::Close => {
                let Some((label, children, open_off)) = stack.pop() else {
                    return Err(TreeError::UnbalancedBrackets { offset: off });
                };
                if children.is_empty() {
                    return Err(TreeError::EmptyConstituent { offset: open_off });
                }
                let node = Tree::Node { label, children };
                match stack.last_mut() {
                    Some(parent) => parent.1.push(node),
                    None => {
                        if let Some(&(rest, lx)) = lexemes.get(i + 1) {
                            return Err(match lx {
                                Lexeme::Close => TreeError::UnbalancedBrackets { offset: rest },
                                _ => TreeError::TrailingInput { offset: rest },
                            });
                        }
                        return Ok(node);
                    }
                }
                i += 1;
            }
            Lexeme::Symbol(tok) => {
                // Only reachable inside an open bracket: the root is checked above.
                stack
                    .last_mut()
                    .expect("symbol outside brackets")
                    .1
                    .push(Tree::Leaf(tok.to_string()));
                i += 1;
            }
        }
    }
    Err(TreeError::UnbalancedBrackets { offset: text.len() })
}

impl FromStr for Tree {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tree(s)
    }
}

/// A parse failure on a given (1-based) line of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusError {
    pub line: usize,
    pub error: TreeError,
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.error)
    }
}

/// Streams trees from line-delimited corpus text, skipping blank lines.
pub fn parse_corpus(text: &str) -> impl Iterator<Item = Result<Tree, CorpusError>> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_tree(l).map_err(|error| CorpusError { line: i + 1, error }))
}
