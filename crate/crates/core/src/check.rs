//! Random structures and independent reference implementations for
//! self-checks: tree generators, a brute-force mask builder and a
//! finite-difference gradient checker.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

use crate::model::{Example, Model, ModelError};
use crate::transitions::{oracle, Action, HeadMaskRow};
use crate::tree::Tree;

const LABELS: [&str; 5] = ["S", "NP", "VP", "PP", "X"];
const WORDS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

/// Uniform random tree of depth at most `max_depth` (a bare leaf under a node
/// has depth 2) and at most `max_fanout` children per node.
pub fn random_tree<R: Rng>(rng: &mut R, max_depth: usize, max_fanout: usize) -> Tree {
    assert!(max_depth >= 2 && max_fanout >= 1);
    node(rng, max_depth, max_fanout)
}

fn node<R: Rng>(rng: &mut R, depth: usize, fanout: usize) -> Tree {
    let n = rng.gen_range(1..=fanout);
    let children = (0..n)
        .map(|_| {
            if depth <= 2 || rng.gen_bool(0.5) {
                Tree::leaf(WORDS[rng.gen_range(0..WORDS.len())])
            } else {
                node(rng, depth - 1, fanout)
            }
        })
        .collect();
    Tree::node(LABELS[rng.gen_range(0..LABELS.len())], children)
}

/// A random non-empty prefix of a random tree's oracle (BOS included).
pub fn random_prefix<R: Rng>(rng: &mut R, max_depth: usize, max_fanout: usize) -> Vec<Action> {
    let mut a = oracle(&random_tree(rng, max_depth, max_fanout)).into_inner();
    let keep = rng.gen_range(1..=a.len());
    a.truncate(keep);
    a
}

/// Mask rows built straight from the definition by replaying a stack of NT
/// positions for every query separately. Quadratic; for cross-checking.
pub fn brute_force_masks(prefix: &[Action]) -> Vec<HeadMaskRow> {
    let mut rows = Vec::with_capacity(prefix.len());
    for t in 1..=prefix.len() {
        let mut open: Vec<usize> = Vec::new();
        for (i, a) in prefix.iter().enumerate().take(t).skip(1) {
            match a {
                Action::Nt(_) => open.push(i),
                Action::Reduce => {
                    open.pop();
                }
                _ => {}
            }
        }
        let (stack, mut outside): (BTreeSet<usize>, BTreeSet<usize>) = match open.last() {
            Some(&p) => ((p..t).collect(), (0..p).collect()),
            None => ([t - 1].into_iter().collect(), (0..t.saturating_sub(1)).collect()),
        };
        if outside.is_empty() {
            outside.insert(0);
        }
        rows.push(HeadMaskRow {
            stack_visible: (0..t).map(|j| stack.contains(&j)).collect(),
            outside_visible: (0..t).map(|j| outside.contains(&j)).collect(),
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat offset)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the analytic loss gradient of `example` against central finite
/// differences with step `h` for every parameter entry. The relative error
/// is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(model: &Model<f64>, example: &Example, h: f64, floor: f64) -> Result<GradCheck, ModelError> {
    let (_, grads) = model.loss_and_grad(example, None)?;
    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (pi, g) in grads.grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = probe.params()[pi].data()[k];
            probe.params_mut()[pi].data_mut()[k] = orig + h;
            let up = probe.eval_loss(example)?;
            probe.params_mut()[pi].data_mut()[k] = orig - h;
            let down = probe.eval_loss(example)?;
            probe.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[k];
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(ModelError::NonFinite);
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Positions strictly masked for head 0 and head 1 at each query, as a
/// convenience for attention-soundness checks.
pub fn masked_keys(rows: &[HeadMaskRow]) -> Vec<[Vec<usize>; 2]> {
    rows.iter()
        .map(|r| {
            let pick = |v: &[bool]| v.iter().enumerate().filter(|(_, &b)| !b).map(|(j, _)| j).collect::<Vec<_>>();
            [pick(&r.stack_visible), pick(&r.outside_visible)]
        })
        .collect()
}
