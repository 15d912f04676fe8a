//! Brute-force reference for the chart algorithms: enumerate every
//! projective tree and score it directly. Only usable for short sentences.
//!
//! Tree scoring here walks positions outward from each head and does not
//! share code with the dynamic programs or with `model::add_tree_counts`.

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::logmath::{log_sum_exp, NEG_INF};
use crate::model::{CountTable, Direction, DmvParams, ParseTree, ValenceConfig, CONTINUE, STOP};

/// Longest sentence the enumerator accepts.
pub const MAX_ENUM_LEN: usize = 8;

/// A single rule application in a derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleUse {
    Root {
        token: usize,
    },
    Child {
        head: usize,
        dir: Direction,
        valence: usize,
        child: usize,
    },
    Decision {
        head: usize,
        dir: Direction,
        valence: usize,
        outcome: usize,
    },
}

/// All distinct single-rooted projective trees over `n` positions.
pub fn enumerate_projective_trees(n: usize) -> Result<Vec<ParseTree>> {
    if n == 0 || n > MAX_ENUM_LEN {
        return Err(Error::InvalidArgument(format!(
            "tree enumeration supports 1..={MAX_ENUM_LEN} tokens, got {n}"
        )));
    }
    Ok(span_trees(0, n - 1)
        .into_iter()
        .map(|(root, arcs)| {
            let mut heads = vec![None; n];
            for (h, a) in arcs {
                heads[a] = Some(h);
            }
            debug_assert!(heads[root].is_none());
            ParseTree::new_unchecked(heads)
        })
        .collect())
}

type Arcs = Vec<(usize, usize)>;

/// Trees spanning exactly `lo..=hi`, as (root, arcs).
fn span_trees(lo: usize, hi: usize) -> Vec<(usize, Arcs)> {
    let mut out = Vec::new();
    for root in lo..=hi {
        let lefts = if root > lo {
            sequences(lo, root - 1)
        } else {
            vec![vec![]]
        };
        let rights = if root < hi {
            sequences(root + 1, hi)
        } else {
            vec![vec![]]
        };
        for left in &lefts {
            for right in &rights {
                let mut arcs = Vec::new();
                for (r, sub) in left.iter().chain(right) {
                    arcs.push((root, *r));
                    arcs.extend_from_slice(sub);
                }
                out.push((root, arcs));
            }
        }
    }
    out
}

/// Ways to cover `lo..=hi` with a left-to-right sequence of subtrees.
fn sequences(lo: usize, hi: usize) -> Vec<Vec<(usize, Arcs)>> {
    let mut out = Vec::new();
    for mid in lo..=hi {
        for first in span_trees(lo, mid) {
            if mid == hi {
                out.push(vec![first.clone()]);
            } else {
                for mut rest in sequences(mid + 1, hi) {
                    rest.insert(0, first.clone());
                    out.push(rest);
                }
            }
        }
    }
    out
}

/// Rule applications used by `tree`, walking outward from each head.
pub fn rule_uses(tree: &ParseTree, sentence: &Sentence, vcfg: ValenceConfig) -> Vec<RuleUse> {
    let heads = tree.heads();
    let n = heads.len();
    let toks = &sentence.token_ids;
    let mut uses = Vec::new();
    for pos in 0..n {
        if heads[pos].is_none() {
            uses.push(RuleUse::Root { token: toks[pos] });
        }
    }
    for h in 0..n {
        let sides: [(Direction, Vec<usize>); 2] = [
            (Direction::Left, (0..h).rev().collect()),
            (Direction::Right, (h + 1..n).collect()),
        ];
        for (dir, order) in sides {
            let mut generated = 0usize;
            for pos in order {
                if heads[pos] == Some(h) {
                    uses.push(RuleUse::Decision {
                        head: toks[h],
                        dir,
                        valence: generated.min(vcfg.decision - 1),
                        outcome: CONTINUE,
                    });
                    uses.push(RuleUse::Child {
                        head: toks[h],
                        dir,
                        valence: generated.min(vcfg.child - 1),
                        child: toks[pos],
                    });
                    generated += 1;
                }
            }
            uses.push(RuleUse::Decision {
                head: toks[h],
                dir,
                valence: generated.min(vcfg.decision - 1),
                outcome: STOP,
            });
        }
    }
    uses
}

pub fn rule_prob(params: &DmvParams, rule: RuleUse) -> f64 {
    match rule {
        RuleUse::Root { token } => params.root()[token],
        RuleUse::Child {
            head,
            dir,
            valence,
            child,
        } => params.child(head, dir, valence)[child],
        RuleUse::Decision {
            head,
            dir,
            valence,
            outcome,
        } => params.decision(head, dir, valence)[outcome],
    }
}

pub fn tree_log_prob(tree: &ParseTree, sentence: &Sentence, params: &DmvParams) -> f64 {
    rule_uses(tree, sentence, params.valence())
        .into_iter()
        .map(|r| rule_prob(params, r).ln())
        .sum()
}

/// Every tree of the sentence paired with its log-probability.
pub fn scored_trees(sentence: &Sentence, params: &DmvParams) -> Result<Vec<(ParseTree, f64)>> {
    Ok(enumerate_projective_trees(sentence.len())?
        .into_iter()
        .map(|t| {
            let lp = tree_log_prob(&t, sentence, params);
            (t, lp)
        })
        .collect())
}

pub fn log_prob(sentence: &Sentence, params: &DmvParams) -> Result<f64> {
    Ok(log_sum_exp(
        scored_trees(sentence, params)?
            .into_iter()
            .map(|(_, lp)| lp),
    ))
}

/// Best score over all trees and every tree attaining it (within `tol`).
pub fn best_trees(
    sentence: &Sentence,
    params: &DmvParams,
    tol: f64,
) -> Result<(f64, Vec<ParseTree>)> {
    let scored = scored_trees(sentence, params)?;
    let best = scored.iter().map(|(_, lp)| *lp).fold(NEG_INF, f64::max);
    let argmax = scored
        .into_iter()
        .filter(|(_, lp)| (lp - best).abs() <= tol * best.abs().max(1.0))
        .map(|(t, _)| t)
        .collect();
    Ok((best, argmax))
}

/// Posterior-weighted rule counts by enumeration.
pub fn expected_counts(sentence: &Sentence, params: &DmvParams) -> Result<CountTable> {
    let scored = scored_trees(sentence, params)?;
    let z = log_sum_exp(scored.iter().map(|(_, lp)| *lp));
    let mut counts = CountTable::zeros(params.vocab_size(), params.valence());
    for (tree, lp) in &scored {
        let w = (lp - z).exp();
        for rule in rule_uses(tree, sentence, params.valence()) {
            match rule {
                RuleUse::Root { token } => counts.add_root(token, w),
                RuleUse::Child {
                    head,
                    dir,
                    valence,
                    child,
                } => counts.add_child(head, dir, valence, child, w),
                RuleUse::Decision {
                    head,
                    dir,
                    valence,
                    outcome,
                } => counts.add_decision(head, dir, valence, outcome, w),
            }
        }
    }
    Ok(counts)
}

/// Parent posteriors by enumeration; column `n` is the root.
pub fn arc_posteriors(sentence: &Sentence, params: &DmvParams) -> Result<Vec<Vec<f64>>> {
    let n = sentence.len();
    let scored = scored_trees(sentence, params)?;
    let z = log_sum_exp(scored.iter().map(|(_, lp)| *lp));
    let mut post = vec![vec![0.0; n + 1]; n];
    for (tree, lp) in &scored {
        let w = (lp - z).exp();
        for (a, h) in tree.heads().iter().enumerate() {
            post[a][h.unwrap_or(n)] += w;
        }
    }
    Ok(post)
}
