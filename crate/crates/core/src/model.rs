//! Extended-DMV parameter and count tables, parse trees, and the four
//! initialization schemes.
//!
//! A tree over tokens `t_0 .. t_{n-1}` has probability
//!
//! ```text
//! root(t_r) * prod_{h, d} [ prod_{i=1..k} cont(h,d,min(i-1,Vd-1)) * child(h,d,min(i-1,Vc-1))(a_i) ]
//!                         * stop(h,d,min(k,Vd-1))
//! ```
//!
//! where the `k` dependents of `h` in direction `d` are generated
//! nearest-first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Right => 1,
        }
    }

    /// Direction of the arc from `head` to `dep`.
    pub fn of_arc(head: usize, dep: usize) -> Direction {
        if dep < head {
            Direction::Left
        } else {
            Direction::Right
        }
    }
}

pub const STOP: usize = 0;
pub const CONTINUE: usize = 1;

/// Valence caps for CHILD (`child`) and DECISION (`decision`) rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValenceConfig {
    pub child: usize,
    pub decision: usize,
}

impl Default for ValenceConfig {
    fn default() -> Self {
        ValenceConfig {
            child: 2,
            decision: 2,
        }
    }
}

impl ValenceConfig {
    pub fn new(child: usize, decision: usize) -> Result<Self> {
        if child == 0 || decision == 0 {
            return Err(Error::InvalidArgument(
                "valence caps must be at least 1".into(),
            ));
        }
        Ok(ValenceConfig { child, decision })
    }

    /// Number of distinct capped valence states needed by inference.
    pub fn states(self) -> usize {
        self.child.max(self.decision)
    }

    pub fn child_slot(self, generated: usize) -> usize {
        generated.min(self.child - 1)
    }

    pub fn decision_slot(self, generated: usize) -> usize {
        generated.min(self.decision - 1)
    }
}

/// Flat storage shared by parameters and counts.
///
/// Layout: `child[((h * 2 + d) * Vc + v) * m + c]`,
/// `decision[((h * 2 + d) * Vd + v) * 2 + {STOP, CONTINUE}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tables {
    vocab: usize,
    valence: ValenceConfig,
    root: Vec<f64>,
    child: Vec<f64>,
    decision: Vec<f64>,
}

impl Tables {
    fn zeros(vocab: usize, valence: ValenceConfig) -> Self {
        Tables {
            vocab,
            valence,
            root: vec![0.0; vocab],
            child: vec![0.0; vocab * 2 * valence.child * vocab],
            decision: vec![0.0; vocab * 2 * valence.decision * 2],
        }
    }

    fn child_offset(&self, h: usize, d: Direction, v: usize) -> usize {
        debug_assert!(v < self.valence.child);
        ((h * 2 + d.index()) * self.valence.child + v) * self.vocab
    }

    fn decision_offset(&self, h: usize, d: Direction, v: usize) -> usize {
        debug_assert!(v < self.valence.decision);
        ((h * 2 + d.index()) * self.valence.decision + v) * 2
    }

    fn child_row(&self, h: usize, d: Direction, v: usize) -> &[f64] {
        let o = self.child_offset(h, d, v);
        &self.child[o..o + self.vocab]
    }

    fn child_row_mut(&mut self, h: usize, d: Direction, v: usize) -> &mut [f64] {
        let o = self.child_offset(h, d, v);
        let m = self.vocab;
        &mut self.child[o..o + m]
    }

    fn decision_row(&self, h: usize, d: Direction, v: usize) -> &[f64] {
        let o = self.decision_offset(h, d, v);
        &self.decision[o..o + 2]
    }

    fn decision_row_mut(&mut self, h: usize, d: Direction, v: usize) -> &mut [f64] {
        let o = self.decision_offset(h, d, v);
        &mut self.decision[o..o + 2]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.root.as_slice())
            .chain(self.child.chunks(self.vocab))
            .chain(self.decision.chunks(2))
    }
}

/// A rule context: head token, direction, capped valence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    pub head: usize,
    pub dir: Direction,
    pub valence: usize,
}

/// Normalized extended-DMV rule probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmvParams {
    tables: Tables,
}

impl DmvParams {
    pub fn vocab_size(&self) -> usize {
        self.tables.vocab
    }

    pub fn valence(&self) -> ValenceConfig {
        self.tables.valence
    }

    pub fn root(&self) -> &[f64] {
        &self.tables.root
    }

    pub fn child(&self, h: usize, d: Direction, v: usize) -> &[f64] {
        self.tables.child_row(h, d, v)
    }

    /// `[p_stop, p_continue]`.
    pub fn decision(&self, h: usize, d: Direction, v: usize) -> &[f64] {
        self.tables.decision_row(h, d, v)
    }

    pub fn set_root(&mut self, probs: &[f64]) {
        self.tables.root.copy_from_slice(probs);
    }

    pub fn set_child(&mut self, h: usize, d: Direction, v: usize, probs: &[f64]) {
        self.tables.child_row_mut(h, d, v).copy_from_slice(probs);
    }

    pub fn set_decision(&mut self, h: usize, d: Direction, v: usize, probs: &[f64]) {
        self.tables.decision_row_mut(h, d, v).copy_from_slice(probs);
    }

    /// Every distribution in the table (root, then child, then decision rows).
    pub fn distributions(&self) -> impl Iterator<Item = &[f64]> {
        self.tables.rows()
    }

    /// Checks non-negativity, finiteness and sum-to-one within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (i, row) in self.distributions().enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::Numerical(format!(
                    "distribution {i} has invalid entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::Numerical(format!("distribution {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    fn from_fn(vocab: usize, valence: ValenceConfig, mut row: impl FnMut(&mut [f64])) -> Self {
        let mut tables = Tables::zeros(vocab, valence);
        row(&mut tables.root);
        for r in tables.child.chunks_mut(vocab) {
            row(r);
        }
        for r in tables.decision.chunks_mut(2) {
            row(r);
        }
        DmvParams { tables }
    }
}

/// Unnormalized rule counts with the same shape as [`DmvParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    tables: Tables,
}

impl CountTable {
    pub fn zeros(vocab: usize, valence: ValenceConfig) -> Self {
        CountTable {
            tables: Tables::zeros(vocab, valence),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tables.vocab
    }

    pub fn valence(&self) -> ValenceConfig {
        self.tables.valence
    }

    pub fn root(&self) -> &[f64] {
        &self.tables.root
    }

    pub fn child(&self, h: usize, d: Direction, v: usize) -> &[f64] {
        self.tables.child_row(h, d, v)
    }

    pub fn decision(&self, h: usize, d: Direction, v: usize) -> &[f64] {
        self.tables.decision_row(h, d, v)
    }

    pub fn add_root(&mut self, t: usize, w: f64) {
        self.tables.root[t] += w;
    }

    pub fn add_child(&mut self, h: usize, d: Direction, v: usize, c: usize, w: f64) {
        self.tables.child_row_mut(h, d, v)[c] += w;
    }

    pub fn add_decision(&mut self, h: usize, d: Direction, v: usize, outcome: usize, w: f64) {
        self.tables.decision_row_mut(h, d, v)[outcome] += w;
    }

    /// Entrywise addition.
    pub fn merge(&mut self, other: &CountTable) {
        assert_eq!(self.tables.vocab, other.tables.vocab);
        assert_eq!(self.tables.valence, other.tables.valence);
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.tables.root, &other.tables.root);
        add(&mut self.tables.child, &other.tables.child);
        add(&mut self.tables.decision, &other.tables.decision);
    }

    pub fn root_total(&self) -> f64 {
        self.tables.root.iter().sum()
    }

    pub fn child_total(&self) -> f64 {
        self.tables.child.iter().sum()
    }

    /// Total count of all entries; zero means an empty table.
    pub fn total(&self) -> f64 {
        self.root_total() + self.child_total() + self.tables.decision.iter().sum::<f64>()
    }

    pub fn is_valid(&self) -> bool {
        self.tables
            .rows()
            .flatten()
            .all(|&c| c.is_finite() && c >= 0.0)
    }
}

/// Merges count tables in the given order.
pub fn sum_counts(
    vocab: usize,
    valence: ValenceConfig,
    tables: impl IntoIterator<Item = CountTable>,
) -> CountTable {
    tables
        .into_iter()
        .fold(CountTable::zeros(vocab, valence), |mut acc, t| {
            acc.merge(&t);
            acc
        })
}

/// Normalizes each row: `p_i = (c_i + lambda) / (sum c + lambda K)`. An
/// all-zero row with `lambda = 0` becomes uniform.
pub fn normalize(counts: &CountTable, lambda: f64) -> DmvParams {
    let mut tables = counts.tables.clone();
    let norm = |row: &mut [f64]| {
        let k = row.len() as f64;
        let total: f64 = row.iter().sum::<f64>() + lambda * k;
        if total > 0.0 {
            row.iter_mut().for_each(|c| *c = (*c + lambda) / total);
        } else {
            row.iter_mut().for_each(|c| *c = 1.0 / k);
        }
    };
    norm(&mut tables.root);
    let m = tables.vocab;
    tables.child.chunks_mut(m).for_each(norm);
    tables.decision.chunks_mut(2).for_each(norm);
    DmvParams { tables }
}

/// Dependency tree over `n` positions; `None` marks the root attachment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParseTree {
    heads: Vec<Option<usize>>,
}

impl ParseTree {
    /// Builds a tree, checking single root, acyclicity and projectivity.
    pub fn new(heads: Vec<Option<usize>>) -> Result<Self> {
        check_tree(&heads).map_err(|reason| Error::InvalidTree {
            sentence: 0,
            reason,
        })?;
        Ok(ParseTree { heads })
    }

    /// From 1-based CoNLL heads (0 = root).
    pub fn from_conll_heads(heads: &[usize]) -> Result<Self> {
        Self::new(heads.iter().map(|&h| h.checked_sub(1)).collect())
    }

    pub(crate) fn new_unchecked(heads: Vec<Option<usize>>) -> Self {
        debug_assert!(check_tree(&heads).is_ok(), "{heads:?}");
        ParseTree { heads }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[Option<usize>] {
        &self.heads
    }

    pub fn root(&self) -> usize {
        self.heads
            .iter()
            .position(Option::is_none)
            .expect("validated tree has a root")
    }

    /// 1-based CoNLL heads (0 = root).
    pub fn conll_heads(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.map_or(0, |h| h + 1)).collect()
    }

    /// Dependents of `h` in direction `d`, nearest first.
    pub fn dependents(&self, h: usize, d: Direction) -> Vec<usize> {
        let mut deps: Vec<usize> = (0..self.heads.len())
            .filter(|&a| self.heads[a] == Some(h) && Direction::of_arc(h, a) == d)
            .collect();
        if d == Direction::Left {
            deps.reverse();
        }
        deps
    }
}

/// Validity check shared by [`ParseTree::new`] and callers that report
/// sentence indices.
pub fn check_tree(heads: &[Option<usize>]) -> std::result::Result<(), String> {
    let n = heads.len();
    if n == 0 {
        return Err("empty tree".into());
    }
    let roots = heads.iter().filter(|h| h.is_none()).count();
    if roots != 1 {
        return Err(format!(
            "expected exactly one root attachment, found {roots}"
        ));
    }
    for (a, h) in heads.iter().enumerate() {
        if let Some(h) = *h {
            if h >= n {
                return Err(format!("head {h} of token {a} out of range"));
            }
            if h == a {
                return Err(format!("token {a} heads itself"));
            }
        }
    }
    let is_ancestor = |anc: usize, mut node: usize| -> bool {
        let mut steps = 0;
        while let Some(h) = heads[node] {
            if h == anc {
                return true;
            }
            node = h;
            steps += 1;
            if steps > n {
                return false;
            }
        }
        false
    };
    for a in 0..n {
        let mut node = a;
        let mut steps = 0;
        while let Some(h) = heads[node] {
            node = h;
            steps += 1;
            if steps > n {
                return Err(format!("cycle through token {a}"));
            }
        }
    }
    for (a, h) in heads.iter().enumerate() {
        if let Some(h) = *h {
            let (lo, hi) = if h < a { (h, a) } else { (a, h) };
            if let Some(k) = (lo + 1..hi).find(|&k| !is_ancestor(h, k)) {
                return Err(format!("arc {h}->{a} is non-projective over token {k}"));
            }
        }
    }
    Ok(())
}

/// Adds the rule counts of one tree, each weighted by `weight`.
pub fn add_tree_counts(
    counts: &mut CountTable,
    sentence: &Sentence,
    tree: &ParseTree,
    weight: f64,
) {
    let vcfg = counts.valence();
    let toks = &sentence.token_ids;
    counts.add_root(toks[tree.root()], weight);
    for h in 0..tree.len() {
        for d in Direction::BOTH {
            let deps = tree.dependents(h, d);
            for (i, &a) in deps.iter().enumerate() {
                counts.add_decision(toks[h], d, vcfg.decision_slot(i), CONTINUE, weight);
                counts.add_child(toks[h], d, vcfg.child_slot(i), toks[a], weight);
            }
            counts.add_decision(toks[h], d, vcfg.decision_slot(deps.len()), STOP, weight);
        }
    }
}

pub fn init_uniform(vocab: usize, valence: ValenceConfig) -> DmvParams {
    DmvParams::from_fn(vocab, valence, |row| {
        let p = 1.0 / row.len() as f64;
        row.fill(p);
    })
}

/// Each distribution gets i.i.d. uniform positive weights, normalized.
pub fn init_random(vocab: usize, valence: ValenceConfig, seed: u64) -> DmvParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DmvParams::from_fn(vocab, valence, |row| {
        for x in row.iter_mut() {
            // (0, 1]
            *x = 1.0 - rng.gen::<f64>();
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    })
}

/// Harmonic counts used by KM initialization, before normalization.
pub fn km_counts(corpus: &[Sentence], vocab: usize, valence: ValenceConfig) -> CountTable {
    let mut counts = CountTable::zeros(vocab, valence);
    for s in corpus {
        let n = s.len();
        let toks = &s.token_ids;
        // mass[h][d]: total attachment weight given to h in direction d
        let mut mass = vec![[0.0f64; 2]; n];
        for a in 0..n {
            let root_w = 1.0 / n as f64;
            let total: f64 = root_w
                + (0..n)
                    .filter(|&h| h != a)
                    .map(|h| 1.0 / h.abs_diff(a) as f64)
                    .sum::<f64>();
            counts.add_root(toks[a], root_w / total);
            for h in (0..n).filter(|&h| h != a) {
                let w = (1.0 / h.abs_diff(a) as f64) / total;
                let d = Direction::of_arc(h, a);
                for v in 0..valence.child {
                    counts.add_child(toks[h], d, v, toks[a], w);
                }
                mass[h][d.index()] += w;
            }
        }
        for h in 0..n {
            for d in Direction::BOTH {
                for v in 0..valence.decision {
                    counts.add_decision(toks[h], d, v, CONTINUE, mass[h][d.index()]);
                    counts.add_decision(toks[h], d, v, STOP, 1.0);
                }
            }
        }
    }
    counts
}

/// Klein-and-Manning style harmonic initialization (normalized with no
/// smoothing).
pub fn init_km(corpus: &[Sentence], vocab: usize, valence: ValenceConfig) -> DmvParams {
    normalize(&km_counts(corpus, vocab, valence), 0.0)
}

/// Maximum-likelihood estimate from trees, smoothed by `lambda`.
pub fn mle_from_trees(
    corpus: &[Sentence],
    trees: &[ParseTree],
    vocab: usize,
    valence: ValenceConfig,
    lambda: f64,
) -> Result<DmvParams> {
    if corpus.len() != trees.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sentences but {} trees",
            corpus.len(),
            trees.len()
        )));
    }
    let mut counts = CountTable::zeros(vocab, valence);
    for (i, (s, t)) in corpus.iter().zip(trees).enumerate() {
        if s.len() != t.len() {
            return Err(Error::InvalidTree {
                sentence: i,
                reason: format!("tree has {} heads for {} tokens", t.len(), s.len()),
            });
        }
        add_tree_counts(&mut counts, s, t, 1.0);
    }
    Ok(normalize(&counts, lambda))
}

/// Trees from each sentence's gold heads, with errors naming the sentence.
pub fn gold_trees(corpus: &[Sentence]) -> Result<Vec<ParseTree>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let heads = s.gold_heads.as_ref().ok_or_else(|| Error::InvalidTree {
                sentence: i,
                reason: "no gold heads".into(),
            })?;
            let heads: Vec<Option<usize>> = heads.iter().map(|&h| h.checked_sub(1)).collect();
            check_tree(&heads).map_err(|reason| Error::InvalidTree {
                sentence: i,
                reason,
            })?;
            Ok(ParseTree::new_unchecked(heads))
        })
        .collect()
}

/// MLE on the gold heads carried by the corpus.
pub fn mle_from_gold(
    corpus: &[Sentence],
    vocab: usize,
    valence: ValenceConfig,
    lambda: f64,
) -> Result<DmvParams> {
    let trees = gold_trees(corpus)?;
    mle_from_trees(corpus, &trees, vocab, valence, lambda)
}
