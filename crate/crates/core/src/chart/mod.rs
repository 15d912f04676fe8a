//! Exact inference for the extended DMV over split-head half-constituents.
//!
//! Items, for a head `h` and an outer position `e`:
//!
//! * `open[h][e][v]`: the half-constituent of `h` reaching `e`, all of its
//!   dependents on that side inside `h..=e` finished, `v` (capped) dependents
//!   generated so far and no STOP yet.
//! * `arc[h][e][v]`: like `open`, but `e` has just been attached as the
//!   farthest dependent and only `e`'s inner half is built.
//! * `sealed[h][e]`: `open` followed by STOP.
//!
//! Right-facing items have `e >= h`, left-facing ones `e <= h`. Everything is
//! computed in the log domain.

pub mod oracle;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::logmath::{log_add, log_add_assign, NEG_INF};
use crate::model::{
    check_tree, CountTable, Direction, DmvParams, ParseTree, ValenceConfig, CONTINUE, STOP,
};

const L: usize = 0;
const R: usize = 1;

/// Per-sentence log rule scores, indexed by position.
struct Scores {
    n: usize,
    states: usize,
    root: Vec<f64>,
    /// `[pos][dir][v]`
    stop: Vec<f64>,
    cont: Vec<f64>,
    /// `[head][dep][v]`
    child: Vec<f64>,
}

impl Scores {
    fn new(sentence: &Sentence, params: &DmvParams, floor: Option<f64>) -> Self {
        let vcfg = params.valence();
        let states = vcfg.states();
        let n = sentence.len();
        let toks = &sentence.token_ids;
        let ln = |p: f64| {
            let x = p.ln();
            match floor {
                Some(f) if x < f => f,
                _ => x,
            }
        };
        let mut stop = vec![0.0; n * 2 * states];
        let mut cont = vec![0.0; n * 2 * states];
        let mut child = vec![NEG_INF; n * n * states];
        for i in 0..n {
            for d in Direction::BOTH {
                for v in 0..states {
                    let dec = params.decision(toks[i], d, vcfg.decision_slot(v));
                    stop[(i * 2 + d.index()) * states + v] = ln(dec[STOP]);
                    cont[(i * 2 + d.index()) * states + v] = ln(dec[CONTINUE]);
                }
            }
            for a in 0..n {
                if a == i {
                    continue;
                }
                let d = Direction::of_arc(i, a);
                for v in 0..states {
                    child[(i * n + a) * states + v] =
                        ln(params.child(toks[i], d, vcfg.child_slot(v))[toks[a]]);
                }
            }
        }
        Scores {
            n,
            states,
            root: toks.iter().map(|&t| ln(params.root()[t])).collect(),
            stop,
            cont,
            child,
        }
    }

    #[inline]
    fn stop(&self, i: usize, d: usize, v: usize) -> f64 {
        self.stop[(i * 2 + d) * self.states + v]
    }

    #[inline]
    fn cont(&self, i: usize, d: usize, v: usize) -> f64 {
        self.cont[(i * 2 + d) * self.states + v]
    }

    #[inline]
    fn child(&self, h: usize, a: usize, v: usize) -> f64 {
        self.child[(h * self.n + a) * self.states + v]
    }

    #[inline]
    fn next(&self, v: usize) -> usize {
        (v + 1).min(self.states - 1)
    }
}

/// Log-domain chart of split-head items. The same layout holds inside scores
/// and outside scores.
#[derive(Clone, Debug)]
pub struct Chart {
    n: usize,
    states: usize,
    open: [Vec<f64>; 2],
    arc: [Vec<f64>; 2],
    sealed: [Vec<f64>; 2],
}

impl Chart {
    fn new(n: usize, states: usize) -> Self {
        let item = || vec![NEG_INF; n * n * states];
        let sealed = || vec![NEG_INF; n * n];
        Chart {
            n,
            states,
            open: [item(), item()],
            arc: [item(), item()],
            sealed: [sealed(), sealed()],
        }
    }

    #[inline]
    fn iv(&self, h: usize, e: usize, v: usize) -> usize {
        (h * self.n + e) * self.states + v
    }

    #[inline]
    fn is(&self, h: usize, e: usize) -> usize {
        h * self.n + e
    }

    pub fn sentence_len(&self) -> usize {
        self.n
    }

    /// Score of `sealed[h][e]` facing `dir`.
    pub fn sealed(&self, dir: Direction, h: usize, e: usize) -> f64 {
        self.sealed[dir.index()][self.is(h, e)]
    }

    pub fn open(&self, dir: Direction, h: usize, e: usize, v: usize) -> f64 {
        self.open[dir.index()][self.iv(h, e, v)]
    }

    pub fn arc(&self, dir: Direction, h: usize, e: usize, v: usize) -> f64 {
        self.arc[dir.index()][self.iv(h, e, v)]
    }
}

/// Inside chart together with the sentence log-probability.
#[derive(Clone, Debug)]
pub struct InsideChart {
    pub chart: Chart,
    pub log_prob: f64,
}

/// Outside chart; the goal item has outside score 0.
#[derive(Clone, Debug)]
pub struct OutsideChart {
    pub chart: Chart,
    /// Outside score of the goal item (always 0).
    pub goal: f64,
}

fn inside_with(s: &Scores) -> InsideChart {
    let n = s.n;
    let mut c = Chart::new(n, s.states);
    for h in 0..n {
        let i = c.iv(h, h, 0);
        c.open[L][i] = 0.0;
        c.open[R][i] = 0.0;
        let i = c.is(h, h);
        c.sealed[L][i] = s.stop(h, L, 0);
        c.sealed[R][i] = s.stop(h, R, 0);
    }
    for w in 1..n {
        for i in 0..n - w {
            let j = i + w;
            // h = i attaches j on the right; h = j attaches i on the left.
            for k in i..j {
                let inner = c.sealed[L][c.is(j, k + 1)];
                for v in 0..s.states {
                    let x = c.open[R][c.iv(i, k, v)] + s.cont(i, R, v) + s.child(i, j, v) + inner;
                    let t = c.iv(i, j, s.next(v));
                    log_add_assign(&mut c.arc[R][t], x);
                }
            }
            for k in i + 1..=j {
                let inner = c.sealed[R][c.is(i, k - 1)];
                for v in 0..s.states {
                    let x = c.open[L][c.iv(j, k, v)] + s.cont(j, L, v) + s.child(j, i, v) + inner;
                    let t = c.iv(j, i, s.next(v));
                    log_add_assign(&mut c.arc[L][t], x);
                }
            }
        }
        for i in 0..n - w {
            let j = i + w;
            for v in 0..s.states {
                let mut right = NEG_INF;
                for k in i + 1..=j {
                    log_add_assign(
                        &mut right,
                        c.arc[R][c.iv(i, k, v)] + c.sealed[R][c.is(k, j)],
                    );
                }
                let t = c.iv(i, j, v);
                c.open[R][t] = right;
                let mut left = NEG_INF;
                for k in i..j {
                    log_add_assign(&mut left, c.arc[L][c.iv(j, k, v)] + c.sealed[L][c.is(k, i)]);
                }
                let t = c.iv(j, i, v);
                c.open[L][t] = left;
            }
            let mut right = NEG_INF;
            let mut left = NEG_INF;
            for v in 0..s.states {
                log_add_assign(&mut right, c.open[R][c.iv(i, j, v)] + s.stop(i, R, v));
                log_add_assign(&mut left, c.open[L][c.iv(j, i, v)] + s.stop(j, L, v));
            }
            let t = c.is(i, j);
            c.sealed[R][t] = right;
            let t = c.is(j, i);
            c.sealed[L][t] = left;
        }
    }
    let log_prob = (0..n).fold(NEG_INF, |acc, r| {
        log_add(
            acc,
            s.root[r] + c.sealed[L][c.is(r, 0)] + c.sealed[R][c.is(r, n - 1)],
        )
    });
    InsideChart { chart: c, log_prob }
}

/// Inside pass. `log_prob` is the log of the summed probability of all
/// single-rooted projective trees.
pub fn inside(sentence: &Sentence, params: &DmvParams) -> InsideChart {
    assert!(!sentence.is_empty(), "inside() needs a non-empty sentence");
    inside_with(&Scores::new(sentence, params, None))
}

fn outside_with(s: &Scores, ins: &Chart) -> Chart {
    let n = s.n;
    let mut o = Chart::new(n, s.states);
    for r in 0..n {
        let li = ins.is(r, 0);
        let ri = ins.is(r, n - 1);
        log_add_assign(&mut o.sealed[L][li], s.root[r] + ins.sealed[R][ri]);
        log_add_assign(&mut o.sealed[R][ri], s.root[r] + ins.sealed[L][li]);
    }
    for w in (0..n).rev() {
        for i in 0..n - w {
            let j = i + w;
            // sealed -> open
            let (sr, sl) = (o.sealed[R][o.is(i, j)], o.sealed[L][o.is(j, i)]);
            for v in 0..s.states {
                if sr > NEG_INF {
                    let t = o.iv(i, j, v);
                    log_add_assign(&mut o.open[R][t], sr + s.stop(i, R, v));
                }
                if sl > NEG_INF {
                    let t = o.iv(j, i, v);
                    log_add_assign(&mut o.open[L][t], sl + s.stop(j, L, v));
                }
            }
        }
        if w == 0 {
            break;
        }
        for i in 0..n - w {
            let j = i + w;
            // open -> arc + sealed
            for v in 0..s.states {
                let out_r = o.open[R][o.iv(i, j, v)];
                if out_r > NEG_INF {
                    for k in i + 1..=j {
                        let a = o.iv(i, k, v);
                        let b = o.is(k, j);
                        log_add_assign(&mut o.arc[R][a], out_r + ins.sealed[R][b]);
                        log_add_assign(&mut o.sealed[R][b], out_r + ins.arc[R][a]);
                    }
                }
                let out_l = o.open[L][o.iv(j, i, v)];
                if out_l > NEG_INF {
                    for k in i..j {
                        let a = o.iv(j, k, v);
                        let b = o.is(k, i);
                        log_add_assign(&mut o.arc[L][a], out_l + ins.sealed[L][b]);
                        log_add_assign(&mut o.sealed[L][b], out_l + ins.arc[L][a]);
                    }
                }
            }
        }
        for i in 0..n - w {
            let j = i + w;
            // arc -> open + sealed(dependent's inner half)
            for k in i..j {
                let b = o.is(j, k + 1);
                for v in 0..s.states {
                    let out = o.arc[R][o.iv(i, j, s.next(v))];
                    if out == NEG_INF {
                        continue;
                    }
                    let rule = s.cont(i, R, v) + s.child(i, j, v);
                    let a = o.iv(i, k, v);
                    log_add_assign(&mut o.open[R][a], out + rule + ins.sealed[L][b]);
                    log_add_assign(&mut o.sealed[L][b], out + rule + ins.open[R][a]);
                }
            }
            for k in i + 1..=j {
                let b = o.is(i, k - 1);
                for v in 0..s.states {
                    let out = o.arc[L][o.iv(j, i, s.next(v))];
                    if out == NEG_INF {
                        continue;
                    }
                    let rule = s.cont(j, L, v) + s.child(j, i, v);
                    let a = o.iv(j, k, v);
                    log_add_assign(&mut o.open[L][a], out + rule + ins.sealed[R][b]);
                    log_add_assign(&mut o.sealed[R][b], out + rule + ins.open[L][a]);
                }
            }
        }
    }
    o
}

/// Outside pass for a sentence whose inside chart is given.
pub fn outside(sentence: &Sentence, params: &DmvParams, inside: &InsideChart) -> OutsideChart {
    let s = Scores::new(sentence, params, None);
    OutsideChart {
        chart: outside_with(&s, &inside.chart),
        goal: 0.0,
    }
}

/// Posterior rule counts plus arc marginals for one sentence.
pub struct Posteriors {
    pub counts: CountTable,
    /// `parent[a][h]` for `h < n`, and `parent[a][n]` for the root.
    pub parent: Vec<Vec<f64>>,
    pub log_prob: f64,
}

/// Visits every rule application with its posterior probability.
#[allow(clippy::needless_range_loop)]
fn posteriors_with(sentence: &Sentence, params: &DmvParams, s: &Scores) -> Posteriors {
    let n = s.n;
    let vcfg = params.valence();
    let ins = inside_with(s);
    let mut counts = CountTable::zeros(params.vocab_size(), vcfg);
    let mut parent = vec![vec![0.0; n + 1]; n];
    let z = ins.log_prob;
    if z == NEG_INF {
        return Posteriors {
            counts,
            parent,
            log_prob: z,
        };
    }
    let c = &ins.chart;
    let o = outside_with(s, c);
    let toks = &sentence.token_ids;
    for r in 0..n {
        let p = (s.root[r] + c.sealed[L][c.is(r, 0)] + c.sealed[R][c.is(r, n - 1)] - z).exp();
        counts.add_root(toks[r], p);
        parent[r][n] += p;
    }
    for h in 0..n {
        for e in 0..n {
            for (d, dir) in [(L, Direction::Left), (R, Direction::Right)] {
                if (d == L && e > h) || (d == R && e < h) {
                    continue;
                }
                let out = o.sealed[d][o.is(h, e)];
                if out == NEG_INF {
                    continue;
                }
                for v in 0..s.states {
                    let p = (out + c.open[d][c.iv(h, e, v)] + s.stop(h, d, v) - z).exp();
                    if p > 0.0 {
                        counts.add_decision(toks[h], dir, vcfg.decision_slot(v), STOP, p);
                    }
                }
            }
        }
    }
    for w in 1..n {
        for i in 0..n - w {
            let j = i + w;
            for k in i..j {
                for v in 0..s.states {
                    let out = o.arc[R][o.iv(i, j, s.next(v))];
                    if out == NEG_INF {
                        continue;
                    }
                    let x = out
                        + c.open[R][c.iv(i, k, v)]
                        + s.cont(i, R, v)
                        + s.child(i, j, v)
                        + c.sealed[L][c.is(j, k + 1)];
                    let p = (x - z).exp();
                    if p > 0.0 {
                        counts.add_decision(
                            toks[i],
                            Direction::Right,
                            vcfg.decision_slot(v),
                            CONTINUE,
                            p,
                        );
                        counts.add_child(toks[i], Direction::Right, vcfg.child_slot(v), toks[j], p);
                        parent[j][i] += p;
                    }
                }
            }
            for k in i + 1..=j {
                for v in 0..s.states {
                    let out = o.arc[L][o.iv(j, i, s.next(v))];
                    if out == NEG_INF {
                        continue;
                    }
                    let x = out
                        + c.open[L][c.iv(j, k, v)]
                        + s.cont(j, L, v)
                        + s.child(j, i, v)
                        + c.sealed[R][c.is(i, k - 1)];
                    let p = (x - z).exp();
                    if p > 0.0 {
                        counts.add_decision(
                            toks[j],
                            Direction::Left,
                            vcfg.decision_slot(v),
                            CONTINUE,
                            p,
                        );
                        counts.add_child(toks[j], Direction::Left, vcfg.child_slot(v), toks[i], p);
                        parent[i][j] += p;
                    }
                }
            }
        }
    }
    Posteriors {
        counts,
        parent,
        log_prob: z,
    }
}

/// Posterior rule counts, arc marginals and sentence log-probability.
pub fn posteriors(sentence: &Sentence, params: &DmvParams) -> Posteriors {
    posteriors_with(sentence, params, &Scores::new(sentence, params, None))
}

/// Posterior-expected rule counts for one sentence. A sentence with zero
/// probability contributes nothing.
pub fn expected_counts(sentence: &Sentence, params: &DmvParams) -> CountTable {
    posteriors(sentence, params).counts
}

/// Per-position parent posteriors: row `a` holds `P(head(a) = h)` for
/// `h < n` and the root probability in column `n`.
pub fn arc_posteriors(sentence: &Sentence, params: &DmvParams) -> Vec<Vec<f64>> {
    posteriors(sentence, params).parent
}

/// Zero-probability rules are scored with this value during Viterbi so that a
/// structurally valid tree is always returned.
const VITERBI_FLOOR: f64 = -1e250;

#[derive(Clone, Copy, Default)]
struct Back {
    split: usize,
    valence: usize,
}

/// Highest-probability projective tree and its log-probability.
///
/// Ties keep the first candidate in a fixed scan order: lower root index,
/// then lower split point and valence.
pub fn viterbi(sentence: &Sentence, params: &DmvParams) -> (ParseTree, f64) {
    assert!(!sentence.is_empty(), "viterbi() needs a non-empty sentence");
    let s = Scores::new(sentence, params, Some(VITERBI_FLOOR));
    let n = s.n;
    let st = s.states;
    let mut c = Chart::new(n, st);
    let mut arc_bp = [
        vec![Back::default(); n * n * st],
        vec![Back::default(); n * n * st],
    ];
    let mut open_bp = [vec![0usize; n * n * st], vec![0usize; n * n * st]];
    let mut sealed_bp = [vec![0usize; n * n], vec![0usize; n * n]];

    let better = |best: f64, x: f64, first: bool| first || x > best;

    for h in 0..n {
        let i = c.iv(h, h, 0);
        c.open[L][i] = 0.0;
        c.open[R][i] = 0.0;
        let i = c.is(h, h);
        c.sealed[L][i] = s.stop(h, L, 0);
        c.sealed[R][i] = s.stop(h, R, 0);
    }
    for w in 1..n {
        for i in 0..n - w {
            let j = i + w;
            let mut seen_r = vec![false; st];
            for k in i..j {
                let inner = c.sealed[L][c.is(j, k + 1)];
                for v in 0..st {
                    let x = c.open[R][c.iv(i, k, v)] + s.cont(i, R, v) + s.child(i, j, v) + inner;
                    let nv = s.next(v);
                    let t = c.iv(i, j, nv);
                    if x > NEG_INF && better(c.arc[R][t], x, !seen_r[nv]) {
                        c.arc[R][t] = x;
                        arc_bp[R][t] = Back {
                            split: k,
                            valence: v,
                        };
                        seen_r[nv] = true;
                    }
                }
            }
            let mut seen_l = vec![false; st];
            for k in i + 1..=j {
                let inner = c.sealed[R][c.is(i, k - 1)];
                for v in 0..st {
                    let x = c.open[L][c.iv(j, k, v)] + s.cont(j, L, v) + s.child(j, i, v) + inner;
                    let nv = s.next(v);
                    let t = c.iv(j, i, nv);
                    if x > NEG_INF && better(c.arc[L][t], x, !seen_l[nv]) {
                        c.arc[L][t] = x;
                        arc_bp[L][t] = Back {
                            split: k,
                            valence: v,
                        };
                        seen_l[nv] = true;
                    }
                }
            }
        }
        for i in 0..n - w {
            let j = i + w;
            for v in 0..st {
                let t = c.iv(i, j, v);
                let mut first = true;
                for k in i + 1..=j {
                    let x = c.arc[R][c.iv(i, k, v)] + c.sealed[R][c.is(k, j)];
                    if x > NEG_INF && better(c.open[R][t], x, first) {
                        c.open[R][t] = x;
                        open_bp[R][t] = k;
                        first = false;
                    }
                }
                let t = c.iv(j, i, v);
                let mut first = true;
                for k in (i..j).rev() {
                    let x = c.arc[L][c.iv(j, k, v)] + c.sealed[L][c.is(k, i)];
                    if x > NEG_INF && better(c.open[L][t], x, first) {
                        c.open[L][t] = x;
                        open_bp[L][t] = k;
                        first = false;
                    }
                }
            }
            let (tr, tl) = (c.is(i, j), c.is(j, i));
            let (mut fr, mut fl) = (true, true);
            for v in 0..st {
                let x = c.open[R][c.iv(i, j, v)] + s.stop(i, R, v);
                if x > NEG_INF && better(c.sealed[R][tr], x, fr) {
                    c.sealed[R][tr] = x;
                    sealed_bp[R][tr] = v;
                    fr = false;
                }
                let x = c.open[L][c.iv(j, i, v)] + s.stop(j, L, v);
                if x > NEG_INF && better(c.sealed[L][tl], x, fl) {
                    c.sealed[L][tl] = x;
                    sealed_bp[L][tl] = v;
                    fl = false;
                }
            }
        }
    }
    let mut best_root = 0;
    let mut best = NEG_INF;
    for r in 0..n {
        let x = s.root[r] + c.sealed[L][c.is(r, 0)] + c.sealed[R][c.is(r, n - 1)];
        if r == 0 || x > best {
            best = x;
            best_root = r;
        }
    }

    let mut heads: Vec<Option<usize>> = vec![None; n];
    // (direction, head, outer end) of sealed items still to expand
    let mut stack = vec![(L, best_root, 0usize), (R, best_root, n - 1)];
    while let Some((d, h, e)) = stack.pop() {
        if h == e {
            continue;
        }
        let mut v = sealed_bp[d][c.is(h, e)];
        let mut end = e;
        // Peel dependents farthest-first.
        while end != h {
            let k = open_bp[d][c.iv(h, end, v)];
            // arc[h][k][v] then sealed[k][end]
            stack.push((d, k, end));
            heads[k] = Some(h);
            let back = arc_bp[d][c.iv(h, k, v)];
            if d == R {
                stack.push((L, k, back.split + 1));
            } else {
                stack.push((R, k, back.split - 1));
            }
            v = back.valence;
            end = back.split;
        }
    }
    let score = if best <= VITERBI_FLOOR / 2.0 {
        NEG_INF
    } else {
        best
    };
    (ParseTree::new_unchecked(heads), score)
}

/// Log-probability of a given tree under the generative model.
pub fn tree_log_prob(tree: &ParseTree, sentence: &Sentence, params: &DmvParams) -> Result<f64> {
    if tree.len() != sentence.len() {
        return Err(Error::InvalidTree {
            sentence: 0,
            reason: format!("{} heads for {} tokens", tree.len(), sentence.len()),
        });
    }
    check_tree(tree.heads()).map_err(|reason| Error::InvalidTree {
        sentence: 0,
        reason,
    })?;
    let vcfg: ValenceConfig = params.valence();
    let toks = &sentence.token_ids;
    let mut lp = params.root()[toks[tree.root()]].ln();
    for h in 0..tree.len() {
        for d in Direction::BOTH {
            let deps = tree.dependents(h, d);
            for (i, &a) in deps.iter().enumerate() {
                lp += params.decision(toks[h], d, vcfg.decision_slot(i))[CONTINUE].ln();
                lp += params.child(toks[h], d, vcfg.child_slot(i))[toks[a]].ln();
            }
            lp += params.decision(toks[h], d, vcfg.decision_slot(deps.len()))[STOP].ln();
        }
    }
    Ok(lp)
}
