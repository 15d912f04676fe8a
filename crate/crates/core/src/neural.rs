//! Neural CHILD/DECISION rule probabilities.
//!
//! For a context (head token, direction, valence) the input is the
//! concatenation `[valence vector; head word vector; head tag vector]`. A
//! direction-specific layer with ReLU gives the hidden vector `f`, optionally
//! projected to the output width `k_word + k_tag`. CHILD scores are the dot
//! products of that vector with each candidate's `[word row; tag row]`, where
//! the tag row is shared by every token with the same POS. DECISION scores
//! come from a separate 2-row output matrix. Both are softmaxed.
//!
//! The network is trained on rule counts by minimizing the count-weighted
//! negative log-likelihood with mini-batched momentum SGD.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Lexicon;
use crate::error::{Error, Result};
use crate::model::{normalize, CountTable, Direction, DmvParams, ValenceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub d_word_in: usize,
    pub d_tag_in: usize,
    pub d_val: usize,
    pub k_word: usize,
    pub k_tag: usize,
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Contexts per mini-batch.
    pub batch: usize,
    /// Passes over the count table per M-step.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            d_word_in: 100,
            d_tag_in: 20,
            d_val: 10,
            k_word: 100,
            k_tag: 20,
            hidden: 120,
            lr: 0.03,
            momentum: 0.9,
            batch: 200,
            epochs: 1,
            seed: 0,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_word_in,
            self.d_tag_in,
            self.d_val,
            self.k_word,
            self.k_tag,
            self.hidden,
            self.batch,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "neural dimensions and batch size must be >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.d_val + self.d_word_in + self.d_tag_in
    }

    fn output_dim(&self) -> usize {
        self.k_word + self.k_tag
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x`
    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `out += self^T * y`
    fn add_mul_t(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += y x^T`
    fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, x, self.row_mut(r));
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Input word and tag vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub word: Matrix,
    pub tag: Matrix,
}

/// How many rows of each embedding table came from files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VectorCoverage {
    pub words_found: usize,
    pub words_total: usize,
    pub tags_found: usize,
    pub tags_total: usize,
}

/// Keys and vectors in file order.
pub type VectorRows = Vec<(String, Vec<f64>)>;

/// Direction, valence, CHILD and DECISION distributions of one context.
type ExportRow = (Direction, usize, Option<Vec<f64>>, Option<Vec<f64>>);

/// Range of the seeded uniform noise used for vectors missing from files.
pub const RANDOM_VECTOR_SCALE: f64 = 0.01;
/// Range of the seeded uniform initialization of all other weights.
pub const WEIGHT_INIT_SCALE: f64 = 0.05;

/// Loads input vectors in word2vec text format.
///
/// Word vectors are keyed by token name (`word/TAG`, or `TAG` for POS-only
/// tokens); a lexical token missing from the file also tries its bare word.
/// Tag vectors are keyed by the POS string. Anything not found gets seeded
/// random values. A path that does not exist is an error unless
/// `allow_random` is set.
pub fn load_vectors(
    word_path: Option<&Path>,
    tag_path: Option<&Path>,
    lexicon: &Lexicon,
    cfg: &NeuralConfig,
    allow_random: bool,
) -> Result<(Embeddings, VectorCoverage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut word = Matrix::uniform(lexicon.len(), cfg.d_word_in, RANDOM_VECTOR_SCALE, &mut rng);
    let mut tag = Matrix::uniform(
        lexicon.num_tags(),
        cfg.d_tag_in,
        RANDOM_VECTOR_SCALE,
        &mut rng,
    );
    let mut cov = VectorCoverage {
        words_total: lexicon.len(),
        tags_total: lexicon.num_tags(),
        ..Default::default()
    };

    let open = |p: Option<&Path>| -> Result<Option<VectorRows>> {
        match p {
            Some(p) if p.exists() => read_word2vec(p, None).map(Some),
            Some(p) if !allow_random => Err(Error::io(
                p,
                std::io::Error::from(std::io::ErrorKind::NotFound),
            )),
            _ => Ok(None),
        }
    };

    if let Some(p) = word_path {
        if let Some(rows) = open(Some(p))? {
            check_dim(p, &rows, cfg.d_word_in)?;
            let map: std::collections::HashMap<&str, &[f64]> = rows
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_slice()))
                .collect();
            for (id, desc) in lexicon.tokens().iter().enumerate() {
                let name = lexicon.token_name(id);
                let hit = map
                    .get(name.as_str())
                    .or_else(|| desc.word.as_deref().and_then(|w| map.get(w)));
                if let Some(v) = hit {
                    word.row_mut(id).copy_from_slice(v);
                    cov.words_found += 1;
                }
            }
        }
    }
    if let Some(p) = tag_path {
        if let Some(rows) = open(Some(p))? {
            check_dim(p, &rows, cfg.d_tag_in)?;
            for (name, v) in &rows {
                if let Some(t) = lexicon.tag_id(name) {
                    tag.row_mut(t).copy_from_slice(v);
                    cov.tags_found += 1;
                }
            }
        }
    }
    Ok((Embeddings { word, tag }, cov))
}

fn check_dim(path: &Path, rows: &[(String, Vec<f64>)], want: usize) -> Result<()> {
    match rows.first() {
        Some((_, v)) if v.len() != want => Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "vector dimension {} does not match configured {want}",
                v.len()
            ),
        }),
        _ => Ok(()),
    }
}

/// Reads a word2vec text file: a `count dim` header, then `token v1 .. vdim`.
pub fn read_word2vec(path: &Path, expect_dim: Option<usize>) -> Result<VectorRows> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = lines
        .next()
        .ok_or_else(|| perr(1, "empty vector file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match parts.as_slice() {
        [c, d] => (
            c.parse::<usize>()
                .map_err(|_| perr(1, format!("bad header '{header}'")))?,
            d.parse::<usize>()
                .map_err(|_| perr(1, format!("bad header '{header}'")))?,
        ),
        _ => return Err(perr(1, format!("bad header '{header}'"))),
    };
    if let Some(want) = expect_dim {
        if want != dim {
            return Err(perr(
                1,
                format!("vector dimension {dim} does not match configured {want}"),
            ));
        }
    }
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default().to_string();
        let values: std::result::Result<Vec<f64>, _> = it.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| perr(line_no, format!("bad vector value: {e}")))?;
        if values.len() != dim {
            return Err(perr(
                line_no,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        rows.push((key, values));
    }
    Ok(rows)
}

/// All trainable tensors. Kept in a fixed order so that gradients and
/// velocities can mirror it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub word_in: Matrix,
    pub tag_in: Matrix,
    pub val_in: Matrix,
    /// Indexed by direction.
    pub hidden: [Matrix; 2],
    pub hidden_bias: [Matrix; 2],
    pub projection: Option<Matrix>,
    pub word_out: Matrix,
    pub tag_out: Matrix,
    pub child_bias: Matrix,
    pub decision_out: Matrix,
    pub decision_bias: Matrix,
}

impl Weights {
    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        Weights {
            word_in: z(&self.word_in),
            tag_in: z(&self.tag_in),
            val_in: z(&self.val_in),
            hidden: [z(&self.hidden[0]), z(&self.hidden[1])],
            hidden_bias: [z(&self.hidden_bias[0]), z(&self.hidden_bias[1])],
            projection: self.projection.as_ref().map(z),
            word_out: z(&self.word_out),
            tag_out: z(&self.tag_out),
            child_bias: z(&self.child_bias),
            decision_out: z(&self.decision_out),
            decision_bias: z(&self.decision_bias),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![
            &self.word_in,
            &self.tag_in,
            &self.val_in,
            &self.hidden[0],
            &self.hidden[1],
            &self.hidden_bias[0],
            &self.hidden_bias[1],
        ];
        v.extend(self.projection.as_ref());
        v.extend([
            &self.word_out,
            &self.tag_out,
            &self.child_bias,
            &self.decision_out,
            &self.decision_bias,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let [h0, h1] = &mut self.hidden;
        let [b0, b1] = &mut self.hidden_bias;
        let mut v = vec![
            &mut self.word_in,
            &mut self.tag_in,
            &mut self.val_in,
            h0,
            h1,
            b0,
            b1,
        ];
        v.extend(self.projection.as_mut());
        v.extend([
            &mut self.word_out,
            &mut self.tag_out,
            &mut self.child_bias,
            &mut self.decision_out,
            &mut self.decision_bias,
        ]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|m| m.data.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleFamily {
    Child,
    Decision,
}

/// Intermediate values of the shared trunk for one context.
struct Trunk {
    x: Vec<f64>,
    pre: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

/// Deliberate gradient corruption used to prove the checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradFault {
    #[default]
    None,
    FlipSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    config: NeuralConfig,
    valence: ValenceConfig,
    token_tags: Vec<usize>,
    pub weights: Weights,
    velocity: Weights,
    fit_calls: u64,
}

/// Summary of one call to [`NeuralModel::fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitStats {
    /// Mean per-count loss of each epoch, measured during the pass.
    pub epoch_losses: Vec<f64>,
    pub contexts: usize,
}

impl NeuralModel {
    pub fn new(
        lexicon: &Lexicon,
        valence: ValenceConfig,
        config: NeuralConfig,
        embeddings: Embeddings,
    ) -> Result<Self> {
        config.validate()?;
        if embeddings.word.rows != lexicon.len() || embeddings.word.cols != config.d_word_in {
            return Err(Error::InvalidArgument(
                "word vector table has the wrong shape".into(),
            ));
        }
        if embeddings.tag.rows != lexicon.num_tags() || embeddings.tag.cols != config.d_tag_in {
            return Err(Error::InvalidArgument(
                "tag vector table has the wrong shape".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = WEIGHT_INIT_SCALE;
        let (h, din, kout) = (config.hidden, config.input_dim(), config.output_dim());
        let weights = Weights {
            word_in: embeddings.word,
            tag_in: embeddings.tag,
            val_in: Matrix::uniform(valence.states(), config.d_val, s, &mut rng),
            hidden: [
                Matrix::uniform(h, din, s, &mut rng),
                Matrix::uniform(h, din, s, &mut rng),
            ],
            hidden_bias: [Matrix::zeros(1, h), Matrix::zeros(1, h)],
            projection: (h != kout).then(|| Matrix::uniform(kout, h, s, &mut rng)),
            word_out: Matrix::uniform(lexicon.len(), config.k_word, s, &mut rng),
            tag_out: Matrix::uniform(lexicon.num_tags(), config.k_tag, s, &mut rng),
            child_bias: Matrix::zeros(1, lexicon.len()),
            decision_out: Matrix::uniform(2, kout, s, &mut rng),
            decision_bias: Matrix::zeros(1, 2),
        };
        let velocity = weights.zeros_like();
        Ok(NeuralModel {
            config,
            valence,
            token_tags: (0..lexicon.len()).map(|t| lexicon.tag_of(t)).collect(),
            weights,
            velocity,
            fit_calls: 0,
        })
    }

    /// Model with seeded random input vectors.
    pub fn with_random_vectors(
        lexicon: &Lexicon,
        valence: ValenceConfig,
        config: NeuralConfig,
    ) -> Result<Self> {
        let (emb, _) = load_vectors(None, None, lexicon, &config, true)?;
        Self::new(lexicon, valence, config, emb)
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn valence(&self) -> ValenceConfig {
        self.valence
    }

    pub fn vocab_size(&self) -> usize {
        self.token_tags.len()
    }

    pub fn fit_calls(&self) -> u64 {
        self.fit_calls
    }

    pub fn velocity(&self) -> &Weights {
        &self.velocity
    }

    fn trunk(&self, head: usize, dir: Direction, valence: usize) -> Trunk {
        let w = &self.weights;
        let tag = self.token_tags[head];
        let mut x = Vec::with_capacity(self.config.input_dim());
        x.extend_from_slice(w.val_in.row(valence));
        x.extend_from_slice(w.word_in.row(head));
        x.extend_from_slice(w.tag_in.row(tag));
        let d = dir.index();
        let mut pre = vec![0.0; self.config.hidden];
        w.hidden[d].mul_vec(&x, &mut pre);
        axpy(1.0, w.hidden_bias[d].row(0), &mut pre);
        let f: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        let g = match &w.projection {
            Some(p) => {
                let mut g = vec![0.0; self.config.output_dim()];
                p.mul_vec(&f, &mut g);
                g
            }
            None => f.clone(),
        };
        Trunk { x, pre, f, g }
    }

    /// Pre-softmax CHILD scores for every candidate token.
    pub fn child_scores_for(&self, head: usize, dir: Direction, valence: usize) -> Vec<f64> {
        self.child_scores(&self.trunk(head, dir, valence).g)
    }

    fn child_scores(&self, g: &[f64]) -> Vec<f64> {
        let w = &self.weights;
        let k = self.config.k_word;
        let (gw, gt) = g.split_at(k);
        let tag_scores: Vec<f64> = (0..w.tag_out.rows)
            .map(|t| dot(w.tag_out.row(t), gt))
            .collect();
        (0..self.token_tags.len())
            .map(|i| {
                dot(w.word_out.row(i), gw) + tag_scores[self.token_tags[i]] + w.child_bias.data[i]
            })
            .collect()
    }

    fn decision_scores(&self, g: &[f64]) -> [f64; 2] {
        let w = &self.weights;
        [
            dot(w.decision_out.row(0), g) + w.decision_bias.data[0],
            dot(w.decision_out.row(1), g) + w.decision_bias.data[1],
        ]
    }

    fn check_valence(&self, family: RuleFamily, valence: usize) -> Result<()> {
        let cap = match family {
            RuleFamily::Child => self.valence.child,
            RuleFamily::Decision => self.valence.decision,
        };
        if valence >= cap {
            return Err(Error::InvalidArgument(format!(
                "valence {valence} out of range for {family:?} rules (cap {cap})"
            )));
        }
        Ok(())
    }

    /// Rule distribution for one context: CHILD over all tokens, DECISION as
    /// `[p_stop, p_continue]`.
    pub fn forward(
        &self,
        head: usize,
        dir: Direction,
        valence: usize,
        family: RuleFamily,
    ) -> Result<Vec<f64>> {
        self.check_valence(family, valence)?;
        let t = self.trunk(head, dir, valence);
        Ok(match family {
            RuleFamily::Child => softmax(&self.child_scores(&t.g)),
            RuleFamily::Decision => softmax(&self.decision_scores(&t.g)),
        })
    }

    /// Contexts with any CHILD or DECISION count.
    fn active_contexts(&self, counts: &CountTable) -> Vec<(usize, Direction, usize)> {
        let mut out = Vec::new();
        for h in 0..self.vocab_size() {
            for d in Direction::BOTH {
                for v in 0..self.valence.states() {
                    if context_total(counts, self.valence, h, d, v) > 0.0 {
                        out.push((h, d, v));
                    }
                }
            }
        }
        out
    }

    /// Loss of one context, adding `scale * gradient` into `grads` when given.
    fn context_loss(
        &self,
        counts: &CountTable,
        (h, dir, v): (usize, Direction, usize),
        scale: f64,
        mut grads: Option<&mut Weights>,
    ) -> f64 {
        let t = self.trunk(h, dir, v);
        let kout = self.config.output_dim();
        let kw = self.config.k_word;
        let mut dg = vec![0.0; kout];
        let mut loss = 0.0;
        let w = &self.weights;

        if v < self.valence.child {
            let c = counts.child(h, dir, v);
            let total: f64 = c.iter().sum();
            if total > 0.0 {
                let scores = self.child_scores(&t.g);
                let lse = log_sum_exp(&scores);
                for (ci, si) in c.iter().zip(&scores) {
                    if *ci > 0.0 {
                        loss -= ci * (si - lse);
                    }
                }
                if let Some(gr) = grads.as_deref_mut() {
                    let (gw, gt) = t.g.split_at(kw);
                    for i in 0..scores.len() {
                        let ds = scale * (total * (scores[i] - lse).exp() - c[i]);
                        if ds == 0.0 {
                            continue;
                        }
                        let tag = self.token_tags[i];
                        axpy(ds, w.word_out.row(i), &mut dg[..kw]);
                        axpy(ds, w.tag_out.row(tag), &mut dg[kw..]);
                        axpy(ds, gw, gr.word_out.row_mut(i));
                        axpy(ds, gt, gr.tag_out.row_mut(tag));
                        gr.child_bias.data[i] += ds;
                    }
                }
            }
        }
        if v < self.valence.decision {
            let c = counts.decision(h, dir, v);
            let total: f64 = c.iter().sum();
            if total > 0.0 {
                let scores = self.decision_scores(&t.g);
                let lse = log_sum_exp(&scores);
                for (ci, si) in c.iter().zip(&scores) {
                    if *ci > 0.0 {
                        loss -= ci * (si - lse);
                    }
                }
                if let Some(gr) = grads.as_deref_mut() {
                    let ds: Vec<f64> = (0..2)
                        .map(|o| scale * (total * (scores[o] - lse).exp() - c[o]))
                        .collect();
                    w.decision_out.add_mul_t(&ds, &mut dg);
                    gr.decision_out.add_outer(&ds, &t.g);
                    axpy(1.0, &ds, gr.decision_bias.row_mut(0));
                }
            }
        }

        if let Some(gr) = grads {
            let df = match &w.projection {
                Some(p) => {
                    gr.projection
                        .as_mut()
                        .expect("projection gradient")
                        .add_outer(&dg, &t.f);
                    let mut df = vec![0.0; self.config.hidden];
                    p.add_mul_t(&dg, &mut df);
                    df
                }
                None => dg,
            };
            let dpre: Vec<f64> = df
                .iter()
                .zip(&t.pre)
                .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
                .collect();
            let di = dir.index();
            gr.hidden[di].add_outer(&dpre, &t.x);
            axpy(1.0, &dpre, gr.hidden_bias[di].row_mut(0));
            let mut dx = vec![0.0; t.x.len()];
            w.hidden[di].add_mul_t(&dpre, &mut dx);
            let (dv, rest) = dx.split_at(self.config.d_val);
            let (dw, dt) = rest.split_at(self.config.d_word_in);
            axpy(1.0, dv, gr.val_in.row_mut(v));
            axpy(1.0, dw, gr.word_in.row_mut(h));
            axpy(1.0, dt, gr.tag_in.row_mut(self.token_tags[h]));
        }
        loss
    }

    /// Count-weighted negative log-likelihood over CHILD and DECISION rules.
    pub fn loss(&self, counts: &CountTable) -> f64 {
        self.active_contexts(counts)
            .into_iter()
            .map(|ctx| self.context_loss(counts, ctx, 1.0, None))
            .sum()
    }

    /// Analytic gradient of [`Self::loss`].
    pub fn gradient(&self, counts: &CountTable) -> Weights {
        let mut grads = self.weights.zeros_like();
        for ctx in self.active_contexts(counts) {
            self.context_loss(counts, ctx, 1.0, Some(&mut grads));
        }
        grads
    }

    /// Mini-batched momentum SGD on the count table. Each batch minimizes
    /// its loss divided by its total count. Weights and velocities carry over
    /// between calls.
    pub fn fit(&mut self, counts: &CountTable, cfg: &NeuralConfig) -> Result<FitStats> {
        cfg.validate()?;
        let mut contexts = self.active_contexts(counts);
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(self.fit_calls + 1)),
        );
        self.fit_calls += 1;
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            contexts.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut epoch_mass = 0.0;
            for batch in contexts.chunks(cfg.batch) {
                let mass: f64 = batch
                    .iter()
                    .map(|&(h, d, v)| context_total(counts, self.valence, h, d, v))
                    .sum();
                let mut grads = self.weights.zeros_like();
                let mut loss = 0.0;
                for &ctx in batch {
                    loss += self.context_loss(counts, ctx, 1.0 / mass, Some(&mut grads));
                }
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {loss} during network training"
                    )));
                }
                epoch_loss += loss;
                epoch_mass += mass;
                for ((w, vel), g) in self
                    .weights
                    .tensors_mut()
                    .into_iter()
                    .zip(self.velocity.tensors_mut())
                    .zip(grads.tensors())
                {
                    for ((wi, vi), gi) in w.data.iter_mut().zip(vel.data.iter_mut()).zip(&g.data) {
                        *vi = cfg.momentum * *vi - cfg.lr * gi;
                        *wi += *vi;
                    }
                }
            }
            if !self.weights.is_finite() {
                return Err(Error::Numerical("network weights became non-finite".into()));
            }
            epoch_losses.push(if epoch_mass > 0.0 {
                epoch_loss / epoch_mass
            } else {
                0.0
            });
        }
        Ok(FitStats {
            epoch_losses,
            contexts: contexts.len(),
        })
    }

    /// Fills CHILD and DECISION tables from the network; ROOT comes from
    /// `root_counts` normalized with `lambda`.
    pub fn export_params(&self, root_counts: &[f64], lambda: f64) -> DmvParams {
        let m = self.vocab_size();
        let vcfg = self.valence;
        let mut root_table = CountTable::zeros(m, vcfg);
        for (t, &c) in root_counts.iter().enumerate() {
            root_table.add_root(t, c);
        }
        let mut params = normalize(&root_table, lambda);
        let rows: Vec<Vec<ExportRow>> = (0..m)
            .into_par_iter()
            .map(|h| {
                let mut out = Vec::new();
                for d in Direction::BOTH {
                    for v in 0..vcfg.states() {
                        let t = self.trunk(h, d, v);
                        let child = (v < vcfg.child).then(|| softmax(&self.child_scores(&t.g)));
                        let dec = (v < vcfg.decision).then(|| softmax(&self.decision_scores(&t.g)));
                        out.push((d, v, child, dec));
                    }
                }
                out
            })
            .collect();
        for (h, per_head) in rows.into_iter().enumerate() {
            for (d, v, child, dec) in per_head {
                if let Some(c) = child {
                    params.set_child(h, d, v, &c);
                }
                if let Some(p) = dec {
                    params.set_decision(h, d, v, &p);
                }
            }
        }
        params
    }

    /// Pushes hidden biases so that no active pre-activation lies within
    /// `margin` of the ReLU kink.
    fn move_off_kinks(&mut self, counts: &CountTable, margin: f64, rng: &mut ChaCha8Rng) -> bool {
        let contexts = self.active_contexts(counts);
        for _ in 0..1000 {
            let mut clean = true;
            for &(h, d, v) in &contexts {
                let t = self.trunk(h, d, v);
                for (u, p) in t.pre.iter().enumerate() {
                    if p.abs() < margin {
                        clean = false;
                        let shift = rng.gen_range(2.0..4.0) * margin;
                        self.weights.hidden_bias[d.index()].data[u] +=
                            if *p >= 0.0 { shift } else { -shift };
                    }
                }
            }
            if clean {
                return true;
            }
        }
        false
    }
}

fn context_total(
    counts: &CountTable,
    vcfg: ValenceConfig,
    h: usize,
    d: Direction,
    v: usize,
) -> f64 {
    let mut total = 0.0;
    if v < vcfg.child {
        total += counts.child(h, d, v).iter().sum::<f64>();
    }
    if v < vcfg.decision {
        total += counts.decision(h, d, v).iter().sum::<f64>();
    }
    total
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// Count-weighted negative log-likelihood of the network's rules.
pub fn nn_loss(model: &NeuralModel, counts: &CountTable) -> f64 {
    model.loss(counts)
}

/// Result of comparing backprop with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub samples: usize,
}

/// Relative error used by the gradient check; tiny gradients are compared
/// absolutely.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / (analytic.abs() + numeric.abs()).max(1e-4)
}

/// Compares the analytic gradient of the loss with central differences on
/// `samples` randomly chosen weights.
pub fn gradient_check(model: &NeuralModel, counts: &CountTable, eps: f64) -> GradCheckReport {
    gradient_check_with(model, counts, eps, 1000, 0, GradFault::None)
}

pub fn gradient_check_with(
    model: &NeuralModel,
    counts: &CountTable,
    eps: f64,
    samples: usize,
    seed: u64,
    fault: GradFault,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = model.clone();
    model.move_off_kinks(counts, 10.0 * eps, &mut rng);
    let mut analytic = model.gradient(counts);
    if fault == GradFault::FlipSign {
        for t in analytic.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g = -*g);
        }
    }
    let n_tensors = model.weights.tensors().len();
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..samples {
        let ti = rng.gen_range(0..n_tensors);
        let len = model.weights.tensors()[ti].data.len();
        let idx = rng.gen_range(0..len);
        let orig = model.weights.tensors()[ti].data[idx];
        model.weights.tensors_mut()[ti].data[idx] = orig + eps;
        let plus = model.loss(counts);
        model.weights.tensors_mut()[ti].data[idx] = orig - eps;
        let minus = model.loss(counts);
        model.weights.tensors_mut()[ti].data[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.tensors()[ti].data[idx];
        max_rel_err = max_rel_err.max(grad_rel_err(a, numeric));
    }
    GradCheckReport {
        max_rel_err,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_lexicon, RawSentence};

    fn lexicon(words: &[(&str, &str)]) -> Lexicon {
        let raw = vec![RawSentence {
            forms: words.iter().map(|w| w.0.to_string()).collect(),
            pos: words.iter().map(|w| w.1.to_string()).collect(),
            gold_heads: None,
        }];
        build_lexicon(&raw, 1).unwrap()
    }

    fn small_cfg() -> NeuralConfig {
        NeuralConfig {
            d_word_in: 6,
            d_tag_in: 3,
            d_val: 2,
            k_word: 5,
            k_tag: 3,
            hidden: 8,
            batch: 4,
            ..Default::default()
        }
    }

    fn toy() -> (Lexicon, NeuralModel) {
        let lex = lexicon(&[("a", "DT"), ("dog", "NN"), ("cat", "NN"), ("runs", "VB")]);
        let model =
            NeuralModel::with_random_vectors(&lex, ValenceConfig::default(), small_cfg()).unwrap();
        (lex, model)
    }

    fn zero_weights(model: &mut NeuralModel) {
        for t in model.weights.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let (lex, mut model) = toy();
        zero_weights(&mut model);
        let m = lex.len();
        let child = model
            .forward(1, Direction::Left, 0, RuleFamily::Child)
            .unwrap();
        assert!(child.iter().all(|p| (p - 1.0 / m as f64).abs() < 1e-15));
        let dec = model
            .forward(1, Direction::Right, 1, RuleFamily::Decision)
            .unwrap();
        assert_eq!(dec, vec![0.5, 0.5]);
        let params = model.export_params(&vec![0.0; m], 0.0);
        params.validate(1e-12).unwrap();
        assert!(params
            .child(0, Direction::Right, 1)
            .iter()
            .all(|p| (p - 1.0 / m as f64).abs() < 1e-15));
    }

    #[test]
    fn outputs_sum_to_one() {
        let (lex, model) = toy();
        for h in 0..lex.len() {
            for d in Direction::BOTH {
                for v in 0..2 {
                    for fam in [RuleFamily::Child, RuleFamily::Decision] {
                        let p = model.forward(h, d, v, fam).unwrap();
                        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(model
            .forward(0, Direction::Left, 2, RuleFamily::Child)
            .is_err());
    }

    #[test]
    fn equal_score_shift_leaves_child_distribution() {
        let (_, mut model) = toy();
        let before = model
            .forward(2, Direction::Right, 0, RuleFamily::Child)
            .unwrap();
        // Adding the same constant to every token's output bias shifts all
        // scores equally.
        model
            .weights
            .child_bias
            .data
            .iter_mut()
            .for_each(|b| *b += 3.7);
        let after = model
            .forward(2, Direction::Right, 0, RuleFamily::Child)
            .unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tag_rows_are_shared() {
        let (lex, mut model) = toy();
        let nn = lex.tag_id("NN").unwrap();
        let before = model.child_scores_for(3, Direction::Left, 0);
        model
            .weights
            .tag_out
            .row_mut(nn)
            .iter_mut()
            .for_each(|x| *x += 0.25);
        let after = model.child_scores_for(3, Direction::Left, 0);
        let deltas: Vec<f64> = before.iter().zip(&after).map(|(b, a)| a - b).collect();
        let nn_delta = deltas[lex.token_of("dog", "NN").unwrap()];
        assert!(nn_delta.abs() > 1e-9);
        for (t, delta) in deltas.iter().enumerate() {
            if lex.tag_of(t) == nn {
                assert!((delta - nn_delta).abs() < 1e-12);
            } else {
                assert!(delta.abs() < 1e-15);
            }
        }
    }

    fn toy_counts(m: usize) -> CountTable {
        let mut c = CountTable::zeros(m, ValenceConfig::default());
        c.add_child(3, Direction::Left, 0, 1, 4.0);
        c.add_child(3, Direction::Left, 0, 2, 1.0);
        c.add_child(1, Direction::Left, 1, 0, 2.0);
        c.add_decision(3, Direction::Left, 0, 1, 5.0);
        c.add_decision(3, Direction::Left, 1, 0, 5.0);
        c.add_decision(1, Direction::Right, 0, 0, 3.0);
        c
    }

    #[test]
    fn loss_examples() {
        let (lex, model) = toy();
        assert_eq!(
            nn_loss(
                &model,
                &CountTable::zeros(lex.len(), ValenceConfig::default())
            ),
            0.0
        );
        let mut c = CountTable::zeros(lex.len(), ValenceConfig::default());
        c.add_child(1, Direction::Right, 0, 2, 1.0);
        let p = model
            .forward(1, Direction::Right, 0, RuleFamily::Child)
            .unwrap()[2];
        assert!((nn_loss(&model, &c) + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_respects_entropy_bound() {
        let (lex, model) = toy();
        let counts = toy_counts(lex.len());
        let mut bound = 0.0;
        let rows = [
            counts.child(3, Direction::Left, 0).to_vec(),
            counts.child(1, Direction::Left, 1).to_vec(),
            counts.decision(3, Direction::Left, 0).to_vec(),
            counts.decision(3, Direction::Left, 1).to_vec(),
            counts.decision(1, Direction::Right, 0).to_vec(),
        ];
        for row in rows {
            let total: f64 = row.iter().sum();
            bound += row
                .iter()
                .filter(|&&c| c > 0.0)
                .map(|c| c * (total / c).ln())
                .sum::<f64>();
        }
        assert!(nn_loss(&model, &counts) >= bound);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (lex, model) = toy();
        let counts = toy_counts(lex.len());
        let report = gradient_check_with(&model, &counts, 1e-5, 500, 3, GradFault::None);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        let bad = gradient_check_with(&model, &counts, 1e-5, 500, 3, GradFault::FlipSign);
        assert!(bad.max_rel_err > 0.1, "{bad:?}");
    }

    #[test]
    fn gradient_check_with_projection() {
        let lex = lexicon(&[("a", "DT"), ("dog", "NN"), ("runs", "VB")]);
        let cfg = NeuralConfig {
            hidden: 11,
            ..small_cfg()
        };
        let model = NeuralModel::with_random_vectors(&lex, ValenceConfig::default(), cfg).unwrap();
        assert!(model.weights.projection.is_some());
        let mut c = CountTable::zeros(lex.len(), ValenceConfig::default());
        c.add_child(4, Direction::Left, 0, 3, 2.0);
        c.add_decision(4, Direction::Right, 1, 1, 1.0);
        let report = gradient_check_with(&model, &c, 1e-5, 400, 1, GradFault::None);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_counts_give_zero_error() {
        let (lex, model) = toy();
        let c = CountTable::zeros(lex.len(), ValenceConfig::default());
        assert_eq!(gradient_check(&model, &c, 1e-5).max_rel_err, 0.0);
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let (lex, model) = toy();
        let counts = toy_counts(lex.len());
        let cfg = NeuralConfig {
            epochs: 30,
            ..small_cfg()
        };
        let mut a = model.clone();
        let before = nn_loss(&a, &counts);
        a.fit(&counts, &cfg).unwrap();
        assert!(nn_loss(&a, &counts) < before);
        let mut b = model.clone();
        b.fit(&counts, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (lex, model) = toy();
        let mut a = model.clone();
        a.fit(
            &toy_counts(lex.len()),
            &NeuralConfig {
                lr: 0.0,
                ..small_cfg()
            },
        )
        .unwrap();
        assert_eq!(a.weights, model.weights);
    }

    #[test]
    fn vector_file_loading() {
        let lex = lexicon(&[("a", "DT"), ("dog", "NN")]);
        let cfg = NeuralConfig {
            d_word_in: 3,
            d_tag_in: 2,
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let wp = dir.path().join("w.txt");
        std::fs::write(&wp, "2 3\ndog/NN 1 2 3\nDT 0.5 0.5 0.5\n").unwrap();
        let (emb, cov) = load_vectors(Some(&wp), None, &lex, &cfg, false).unwrap();
        assert_eq!(
            emb.word.row(lex.token_of("dog", "NN").unwrap()),
            &[1.0, 2.0, 3.0]
        );
        assert_eq!(emb.word.row(lex.tag_id("DT").unwrap()), &[0.5, 0.5, 0.5]);
        assert_eq!(cov.words_found, 2);

        std::fs::write(&wp, "1 5\ndog 1 2 3 4 5\n").unwrap();
        assert!(load_vectors(Some(&wp), None, &lex, &cfg, false).is_err());
        std::fs::write(&wp, "1 3\ndog 1 x 3\n").unwrap();
        assert!(matches!(
            load_vectors(Some(&wp), None, &lex, &cfg, false),
            Err(Error::Parse { line: 2, .. })
        ));

        let missing = dir.path().join("missing.txt");
        assert!(load_vectors(Some(&missing), None, &lex, &cfg, false).is_err());
        let (r1, _) = load_vectors(Some(&missing), None, &lex, &cfg, true).unwrap();
        let (r2, _) = load_vectors(None, None, &lex, &cfg, true).unwrap();
        assert_eq!(r1, r2);
    }
}
