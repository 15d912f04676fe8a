//! Self-checks: the chart algorithms against brute-force enumeration, and
//! backpropagation against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chart::{self, oracle};
use crate::corpus::{build_lexicon, RawSentence, Sentence};
use crate::model::{init_random, CountTable, Direction, ValenceConfig};
use crate::neural::{gradient_check_with, GradFault, NeuralConfig, NeuralModel};

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub cases: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    pub grad_samples: usize,
    pub seed: u64,
    pub fault: GradFault,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            cases: 200,
            max_len: 6,
            max_vocab: 5,
            grad_samples: 1000,
            seed: 0,
            fault: GradFault::None,
        }
    }
}

pub const ORACLE_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub cases: usize,
    pub max_inside_rel_err: f64,
    pub max_viterbi_rel_err: f64,
    /// Cases whose Viterbi tree does not attain the enumerated maximum.
    pub viterbi_tree_misses: usize,
    pub max_count_abs_err: f64,
    pub max_grad_rel_err: f64,
    pub grad_samples: usize,
}

impl VerifyReport {
    pub fn oracle_ok(&self) -> bool {
        self.max_inside_rel_err <= ORACLE_TOL
            && self.max_viterbi_rel_err <= ORACLE_TOL
            && self.max_count_abs_err <= ORACLE_TOL
            && self.viterbi_tree_misses == 0
    }

    pub fn gradient_ok(&self) -> bool {
        self.max_grad_rel_err < GRAD_TOL
    }

    pub fn passed(&self) -> bool {
        self.oracle_ok() && self.gradient_ok()
    }

    pub fn to_text(&self) -> String {
        let status = |ok: bool| if ok { "PASS" } else { "FAIL" };
        format!(
            "oracle cases\t{}\n\
             max inside rel err\t{:.3e}\n\
             max viterbi rel err\t{:.3e}\n\
             viterbi tree misses\t{}\n\
             max count abs err\t{:.3e}\n\
             oracle\t{}\n\
             gradient samples\t{}\n\
             max gradient rel err\t{:.3e}\n\
             gradient\t{}\n",
            self.cases,
            self.max_inside_rel_err,
            self.max_viterbi_rel_err,
            self.viterbi_tree_misses,
            self.max_count_abs_err,
            status(self.oracle_ok()),
            self.grad_samples,
            self.max_grad_rel_err,
            status(self.gradient_ok()),
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest absolute difference between two count tables of equal shape.
pub fn max_count_diff(a: &CountTable, b: &CountTable) -> f64 {
    let mut worst: f64 = 0.0;
    let mut cmp = |x: &[f64], y: &[f64]| {
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    };
    cmp(a.root(), b.root());
    let vcfg = a.valence();
    for h in 0..a.vocab_size() {
        for d in Direction::BOTH {
            for v in 0..vcfg.child {
                cmp(a.child(h, d, v), b.child(h, d, v));
            }
            for v in 0..vcfg.decision {
                cmp(a.decision(h, d, v), b.decision(h, d, v));
            }
        }
    }
    worst
}

/// Random sentence of 1..=max_len tokens over 1..=max_vocab token types.
pub fn random_case(
    rng: &mut ChaCha8Rng,
    max_len: usize,
    max_vocab: usize,
) -> (Sentence, usize, ValenceConfig) {
    let n = rng.gen_range(1..=max_len);
    let m = rng.gen_range(1..=max_vocab);
    let toks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
    let vcfg = ValenceConfig::new(rng.gen_range(1..=3), rng.gen_range(1..=3)).expect("valid caps");
    let s = Sentence {
        token_ids: toks.clone(),
        tag_ids: toks,
        gold_heads: None,
    };
    (s, m, vcfg)
}

pub fn run_oracle_suite(opts: &VerifyOptions, report: &mut VerifyReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.cases {
        let (s, m, vcfg) = random_case(&mut rng, opts.max_len, opts.max_vocab);
        let params = init_random(m, vcfg, rng.gen());
        let z = chart::inside(&s, &params).log_prob;
        let z_ref = oracle::log_prob(&s, &params).expect("short sentence");
        report.max_inside_rel_err = report.max_inside_rel_err.max(rel_err(z, z_ref));

        let (tree, score) = chart::viterbi(&s, &params);
        let (best, _) = oracle::best_trees(&s, &params, ORACLE_TOL).expect("short sentence");
        report.max_viterbi_rel_err = report.max_viterbi_rel_err.max(rel_err(score, best));
        if rel_err(oracle::tree_log_prob(&tree, &s, &params), best) > ORACLE_TOL {
            report.viterbi_tree_misses += 1;
        }

        let counts = chart::expected_counts(&s, &params);
        let counts_ref = oracle::expected_counts(&s, &params).expect("short sentence");
        report.max_count_abs_err = report
            .max_count_abs_err
            .max(max_count_diff(&counts, &counts_ref));
        report.cases += 1;
    }
}

pub fn run_gradient_check(opts: &VerifyOptions, report: &mut VerifyReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6164);
    let tags = ["DT", "NN", "VB", "JJ"];
    let raw = vec![RawSentence {
        forms: (0..8).map(|i| format!("w{i}")).collect(),
        pos: (0..8).map(|i| tags[i % tags.len()].to_string()).collect(),
        gold_heads: None,
    }];
    let lexicon = build_lexicon(&raw, 1).expect("non-empty");
    let vcfg = ValenceConfig::default();
    let cfg = NeuralConfig {
        d_word_in: 5,
        d_tag_in: 3,
        d_val: 2,
        k_word: 4,
        k_tag: 3,
        hidden: 9,
        seed: opts.seed,
        ..Default::default()
    };
    let model = NeuralModel::with_random_vectors(&lexicon, vcfg, cfg).expect("valid config");
    let m = lexicon.len();
    let mut counts = CountTable::zeros(m, vcfg);
    for _ in 0..40 {
        let (h, c, v) = (
            rng.gen_range(0..m),
            rng.gen_range(0..m),
            rng.gen_range(0..2),
        );
        let d = if rng.gen() {
            Direction::Left
        } else {
            Direction::Right
        };
        counts.add_child(h, d, v, c, rng.gen_range(0.1..3.0));
        counts.add_decision(h, d, v, rng.gen_range(0..2), rng.gen_range(0.1..3.0));
    }
    let r = gradient_check_with(
        &model,
        &counts,
        1e-5,
        opts.grad_samples,
        opts.seed,
        opts.fault,
    );
    report.max_grad_rel_err = r.max_rel_err;
    report.grad_samples = r.samples;
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    run_oracle_suite(opts, &mut report);
    run_gradient_check(opts, &mut report);
    report
}
