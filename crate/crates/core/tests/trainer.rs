use std::path::Path;

use lexdmv::corpus::{
    build_lexicon, default_punct_tags, encode, read_conll, strip_and_filter, Sentence,
};
use lexdmv::eval::evaluate;
use lexdmv::model::{init_km, mle_from_gold, mle_from_trees, Direction, DmvParams, ValenceConfig};
use lexdmv::neural::{NeuralConfig, NeuralModel};
use lexdmv::trainer::{
    hard_em_neural, hard_em_tabular, soft_em, viterbi_step, warm_start, TrainConfig, TrainMode,
};

fn chain_corpus() -> Vec<Sentence> {
    [1, 2, 3, 4, 5, 3, 2]
        .iter()
        .map(|&n| Sentence {
            token_ids: (0..n).collect(),
            tag_ids: (0..n).collect(),
            gold_heads: Some((0..n).collect()),
        })
        .collect()
}

/// Mixes every distribution with uniform noise.
fn blur(p: &DmvParams, keep: f64) -> DmvParams {
    let m = p.vocab_size();
    let v = p.valence();
    let mix = |row: &[f64]| -> Vec<f64> {
        row.iter()
            .map(|x| keep * x + (1.0 - keep) / row.len() as f64)
            .collect()
    };
    let mut out = p.clone();
    out.set_root(&mix(p.root()));
    for h in 0..m {
        for d in Direction::BOTH {
            for k in 0..v.child {
                out.set_child(h, d, k, &mix(p.child(h, d, k)));
            }
            for k in 0..v.decision {
                out.set_decision(h, d, k, &mix(p.decision(h, d, k)));
            }
        }
    }
    out
}

#[test]
fn converged_soft_em_is_a_fixed_point() {
    let corpus = chain_corpus();
    let m = 5;
    let vcfg = ValenceConfig::default();
    let run = TrainConfig {
        max_iters: 400,
        ll_tol: 1e-12,
        lambda: 0.0,
        ..Default::default()
    };
    let (p, _) = soft_em(&corpus, init_km(&corpus, m, vcfg), &run).unwrap();
    let step = TrainConfig {
        max_iters: 2,
        ll_tol: 0.0,
        lambda: 0.0,
        ..Default::default()
    };
    let (_, trace) = soft_em(&corpus, p, &step).unwrap();
    let lls = trace.lls();
    assert!((lls[1] - lls[0]).abs() < TrainConfig::default().ll_tol);
}

#[test]
fn hard_em_recovers_a_deterministic_grammar() {
    let corpus = chain_corpus();
    let vcfg = ValenceConfig::default();
    let grammar = mle_from_gold(&corpus, 5, vcfg, 0.0).unwrap();
    for iters in [2, 5] {
        let cfg = TrainConfig {
            max_iters: iters,
            lambda: 0.0,
            mode: TrainMode::HardTabular,
            ..Default::default()
        };
        let (p, _) = hard_em_tabular(&corpus, blur(&grammar, 0.9), &cfg).unwrap();
        for (a, b) in p.distributions().zip(grammar.distributions()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x > 0.0, *y > 0.0);
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn network_is_never_reinitialized() {
    let corpus = chain_corpus();
    let raw: Vec<lexdmv::corpus::RawSentence> = corpus
        .iter()
        .map(|s| lexdmv::corpus::RawSentence {
            forms: s.token_ids.iter().map(|t| format!("w{t}")).collect(),
            pos: s.token_ids.iter().map(|t| format!("T{t}")).collect(),
            gold_heads: s.gold_heads.clone(),
        })
        .collect();
    let lex = build_lexicon(&raw, 100).unwrap();
    let corpus = encode(&raw, &lex).unwrap();
    let vcfg = ValenceConfig::default();
    let ncfg = NeuralConfig {
        d_word_in: 4,
        d_tag_in: 3,
        d_val: 2,
        k_word: 4,
        k_tag: 3,
        hidden: 7,
        ..Default::default()
    };
    let model0 = NeuralModel::with_random_vectors(&lex, vcfg, ncfg.clone()).unwrap();
    let cfg = TrainConfig {
        max_iters: 4,
        em_batch: 3,
        mode: TrainMode::HardNeural,
        ..Default::default()
    };
    let p0 = init_km(&corpus, lex.len(), vcfg);
    let (model, _, trace) =
        hard_em_neural(&corpus, model0.clone(), p0.clone(), &cfg, &ncfg).unwrap();
    assert_eq!(trace.len(), 4);
    assert_eq!(model.fit_calls(), 4);
    assert!(model
        .velocity()
        .tensors()
        .iter()
        .any(|t| t.as_slice().iter().any(|&x| x != 0.0)));

    // Two runs of two iterations, the second continuing from the first, do
    // not match a fresh network trained for two.
    let two = TrainConfig {
        max_iters: 2,
        ..cfg
    };
    let (fresh, _, _) = hard_em_neural(&corpus, model0, p0.clone(), &two, &ncfg).unwrap();
    let (continued, _, _) = hard_em_neural(&corpus, fresh.clone(), p0, &two, &ncfg).unwrap();
    assert_eq!(continued.fit_calls(), 4);
    assert_ne!(continued.weights, fresh.weights);
}

// Does not hold on the shipped corpus with default settings: the network
// cannot reproduce the tabular start exactly, so the first export already
// parses worse and hard EM does not reliably win the difference back.
#[test]
#[ignore = "fails on the shipped corpus with default settings"]
fn neural_training_from_good_init_keeps_training_accuracy() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/synth");
    let raw = strip_and_filter(
        &read_conll(dir.join("train.conll")).unwrap(),
        &default_punct_tags(),
        10,
    );
    let lex = build_lexicon(&raw, 100000).unwrap();
    let corpus = encode(&raw, &lex).unwrap();
    let m = lex.len();
    let vcfg = ValenceConfig::default();
    let (soft, _) = soft_em(&corpus, init_km(&corpus, m, vcfg), &TrainConfig::default()).unwrap();
    let (trees, _, _) = viterbi_step(&corpus, &soft);
    let good = mle_from_trees(&corpus, &trees, m, vcfg, 0.1).unwrap();
    let before = evaluate(&good, &corpus).unwrap().dda_all;

    let ncfg = NeuralConfig::default();
    let mut net = NeuralModel::with_random_vectors(&lex, vcfg, ncfg.clone()).unwrap();
    warm_start(&mut net, &corpus, &good, &ncfg, 20).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::HardNeural,
        ..Default::default()
    };
    let (_, p, _) = hard_em_neural(&corpus, net, good, &cfg, &ncfg).unwrap();
    let after = evaluate(&p, &corpus).unwrap().dda_all;
    assert!(
        after >= before,
        "training DDA fell from {before} to {after}"
    );
}
