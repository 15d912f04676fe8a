use lexdmv::corpus::{build_lexicon, Lexicon, RawSentence};
use lexdmv::model::{CountTable, Direction, ValenceConfig};
use lexdmv::neural::{NeuralConfig, NeuralModel};

fn lexicon() -> Lexicon {
    let pairs = [
        ("the", "DT"),
        ("a", "DT"),
        ("dog", "NN"),
        ("cat", "NN"),
        ("bird", "NN"),
        ("fish", "NN"),
        ("cow", "NN"),
        ("runs", "VB"),
        ("big", "JJ"),
    ];
    let raw = vec![RawSentence {
        forms: pairs.iter().map(|p| p.0.to_string()).collect(),
        pos: pairs.iter().map(|p| p.1.to_string()).collect(),
        gold_heads: None,
    }];
    build_lexicon(&raw, 1).unwrap()
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[test]
fn unseen_word_inherits_its_tags_distribution() {
    let lex = lexicon();
    let m = lex.len();
    let vcfg = ValenceConfig::default();
    let tok = |w: &str, t: &str| lex.token_of(w, t).unwrap();
    let (the, a, big) = (tok("the", "DT"), tok("a", "DT"), tok("big", "JJ"));

    // Nouns take determiners and adjectives on the left, in slightly
    // different proportions per word; "cow" is never seen as a head.
    let mut counts = CountTable::zeros(m, vcfg);
    let seen = [
        ("dog", 6.0, 3.0, 1.0),
        ("cat", 4.0, 4.0, 2.0),
        ("bird", 5.0, 2.0, 3.0),
        ("fish", 7.0, 2.0, 1.0),
    ];
    let mut average = vec![0.0; m];
    for (w, x, y, z) in seen {
        let h = tok(w, "NN");
        counts.add_child(h, Direction::Left, 0, the, x);
        counts.add_child(h, Direction::Left, 0, a, y);
        counts.add_child(h, Direction::Left, 0, big, z);
        let total = x + y + z;
        average[the] += x / total / 4.0;
        average[a] += y / total / 4.0;
        average[big] += z / total / 4.0;
    }

    let cfg = NeuralConfig {
        epochs: 400,
        ..Default::default()
    };
    let mut model = NeuralModel::with_random_vectors(&lex, vcfg, cfg.clone()).unwrap();
    model.fit(&counts, &cfg).unwrap();
    let params = model.export_params(&vec![1.0; m], 0.0);

    let held_out = params.child(tok("cow", "NN"), Direction::Left, 0);
    let uniform = vec![1.0 / m as f64; m];
    let fitted = tv(held_out, &average);
    assert!(
        fitted < tv(&uniform, &average),
        "held-out {fitted} vs uniform {}",
        tv(&uniform, &average)
    );
    assert!(
        fitted < 0.2,
        "held-out context is {fitted} from the average"
    );
}

#[test]
fn fitted_context_puts_its_mode_first() {
    let lex = lexicon();
    let m = lex.len();
    let vcfg = ValenceConfig::default();
    let head = lex.token_of("runs", "VB").unwrap();
    let child = lex.token_of("cat", "NN").unwrap();
    let mut counts = CountTable::zeros(m, vcfg);
    counts.add_child(head, Direction::Right, 1, child, 10.0);
    let cfg = NeuralConfig {
        epochs: 50,
        ..Default::default()
    };
    let mut model = NeuralModel::with_random_vectors(&lex, vcfg, cfg.clone()).unwrap();
    model.fit(&counts, &cfg).unwrap();
    let row = model
        .export_params(&vec![1.0; m], 0.0)
        .child(head, Direction::Right, 1)
        .to_vec();
    let argmax = (0..m).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(argmax, child);
}
