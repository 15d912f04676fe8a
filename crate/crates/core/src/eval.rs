//! Directed dependency accuracy.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::chart::viterbi;
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::model::{DmvParams, ParseTree};

/// Sentences up to this length form the short-sentence bucket.
pub const SHORT_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SentenceRecord {
    pub index: usize,
    pub length: usize,
    pub correct: usize,
    /// Predicted heads, 1-based with 0 for the root.
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dda_all: f64,
    /// Accuracy over sentences of at most [`SHORT_LEN`] tokens; `None` when
    /// there are none.
    pub dda_le10: Option<f64>,
    pub tokens_scored: usize,
    pub sentences: Vec<SentenceRecord>,
}

/// Fraction of positions whose predicted head equals the gold head.
pub fn dda(pred: &ParseTree, gold: &[usize]) -> Result<f64> {
    let correct = correct_heads(&pred.conll_heads(), gold)?;
    Ok(correct as f64 / gold.len() as f64)
}

fn correct_heads(pred: &[usize], gold: &[usize]) -> Result<usize> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "predicted tree has {} tokens, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot score an empty sentence".into(),
        ));
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count())
}

/// Scores already-predicted heads against gold heads, both 1-based.
pub fn score_heads(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted sentences but {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sentences = pred
        .iter()
        .zip(gold)
        .enumerate()
        .map(|(index, (p, g))| {
            let correct = correct_heads(p, g).map_err(|e| match e {
                Error::InvalidArgument(m) => {
                    Error::InvalidArgument(format!("sentence {index}: {m}"))
                }
                e => e,
            })?;
            Ok(SentenceRecord {
                index,
                length: g.len(),
                correct,
                predicted: p.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_records(sentences))
}

fn report_from_records(sentences: Vec<SentenceRecord>) -> EvalReport {
    let ratio = |filter: &dyn Fn(&SentenceRecord) -> bool| {
        let (c, t) = sentences
            .iter()
            .filter(|r| filter(r))
            .fold((0, 0), |(c, t), r| (c + r.correct, t + r.length));
        (t > 0).then(|| c as f64 / t as f64)
    };
    let dda_all = ratio(&|_| true).unwrap_or(0.0);
    let dda_le10 = ratio(&|r| r.length <= SHORT_LEN);
    EvalReport {
        dda_all,
        dda_le10,
        tokens_scored: sentences.iter().map(|r| r.length).sum(),
        sentences,
    }
}

/// Viterbi-parses every sentence and scores it against its gold heads.
pub fn evaluate(params: &DmvParams, corpus: &[Sentence]) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let gold: Vec<Vec<usize>> = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.gold_heads.clone().ok_or_else(|| Error::InvalidTree {
                sentence: i,
                reason: "no gold heads".into(),
            })
        })
        .collect::<Result<_>>()?;
    let pred: Vec<Vec<usize>> = corpus
        .par_iter()
        .map(|s| viterbi(s, params).0.conll_heads())
        .collect();
    score_heads(&pred, &gold)
}

impl EvalReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let le10 = self
            .dda_le10
            .map_or_else(|| "n/a".to_string(), |d| format!("{:.4}", d));
        format!(
            "sentences\t{}\ntokens\t{}\ndda\t{:.4}\ndda_le{SHORT_LEN}\t{le10}\n",
            self.sentences.len(),
            self.tokens_scored,
            self.dda_all,
        )
    }

    /// Per-sentence CSV followed by nothing else; the summary lives in
    /// [`Self::to_text`].
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sentence", "length", "correct", "dda"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.sentences {
            w.write_record([
                r.index.to_string(),
                r.length.to_string(),
                r.correct.to_string(),
                format!("{}", r.correct as f64 / r.length as f64),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_uniform, ValenceConfig};

    #[test]
    fn dda_examples() {
        let t = ParseTree::from_conll_heads(&[2, 0, 2]).unwrap();
        assert_eq!(dda(&t, &[2, 0, 2]).unwrap(), 1.0);
        let pred = ParseTree::from_conll_heads(&[0, 1, 1, 1, 1, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(dda(&pred, &[0, 1, 1, 1, 1, 1, 1, 1, 1, 2]).unwrap(), 0.9);
        let five = ParseTree::from_conll_heads(&[0, 1, 1, 1, 1]).unwrap();
        assert!(dda(&five, &[0, 1, 1, 1]).is_err());
    }

    #[test]
    fn single_token_sentence_is_correct() {
        let s = Sentence {
            token_ids: vec![0],
            tag_ids: vec![0],
            gold_heads: Some(vec![0]),
        };
        let r = evaluate(&init_uniform(1, ValenceConfig::default()), &[s]).unwrap();
        assert_eq!(r.dda_all, 1.0);
        assert_eq!(r.dda_le10, Some(1.0));
        assert_eq!(r.tokens_scored, 1);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            evaluate(&init_uniform(1, ValenceConfig::default()), &[]),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn micro_average_and_buckets() {
        let long_gold: Vec<usize> = (0..12).collect();
        let mut long_pred = long_gold.clone();
        long_pred[5] = 1;
        let r = score_heads(&[vec![0, 1], long_pred], &[vec![2, 0], long_gold]).unwrap();
        assert_eq!(r.tokens_scored, 14);
        assert_eq!(r.dda_all, 11.0 / 14.0);
        assert_eq!(r.dda_le10, Some(0.0));
        assert!(r.to_text().contains("dda\t0.7857"));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
