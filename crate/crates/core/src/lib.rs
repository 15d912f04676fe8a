//! Unsupervised induction of lexicalized dependency grammars.
//!
//! The crate implements an extended Dependency Model with Valence (DMV) over
//! word/POS tokens whose degree of lexicalization is controlled by a
//! word-frequency cutoff, exact inside-outside and Viterbi inference for it, a
//! neural network that predicts CHILD and DECISION rule probabilities, and the
//! EM drivers that tie these together (soft EM, hard EM, and batched hard EM
//! with a persistent network).
//!
//! Typical library use:
//!
//! ```no_run
//! use lexdmv::corpus::{build_lexicon, encode, read_conll, strip_and_filter, default_punct_tags};
//! use lexdmv::model::{init_km, ValenceConfig};
//! use lexdmv::trainer::{soft_em, TrainConfig};
//!
//! let raw = read_conll("train.conll").unwrap();
//! let raw = strip_and_filter(&raw, &default_punct_tags(), 10);
//! let lexicon = build_lexicon(&raw, 100).unwrap();
//! let corpus = encode(&raw, &lexicon).unwrap();
//! let params0 = init_km(&corpus, lexicon.len(), ValenceConfig::default());
//! let (params, trace) = soft_em(&corpus, params0, &TrainConfig::default()).unwrap();
//! ```

pub mod chart;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod neural;
pub mod persist;
pub mod synth;
pub mod trainer;
pub mod verify;

mod logmath;

pub use error::{Error, Result};
