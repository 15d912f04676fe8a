//! Versioned JSON files for trained models and preprocessed corpora.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chart::viterbi;
use crate::corpus::{encode_sentence, Lexicon, RawSentence, Sentence};
use crate::error::{Error, Result};
use crate::model::DmvParams;
use crate::neural::NeuralModel;
use crate::trainer::TrainConfig;

pub const MODEL_FORMAT: &str = "lexdmv-model";
pub const CORPUS_FORMAT: &str = "lexdmv-corpus";
pub const FORMAT_VERSION: u32 = 1;

/// Preprocessing settings carried alongside data so that other inputs can
/// be treated the same way.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub punct_tags: Vec<String>,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub lexicon: Lexicon,
    pub preprocessing: Preprocessing,
    pub params: DmvParams,
    pub train: Option<TrainConfig>,
    pub network: Option<NeuralModel>,
}

impl ModelFile {
    pub fn new(
        lexicon: Lexicon,
        preprocessing: Preprocessing,
        params: DmvParams,
        train: Option<TrainConfig>,
        network: Option<NeuralModel>,
    ) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: FORMAT_VERSION,
            lexicon,
            preprocessing,
            params,
            train,
            network,
        }
    }
}

impl ModelFile {
    /// Punctuation tags as a set.
    pub fn punct_set(&self) -> HashSet<String> {
        self.preprocessing.punct_tags.iter().cloned().collect()
    }

    /// Viterbi heads (1-based, 0 = root) for a tokenized sentence.
    /// Punctuation tokens are left out of the parse and attached to the
    /// predicted root.
    pub fn parse_tokens(
        &self,
        forms: &[&str],
        tags: &[&str],
        punct: &HashSet<String>,
    ) -> Result<Vec<usize>> {
        if forms.len() != tags.len() {
            return Err(Error::InvalidArgument(format!(
                "{} words but {} tags",
                forms.len(),
                tags.len()
            )));
        }
        let content: Vec<usize> = (0..tags.len())
            .filter(|&i| !punct.contains(tags[i]))
            .collect();
        if content.is_empty() {
            return Ok((0..tags.len()).map(|i| usize::from(i != 0)).collect());
        }
        let sentence = self.encode_tokens(
            &content.iter().map(|&i| forms[i]).collect::<Vec<_>>(),
            &content.iter().map(|&i| tags[i]).collect::<Vec<_>>(),
        )?;
        let (tree, _) = viterbi(&sentence, &self.params);
        let root_row = content[tree.root()] + 1;
        let mut heads = vec![root_row; tags.len()];
        for (k, &row) in content.iter().enumerate() {
            heads[row] = tree.heads()[k].map_or(0, |h| content[h] + 1);
        }
        Ok(heads)
    }

    /// Encodes words and tags with the model's lexicon.
    pub fn encode_tokens(&self, forms: &[&str], tags: &[&str]) -> Result<Sentence> {
        let raw = RawSentence {
            forms: forms.iter().map(|s| s.to_string()).collect(),
            pos: tags.iter().map(|s| s.to_string()).collect(),
            gold_heads: None,
        };
        encode_sentence(&raw, &self.lexicon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub format: String,
    pub version: u32,
    pub preprocessing: Preprocessing,
    pub lexicon: Lexicon,
    /// Sentences after punctuation stripping and length filtering.
    pub raw: Vec<RawSentence>,
    pub sentences: Vec<Sentence>,
}

impl CorpusFile {
    pub fn new(
        preprocessing: Preprocessing,
        lexicon: Lexicon,
        raw: Vec<RawSentence>,
        sentences: Vec<Sentence>,
    ) -> Self {
        CorpusFile {
            format: CORPUS_FORMAT.into(),
            version: FORMAT_VERSION,
            preprocessing,
            lexicon,
            raw,
            sentences,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

/// Parses a file body, checking the format tag and version before the rest
/// of the structure.
fn from_json<T: DeserializeOwned>(text: &str, format: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("not a {format} file: {e}")))?;
    let found_format = value.get("format").and_then(|f| f.as_str());
    if found_format != Some(format) {
        return Err(Error::Format(format!(
            "expected a {format} file, found format {}",
            found_format.unwrap_or("<missing>")
        )));
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::Version {
                found: other.map_or_else(|| "<missing>".to_string(), |v| v.to_string()),
                expected: FORMAT_VERSION.to_string(),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))
}

pub fn model_to_string(model: &ModelFile) -> Result<String> {
    to_json(model)
}

pub fn model_from_str(text: &str) -> Result<ModelFile> {
    let m: ModelFile = from_json(text, MODEL_FORMAT)?;
    if m.params.vocab_size() != m.lexicon.len() {
        return Err(Error::Format(format!(
            "parameters cover {} tokens but the lexicon has {}",
            m.params.vocab_size(),
            m.lexicon.len()
        )));
    }
    Ok(m)
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_string(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &CorpusFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(corpus)?).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, CORPUS_FORMAT)
}
