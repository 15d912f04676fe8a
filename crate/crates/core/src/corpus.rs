//! CoNLL ingestion, punctuation stripping, cutoff-controlled lexicalization
//! and sentence encoding.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParseTree;

/// Number of columns in a CoNLL-X row.
pub const CONLL_COLUMNS: usize = 10;

pub const FORM_COL: usize = 1;
pub const POS_COL: usize = 4;
pub const HEAD_COL: usize = 6;

/// PTB punctuation tags removed by default.
pub const PTB_PUNCT_TAGS: [&str; 9] = ["``", "''", ",", ".", ":", "-LRB-", "-RRB-", "#", "$"];

pub fn default_punct_tags() -> HashSet<String> {
    PTB_PUNCT_TAGS.iter().map(|t| t.to_string()).collect()
}

/// A sentence before encoding. Gold heads are 1-based with 0 for the
/// artificial root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSentence {
    pub forms: Vec<String>,
    pub pos: Vec<String>,
    pub gold_heads: Option<Vec<usize>>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }
}

/// One block of CoNLL rows, kept verbatim so that output can preserve the
/// input columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConllBlock {
    pub rows: Vec<Vec<String>>,
    /// 1-based line number of the first row.
    pub first_line: usize,
}

impl ConllBlock {
    fn to_raw(&self, path: &Path) -> Result<RawSentence> {
        let forms = self.rows.iter().map(|r| r[FORM_COL].clone()).collect();
        let pos = self.rows.iter().map(|r| r[POS_COL].clone()).collect();
        let mut heads = Vec::with_capacity(self.rows.len());
        let mut all_numeric = true;
        for (i, row) in self.rows.iter().enumerate() {
            let line = self.first_line + i;
            let head = row[HEAD_COL].as_str();
            if head == "_" || head.is_empty() {
                all_numeric = false;
                continue;
            }
            let h: usize = head.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("non-numeric HEAD '{head}'"),
            })?;
            if h > self.rows.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!(
                        "HEAD {h} out of range for a {}-token sentence",
                        self.rows.len()
                    ),
                });
            }
            heads.push(h);
        }
        let gold_heads = if all_numeric {
            if let Err(reason) = check_conll_heads(&heads) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: self.first_line,
                    message: reason,
                });
            }
            Some(heads)
        } else {
            None
        };
        Ok(RawSentence {
            forms,
            pos,
            gold_heads,
        })
    }
}

/// Checks single-rootedness and acyclicity of 1-based CoNLL heads.
pub fn check_conll_heads(heads: &[usize]) -> std::result::Result<(), String> {
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!(
            "expected exactly one root attachment, found {roots}"
        ));
    }
    for start in 0..heads.len() {
        let mut cur = start;
        let mut steps = 0;
        while heads[cur] != 0 {
            if heads[cur] > heads.len() {
                return Err(format!("head {} out of range", heads[cur]));
            }
            cur = heads[cur] - 1;
            steps += 1;
            if steps > heads.len() {
                return Err(format!("cycle through token {}", start + 1));
            }
        }
    }
    Ok(())
}

/// Reads raw CoNLL-X blocks. Comment lines starting with `#` are skipped.
pub fn read_conll_blocks(path: impl AsRef<Path>) -> Result<Vec<ConllBlock>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conll_blocks(BufReader::new(file), path)
}

pub(crate) fn parse_conll_blocks(reader: impl BufRead, path: &Path) -> Result<Vec<ConllBlock>> {
    let mut blocks = Vec::new();
    let mut current: Option<ConllBlock> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            if let Some(block) = current.take() {
                blocks.push(block);
            }
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<String> = trimmed.split('\t').map(str::to_string).collect();
        if cols.len() != CONLL_COLUMNS {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!(
                    "expected {CONLL_COLUMNS} tab-separated columns, found {}",
                    cols.len()
                ),
            });
        }
        current
            .get_or_insert_with(|| ConllBlock {
                rows: Vec::new(),
                first_line: line_no,
            })
            .rows
            .push(cols);
    }
    if let Some(block) = current {
        blocks.push(block);
    }
    Ok(blocks)
}

/// Reads a CoNLL-X file into raw sentences, in file order.
pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<RawSentence>> {
    let path = path.as_ref();
    read_conll_blocks(path)?
        .iter()
        .map(|b| b.to_raw(path))
        .collect()
}

pub fn blocks_to_raw(blocks: &[ConllBlock], path: &Path) -> Result<Vec<RawSentence>> {
    blocks.iter().map(|b| b.to_raw(path)).collect()
}

/// Writes raw sentences as 10-column CoNLL-X. Missing heads are written as `_`.
pub fn write_conll(mut out: impl Write, sentences: &[RawSentence]) -> std::io::Result<()> {
    for s in sentences {
        for i in 0..s.len() {
            let head = s
                .gold_heads
                .as_ref()
                .map_or_else(|| "_".to_string(), |h| h[i].to_string());
            writeln!(
                out,
                "{}\t{}\t_\t{}\t{}\t_\t{}\t_\t_\t_",
                i + 1,
                s.forms[i],
                s.pos[i],
                s.pos[i],
                head
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Removes punctuation tokens, re-attaching their dependents to the nearest
/// non-punctuation ancestor, and keeps sentences whose stripped length lies
/// in `[1, max_len]`.
pub fn strip_and_filter(
    raw: &[RawSentence],
    punct_tags: &HashSet<String>,
    max_len: usize,
) -> Vec<RawSentence> {
    raw.iter()
        .filter_map(|s| strip_punct(s, punct_tags))
        .filter(|s| !s.is_empty() && s.len() <= max_len)
        .collect()
}

/// Strips punctuation from one sentence; `None` if nothing remains.
pub fn strip_punct(s: &RawSentence, punct_tags: &HashSet<String>) -> Option<RawSentence> {
    let keep: Vec<bool> = s.pos.iter().map(|p| !punct_tags.contains(p)).collect();
    let mut new_index = vec![0usize; s.len()];
    let mut next = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            next += 1;
            new_index[i] = next;
        }
    }
    if next == 0 {
        return None;
    }
    let forms = (0..s.len())
        .filter(|&i| keep[i])
        .map(|i| s.forms[i].clone())
        .collect();
    let pos = (0..s.len())
        .filter(|&i| keep[i])
        .map(|i| s.pos[i].clone())
        .collect();
    let gold_heads = s.gold_heads.as_ref().map(|heads| {
        let mut out: Vec<usize> = (0..s.len())
            .filter(|&i| keep[i])
            .map(|i| {
                let mut h = heads[i];
                while h != 0 && !keep[h - 1] {
                    h = heads[h - 1];
                }
                if h == 0 {
                    0
                } else {
                    new_index[h - 1]
                }
            })
            .collect();
        // A punctuation root leaves several root attachments behind; the
        // leftmost one stays the root and the others attach to it.
        if let Some(first_root) = out.iter().position(|&h| h == 0) {
            for (i, h) in out.iter_mut().enumerate() {
                if *h == 0 && i != first_root {
                    *h = first_root + 1;
                }
            }
        }
        out
    });
    Some(RawSentence {
        forms,
        pos,
        gold_heads,
    })
}

/// A lexicon entry: either a word/POS pair or a bare POS fallback.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenDesc {
    pub word: Option<String>,
    pub tag: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LexiconRepr {
    cutoff: usize,
    tags: Vec<String>,
    tokens: Vec<TokenDesc>,
}

/// Inventory of lexicalized tokens. Token ids `0..T` are the POS-only tokens
/// in tag-id order; word/POS tokens follow in first-occurrence order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "LexiconRepr", into = "LexiconRepr")]
pub struct Lexicon {
    cutoff: usize,
    tags: Vec<String>,
    tokens: Vec<TokenDesc>,
    tag_index: HashMap<String, usize>,
    word_tokens: HashMap<(String, usize), usize>,
}

impl PartialEq for Lexicon {
    fn eq(&self, other: &Self) -> bool {
        self.cutoff == other.cutoff && self.tags == other.tags && self.tokens == other.tokens
    }
}

impl From<LexiconRepr> for Lexicon {
    fn from(r: LexiconRepr) -> Self {
        let tag_index = r
            .tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let word_tokens = r
            .tokens
            .iter()
            .enumerate()
            .filter_map(|(id, t)| t.word.as_ref().map(|w| ((w.clone(), t.tag), id)))
            .collect();
        Lexicon {
            cutoff: r.cutoff,
            tags: r.tags,
            tokens: r.tokens,
            tag_index,
            word_tokens,
        }
    }
}

impl From<Lexicon> for LexiconRepr {
    fn from(l: Lexicon) -> Self {
        LexiconRepr {
            cutoff: l.cutoff,
            tags: l.tags,
            tokens: l.tokens,
        }
    }
}

impl Lexicon {
    /// Vocabulary size `m`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn tokens(&self) -> &[TokenDesc] {
        &self.tokens
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }

    /// Tag id of a token.
    pub fn tag_of(&self, token: usize) -> usize {
        self.tokens[token].tag
    }

    /// Token id for a word/POS pair, falling back to the POS-only token.
    pub fn token_of(&self, word: &str, tag: &str) -> Option<usize> {
        let tag_id = self.tag_id(tag)?;
        Some(
            self.word_tokens
                .get(&(word.to_string(), tag_id))
                .copied()
                .unwrap_or(tag_id),
        )
    }

    /// Printable token name: `word/TAG` or `TAG`.
    pub fn token_name(&self, token: usize) -> String {
        let t = &self.tokens[token];
        match &t.word {
            Some(w) => format!("{w}/{}", self.tags[t.tag]),
            None => self.tags[t.tag].clone(),
        }
    }
}

/// Builds the lexicon. Words whose corpus frequency is below `cutoff` are
/// represented by their POS tag only.
pub fn build_lexicon(raw: &[RawSentence], cutoff: usize) -> Result<Lexicon> {
    if cutoff == 0 {
        return Err(Error::InvalidArgument(
            "cutoff must be at least 1 (1 means full lexicalization)".into(),
        ));
    }
    if raw.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tag_set: BTreeSet<&str> = raw
        .iter()
        .flat_map(|s| s.pos.iter().map(String::as_str))
        .collect();
    let tags: Vec<String> = tag_set.into_iter().map(str::to_string).collect();
    let tag_index: HashMap<&str, usize> = tags
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in raw {
        for w in &s.forms {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }

    let mut tokens: Vec<TokenDesc> = (0..tags.len())
        .map(|tag| TokenDesc { word: None, tag })
        .collect();
    let mut seen: HashSet<(&str, usize)> = HashSet::new();
    for s in raw {
        for (w, p) in s.forms.iter().zip(&s.pos) {
            if freq[w.as_str()] < cutoff {
                continue;
            }
            let tag = tag_index[p.as_str()];
            if seen.insert((w.as_str(), tag)) {
                tokens.push(TokenDesc {
                    word: Some(w.clone()),
                    tag,
                });
            }
        }
    }
    Ok(LexiconRepr {
        cutoff,
        tags,
        tokens,
    }
    .into())
}

/// An encoded sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub token_ids: Vec<usize>,
    pub tag_ids: Vec<usize>,
    /// 1-based heads, 0 = root.
    pub gold_heads: Option<Vec<usize>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Gold heads as a validated tree, if present.
    pub fn gold_tree(&self) -> Option<Result<ParseTree>> {
        self.gold_heads
            .as_ref()
            .map(|h| ParseTree::from_conll_heads(h))
    }
}

pub fn encode_sentence(s: &RawSentence, lexicon: &Lexicon) -> Result<Sentence> {
    let mut token_ids = Vec::with_capacity(s.len());
    let mut tag_ids = Vec::with_capacity(s.len());
    for (w, p) in s.forms.iter().zip(&s.pos) {
        let token = lexicon
            .token_of(w, p)
            .ok_or_else(|| Error::UnknownTag(p.clone()))?;
        token_ids.push(token);
        tag_ids.push(lexicon.tag_of(token));
    }
    Ok(Sentence {
        token_ids,
        tag_ids,
        gold_heads: s.gold_heads.clone(),
    })
}

pub fn encode(raw: &[RawSentence], lexicon: &Lexicon) -> Result<Vec<Sentence>> {
    raw.iter().map(|s| encode_sentence(s, lexicon)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn raw(forms: &[&str], pos: &[&str], heads: Option<&[usize]>) -> RawSentence {
        RawSentence {
            forms: forms.iter().map(|s| s.to_string()).collect(),
            pos: pos.iter().map(|s| s.to_string()).collect(),
            gold_heads: heads.map(|h| h.to_vec()),
        }
    }

    fn parse(text: &str) -> Result<Vec<RawSentence>> {
        let p = Path::new("mem.conll");
        let blocks = parse_conll_blocks(Cursor::new(text), p)?;
        blocks_to_raw(&blocks, p)
    }

    #[test]
    fn reads_two_row_block() {
        let text = "1\tdog\t_\t_\tNN\t_\t2\t_\t_\t_\n2\tbarks\t_\t_\tVBZ\t_\t0\t_\t_\t_\n";
        let s = parse(text).unwrap();
        assert_eq!(
            s,
            vec![raw(&["dog", "barks"], &["NN", "VBZ"], Some(&[2, 0]))]
        );
    }

    #[test]
    fn reads_multiple_blocks_and_skips_comments() {
        let text = "# sent 1\n1\ta\t_\t_\tDT\t_\t0\t_\t_\t_\n\n\n1\tb\t_\t_\tNN\t_\t0\t_\t_\t_\n";
        assert_eq!(parse(text).unwrap().len(), 2);
    }

    #[test]
    fn bad_head_reports_line() {
        let text = "1\ta\t_\t_\tDT\t_\t0\t_\t_\t_\n\n1\tdog\t_\t_\tNN\t_\tx\t_\t_\t_\n";
        match parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_column_count_is_error() {
        assert!(matches!(
            parse("1\tdog\tNN\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn underscore_heads_mean_no_gold() {
        let text = "1\tdog\t_\t_\tNN\t_\t_\t_\t_\t_\n2\tbarks\t_\t_\tVBZ\t_\t0\t_\t_\t_\n";
        assert_eq!(parse(text).unwrap()[0].gold_heads, None);
    }

    #[test]
    fn strips_trailing_punctuation() {
        let s = raw(&["the", "dog", "."], &["DT", "NN", "."], Some(&[2, 0, 2]));
        let out = strip_and_filter(&[s], &default_punct_tags(), 10);
        assert_eq!(
            out,
            vec![raw(&["the", "dog"], &["DT", "NN"], Some(&[2, 0]))]
        );
    }

    #[test]
    fn length_filter_counts_after_stripping() {
        let mut forms = vec!["w"; 11];
        forms.push(".");
        let mut pos = vec!["NN"; 11];
        pos.push(".");
        let s = raw(&forms, &pos, None);
        assert!(strip_and_filter(std::slice::from_ref(&s), &default_punct_tags(), 10).is_empty());
        assert_eq!(strip_and_filter(&[s], &default_punct_tags(), 11).len(), 1);
    }

    #[test]
    fn all_punctuation_sentence_removed() {
        let s = raw(&[",", "."], &[",", "."], Some(&[0, 1]));
        assert!(strip_and_filter(&[s], &default_punct_tags(), 10).is_empty());
    }

    #[test]
    fn dependents_of_punctuation_reattach_to_ancestor() {
        // a <- , <- b, with "," headed by c (root).
        let s = raw(
            &["a", ",", "b", "c"],
            &["DT", ",", "NN", "VB"],
            Some(&[2, 4, 2, 0]),
        );
        let out = strip_punct(&s, &default_punct_tags()).unwrap();
        assert_eq!(out.gold_heads, Some(vec![3, 3, 0]));
    }

    #[test]
    fn punctuation_root_keeps_single_root() {
        let s = raw(&["a", ".", "b"], &["NN", ".", "VB"], Some(&[2, 0, 2]));
        let out = strip_punct(&s, &default_punct_tags()).unwrap();
        assert_eq!(out.gold_heads, Some(vec![0, 1]));
    }

    #[test]
    fn cutoff_replaces_rare_words() {
        let mut corpus = Vec::new();
        for _ in 0..5 {
            corpus.push(raw(&["dog"], &["NN"], None));
        }
        for _ in 0..2 {
            corpus.push(raw(&["cat"], &["NN"], None));
        }
        let lex = build_lexicon(&corpus, 3).unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.token_name(0), "NN");
        assert_eq!(lex.token_name(1), "dog/NN");
        assert_eq!(lex.token_of("cat", "NN"), Some(0));
        assert_eq!(lex.token_of("dog", "NN"), Some(1));
        let enc = encode(&[raw(&["cat", "dog"], &["NN", "NN"], None)], &lex).unwrap();
        assert_eq!(enc[0].token_ids, vec![0, 1]);
        assert_eq!(enc[0].tag_ids, vec![0, 0]);
        assert!(matches!(
            encode(&[raw(&["dog"], &["XX"], None)], &lex),
            Err(Error::UnknownTag(t)) if t == "XX"
        ));
    }

    #[test]
    fn huge_cutoff_is_unlexicalized_and_cutoff_one_is_full() {
        let corpus = vec![
            raw(&["a", "dog", "runs"], &["DT", "NN", "VB"], None),
            raw(&["a", "cat", "runs"], &["DT", "NN", "VB"], None),
        ];
        assert_eq!(build_lexicon(&corpus, 100_000).unwrap().len(), 3);
        // 3 tags + a/DT, dog/NN, runs/VB, cat/NN
        assert_eq!(build_lexicon(&corpus, 1).unwrap().len(), 7);
    }

    #[test]
    fn zero_cutoff_rejected() {
        let corpus = vec![raw(&["a"], &["DT"], None)];
        assert!(matches!(
            build_lexicon(&corpus, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_word_different_tags_get_distinct_tokens() {
        let corpus = vec![raw(&["run", "run"], &["NN", "VB"], None)];
        let lex = build_lexicon(&corpus, 1).unwrap();
        assert_ne!(lex.token_of("run", "NN"), lex.token_of("run", "VB"));
    }

    #[test]
    fn lexicon_serde_round_trip_restores_maps() {
        let corpus = vec![raw(&["a", "dog"], &["DT", "NN"], None)];
        let lex = build_lexicon(&corpus, 1).unwrap();
        let json = serde_json::to_string(&lex).unwrap();
        let back: Lexicon = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lex);
        assert_eq!(back.token_of("dog", "NN"), lex.token_of("dog", "NN"));
    }
}
