//! Synthetic benchmark: sentences sampled from a small near-deterministic
//! DMV over POS tags, with words drawn per tag from Zipf-like distributions.
//!
//! Trees are generated head-outward exactly as the model scores them, so the
//! gold-tree estimate of the grammar parses its own samples almost perfectly.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_conll, RawSentence};
use crate::error::{Error, Result};

/// Continue probabilities at valence 0 and 1, then the child distributions
/// at valence 0 and 1.
#[derive(Clone, Debug)]
pub struct SideSpec {
    pub cont: [f64; 2],
    pub children: [Vec<(&'static str, f64)>; 2],
}

#[derive(Clone, Debug)]
pub struct TagSpec {
    pub tag: &'static str,
    /// Number of distinct word forms for the tag.
    pub words: usize,
    pub left: SideSpec,
    pub right: SideSpec,
}

#[derive(Clone, Debug)]
pub struct SynthGrammar {
    pub root: Vec<(&'static str, f64)>,
    pub tags: Vec<TagSpec>,
    /// Probability that a sentence ends in a period attached to the root.
    pub final_punct: f64,
}

fn side(cont: [f64; 2], c0: &[(&'static str, f64)], c1: &[(&'static str, f64)]) -> SideSpec {
    SideSpec {
        cont,
        children: [c0.to_vec(), c1.to_vec()],
    }
}

fn leaf(tag: &'static str, words: usize, child: &'static str) -> TagSpec {
    let c = [(child, 1.0)];
    TagSpec {
        tag,
        words,
        left: side([0.005, 0.005], &c, &c),
        right: side([0.005, 0.005], &c, &c),
    }
}

/// The grammar behind the shipped benchmark. Every distribution puts at
/// least 0.95 on its mode.
pub fn benchmark_grammar() -> SynthGrammar {
    SynthGrammar {
        root: vec![("VB", 0.97), ("NN", 0.03)],
        tags: vec![
            TagSpec {
                tag: "VB",
                words: 20,
                left: side(
                    [0.97, 0.03],
                    &[("NN", 0.96), ("PRP", 0.04)],
                    &[("RB", 0.96), ("NN", 0.04)],
                ),
                right: side(
                    [0.96, 0.05],
                    &[("NN", 0.96), ("IN", 0.04)],
                    &[("RB", 0.96), ("IN", 0.04)],
                ),
            },
            TagSpec {
                tag: "NN",
                words: 40,
                left: side(
                    [0.96, 0.04],
                    &[("DT", 0.96), ("JJ", 0.04)],
                    &[("JJ", 0.96), ("DT", 0.04)],
                ),
                right: side([0.04, 0.01], &[("IN", 0.96), ("NN", 0.04)], &[("IN", 1.0)]),
            },
            TagSpec {
                tag: "IN",
                words: 6,
                left: side([0.01, 0.01], &[("RB", 1.0)], &[("RB", 1.0)]),
                right: side([0.99, 0.01], &[("NN", 0.97), ("PRP", 0.03)], &[("NN", 1.0)]),
            },
            leaf("DT", 4, "JJ"),
            leaf("JJ", 15, "RB"),
            leaf("RB", 8, "RB"),
            leaf("PRP", 5, "DT"),
        ],
        final_punct: 0.5,
    }
}

impl SynthGrammar {
    fn spec(&self, tag: &str) -> &TagSpec {
        self.tags
            .iter()
            .find(|t| t.tag == tag)
            .expect("tag in grammar")
    }

    /// Smallest mode probability over all distributions.
    pub fn min_mode(&self) -> f64 {
        let mode = |d: &[(&str, f64)]| d.iter().map(|x| x.1).fold(0.0, f64::max);
        let mut m = mode(&self.root);
        for t in &self.tags {
            for s in [&t.left, &t.right] {
                for v in 0..2 {
                    m = m.min(s.cont[v].max(1.0 - s.cont[v]));
                    m = m.min(mode(&s.children[v]));
                }
            }
        }
        m
    }

    fn pick(dist: &[(&'static str, f64)], rng: &mut ChaCha8Rng) -> &'static str {
        let w = WeightedIndex::new(dist.iter().map(|x| x.1)).expect("valid weights");
        dist[w.sample(rng)].0
    }

    /// Generates a subtree head-outward, giving up once more than `budget`
    /// tokens have been produced.
    fn grow(
        &self,
        tag: &'static str,
        rng: &mut ChaCha8Rng,
        budget: usize,
        used: &mut usize,
    ) -> Option<Subtree> {
        *used += 1;
        if *used > budget {
            return None;
        }
        let spec = self.spec(tag);
        let mut deps = [Vec::new(), Vec::new()];
        for (d, s) in [&spec.left, &spec.right].into_iter().enumerate() {
            let mut v = 0;
            while rng.gen::<f64>() < s.cont[v.min(1)] {
                let child = Self::pick(&s.children[v.min(1)], rng);
                deps[d].push(self.grow(child, rng, budget, used)?);
                v += 1;
            }
        }
        let [left, right] = deps;
        Some(Subtree { tag, left, right })
    }

    /// Samples one sentence of at most `max_len` tokens, excluding the
    /// optional final period.
    pub fn sample(&self, rng: &mut ChaCha8Rng, max_len: usize) -> RawSentence {
        let word_dists: Vec<WeightedIndex<f64>> = self
            .tags
            .iter()
            .map(|t| WeightedIndex::new((1..=t.words).map(|r| 1.0 / r as f64)).expect("weights"))
            .collect();
        loop {
            let root = Self::pick(&self.root, rng);
            let mut used = 0;
            let Some(tree) = self.grow(root, rng, max_len, &mut used) else {
                continue;
            };
            let (nodes, _) = tree.flatten();
            let tags: Vec<&str> = nodes.iter().map(|n| n.0).collect();
            let mut heads: Vec<usize> = nodes.iter().map(|n| n.1.map_or(0, |p| p + 1)).collect();
            let mut forms: Vec<String> = tags
                .iter()
                .map(|t| {
                    let i = self.tags.iter().position(|s| s.tag == *t).expect("tag");
                    format!("{}{:02}", t.to_lowercase(), word_dists[i].sample(rng))
                })
                .collect();
            let mut pos: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
            let root_pos = heads.iter().position(|h| *h == 0).expect("root") + 1;
            if rng.gen::<f64>() < self.final_punct {
                forms.push(".".into());
                pos.push(".".into());
                heads.push(root_pos);
            }
            return RawSentence {
                forms,
                pos,
                gold_heads: Some(heads),
            };
        }
    }

    pub fn sample_corpus(&self, n: usize, max_len: usize, seed: u64) -> Vec<RawSentence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng, max_len)).collect()
    }
}

struct Subtree {
    tag: &'static str,
    /// Nearest first.
    left: Vec<Subtree>,
    right: Vec<Subtree>,
}

impl Subtree {
    /// Tags in surface order with each token's parent index (None for this
    /// subtree's head), plus the head's index.
    fn flatten(&self) -> (Vec<(&'static str, Option<usize>)>, usize) {
        let mut out = Vec::new();
        let mut child_roots = Vec::new();
        let mut append = |c: &Subtree, out: &mut Vec<(&'static str, Option<usize>)>| {
            let (sub, r) = c.flatten();
            let offset = out.len();
            out.extend(sub.into_iter().map(|(t, p)| (t, p.map(|p| p + offset))));
            child_roots.push(offset + r);
        };
        for c in self.left.iter().rev() {
            append(c, &mut out);
        }
        let me = out.len();
        out.push((self.tag, None));
        for c in &self.right {
            append(c, &mut out);
        }
        for i in child_roots {
            out[i].1 = Some(me);
        }
        (out, me)
    }
}

/// File names inside a benchmark directory.
pub const BENCHMARK_SPLITS: [&str; 3] = ["train.conll", "val.conll", "test.conll"];

/// Writes train, validation and test splits of the benchmark grammar.
pub fn write_benchmark(
    dir: impl AsRef<Path>,
    sizes: [usize; 3],
    max_len: usize,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grammar = benchmark_grammar();
    for (i, (name, n)) in BENCHMARK_SPLITS.iter().zip(sizes).enumerate() {
        let sents = grammar.sample_corpus(n, max_len, seed.wrapping_add(i as u64));
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_conll(BufWriter::new(file), &sents).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParseTree;

    #[test]
    fn modes_are_near_deterministic() {
        assert!(benchmark_grammar().min_mode() >= 0.95);
    }

    #[test]
    fn samples_are_valid_short_trees() {
        let g = benchmark_grammar();
        let corpus = g.sample_corpus(300, 10, 1);
        for s in &corpus {
            let content = s.pos.iter().filter(|p| *p != ".").count();
            assert!((1..=10).contains(&content));
            ParseTree::from_conll_heads(s.gold_heads.as_ref().unwrap()).unwrap();
        }
        assert_eq!(corpus, g.sample_corpus(300, 10, 1));
    }
}
