//! The `lexdmv` command line.
//!
//! Every subcommand accepts `--config FILE` (or the `LEXDMV_CONFIG`
//! environment variable): a flat `key=value` file whose entries are applied
//! as `--key value` flags before the ones given on the command line, so
//! explicit flags win.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{
    blocks_to_raw, build_lexicon, default_punct_tags, encode, read_conll, read_conll_blocks,
    strip_and_filter, strip_punct, Lexicon, RawSentence, Sentence, FORM_COL, HEAD_COL, POS_COL,
};
use crate::error::Error;
use crate::eval::{evaluate, score_heads};
use crate::model::{
    init_km, init_random, init_uniform, mle_from_trees, DmvParams, ParseTree, ValenceConfig,
};
use crate::neural::{load_vectors, GradFault, NeuralConfig, NeuralModel};
use crate::persist::{
    load_corpus, load_model, save_corpus, save_model, CorpusFile, ModelFile, Preprocessing,
};
use crate::synth::write_benchmark;
use crate::trainer::{
    hard_em_neural_with, hard_em_tabular_with, soft_em_with, warm_start, Monitor, TrainConfig,
    TrainMode, TrainTrace,
};
use crate::verify::{run_verify, VerifyOptions};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "LEXDMV_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Word cutoffs used for English treebanks.
pub const ENGLISH_CUTOFFS: [usize; 9] = [100000, 500, 200, 100, 80, 70, 60, 50, 40];
/// Word cutoffs used for Chinese treebanks.
pub const CHINESE_CUTOFFS: [usize; 9] = [100000, 100, 70, 50, 40, 30, 20, 12, 10];

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
    Verify(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "lexdmv",
    version,
    about = "Unsupervised lexicalized dependency grammar induction"
)]
struct Cli {
    /// Key=value file applied as default flags for the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Strip punctuation, filter by length, build the lexicon and encode.
    #[command(args_override_self = true)]
    Preprocess(PreprocessArgs),
    /// Train a grammar on a preprocessed corpus.
    #[command(args_override_self = true)]
    Train(Box<TrainArgs>),
    /// Write Viterbi heads into a CoNLL file.
    #[command(args_override_self = true)]
    Parse(ParseArgs),
    /// Directed dependency accuracy of a model or of predicted heads.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Train and evaluate over a grid of cutoffs, corpus sizes and seeds.
    #[command(args_override_self = true)]
    Sweep(Box<SweepArgs>),
    /// Check the chart algorithms and backpropagation.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
    /// Write the synthetic benchmark corpus.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct StripArgs {
    /// Comma-separated punctuation tags (default: Penn Treebank punctuation).
    #[arg(long, value_name = "TAGS")]
    punct_tags: Option<String>,
}

impl StripArgs {
    fn tags(&self) -> HashSet<String> {
        match &self.punct_tags {
            Some(list) => list
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect(),
            None => default_punct_tags(),
        }
    }
}

fn sorted_tags(tags: &HashSet<String>) -> Vec<String> {
    let mut v: Vec<String> = tags.iter().cloned().collect();
    v.sort();
    v
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Words seen fewer times than this become POS-only tokens.
    #[arg(long, default_value_t = 100000)]
    cutoff: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[command(flatten)]
    strip: StripArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Soft,
    Hard,
    Neural,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Soft => TrainMode::SoftTabular,
            ModeArg::Hard => TrainMode::HardTabular,
            ModeArg::Neural => TrainMode::HardNeural,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum InitArg {
    Km,
    Uniform,
    Random,
    Trees,
}

impl std::fmt::Display for InitArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitArg::Km => "km",
            InitArg::Uniform => "uniform",
            InitArg::Random => "random",
            InitArg::Trees => "trees",
        })
    }
}

/// Options that only apply to neural training.
#[derive(Args, Debug, Default, Clone)]
struct NeuralArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Contexts per network mini-batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs_per_mstep: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    d_word_in: Option<usize>,
    #[arg(long)]
    d_tag_in: Option<usize>,
    #[arg(long)]
    d_val: Option<usize>,
    #[arg(long)]
    k_word: Option<usize>,
    #[arg(long)]
    k_tag: Option<usize>,
    /// Sentences per EM iteration.
    #[arg(long)]
    em_batch: Option<usize>,
    /// word2vec text file keyed by `word/TAG` or `TAG`.
    #[arg(long, value_name = "FILE")]
    word_vectors: Option<PathBuf>,
    /// word2vec text file keyed by POS tag.
    #[arg(long, value_name = "FILE")]
    tag_vectors: Option<PathBuf>,
    /// Use random vectors when a vector file does not exist.
    #[arg(long)]
    allow_random_vectors: bool,
    /// Epochs fitting the network to the initial grammar's Viterbi trees.
    #[arg(long)]
    warm_start_epochs: Option<usize>,
}

const DEFAULT_WARM_START_EPOCHS: usize = 20;

impl NeuralArgs {
    fn any_set(&self) -> Option<&'static str> {
        let named = [
            ("--lr", self.lr.is_some()),
            ("--momentum", self.momentum.is_some()),
            ("--batch", self.batch.is_some()),
            ("--epochs-per-mstep", self.epochs_per_mstep.is_some()),
            ("--hidden", self.hidden.is_some()),
            ("--d-word-in", self.d_word_in.is_some()),
            ("--d-tag-in", self.d_tag_in.is_some()),
            ("--d-val", self.d_val.is_some()),
            ("--k-word", self.k_word.is_some()),
            ("--k-tag", self.k_tag.is_some()),
            ("--em-batch", self.em_batch.is_some()),
            ("--word-vectors", self.word_vectors.is_some()),
            ("--tag-vectors", self.tag_vectors.is_some()),
            ("--allow-random-vectors", self.allow_random_vectors),
            ("--warm-start-epochs", self.warm_start_epochs.is_some()),
        ];
        named.iter().find(|(_, set)| *set).map(|(n, _)| *n)
    }

    fn config(&self, seed: u64) -> CliResult<NeuralConfig> {
        let d = NeuralConfig::default();
        let cfg = NeuralConfig {
            d_word_in: self.d_word_in.unwrap_or(d.d_word_in),
            d_tag_in: self.d_tag_in.unwrap_or(d.d_tag_in),
            d_val: self.d_val.unwrap_or(d.d_val),
            k_word: self.k_word.unwrap_or(d.k_word),
            k_tag: self.k_tag.unwrap_or(d.k_tag),
            hidden: self.hidden.unwrap_or(d.hidden),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch: self.batch.unwrap_or(d.batch),
            epochs: self.epochs_per_mstep.unwrap_or(d.epochs),
            seed,
        };
        if cfg.epochs == 0 {
            return Err(CliError::Usage("--epochs-per-mstep must be >= 1".into()));
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn network(
        &self,
        lexicon: &Lexicon,
        vcfg: ValenceConfig,
        ncfg: &NeuralConfig,
    ) -> CliResult<NeuralModel> {
        let (emb, cov) = load_vectors(
            self.word_vectors.as_deref(),
            self.tag_vectors.as_deref(),
            lexicon,
            ncfg,
            self.allow_random_vectors,
        )?;
        if self.word_vectors.is_some() || self.tag_vectors.is_some() {
            log::info!(
                "vectors from files: {}/{} tokens, {}/{} tags",
                cov.words_found,
                cov.words_total,
                cov.tags_found,
                cov.tags_total
            );
        }
        Ok(NeuralModel::new(lexicon, vcfg, ncfg.clone(), emb)?)
    }
}

#[derive(Args, Debug, Clone)]
struct GrammarArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Soft)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = InitArg::Km)]
    init: InitArg,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    ll_tol: f64,
    /// Additive smoothing of rule counts.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Valence cap for CHILD rules.
    #[arg(long, default_value_t = 2)]
    valence_child: usize,
    /// Valence cap for DECISION rules.
    #[arg(long, default_value_t = 2)]
    valence_decision: usize,
    #[command(flatten)]
    neural: NeuralArgs,
}

impl GrammarArgs {
    fn validate(&self) -> CliResult<()> {
        if self.mode != ModeArg::Neural {
            if let Some(flag) = self.neural.any_set() {
                return Err(CliError::Usage(format!(
                    "{flag} only applies to --mode neural"
                )));
            }
        }
        self.valence()?;
        self.train_config()?;
        Ok(())
    }

    fn valence(&self) -> CliResult<ValenceConfig> {
        ValenceConfig::new(self.valence_child, self.valence_decision)
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            max_iters: self.max_iters,
            ll_tol: self.ll_tol,
            lambda: self.lambda,
            em_batch: self.neural.em_batch.unwrap_or(d.em_batch),
            seed: self.seed,
            mode: self.mode.into(),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn initial_params(
        &self,
        corpus: &[Sentence],
        m: usize,
        trees: Option<&[ParseTree]>,
    ) -> CliResult<DmvParams> {
        let vcfg = self.valence()?;
        Ok(match self.init {
            InitArg::Km => init_km(corpus, m, vcfg),
            InitArg::Uniform => init_uniform(m, vcfg),
            InitArg::Random => init_random(m, vcfg, self.seed),
            InitArg::Trees => {
                let trees = trees.ok_or_else(|| {
                    CliError::Usage("--init trees needs --init-trees FILE".into())
                })?;
                mle_from_trees(corpus, trees, m, vcfg, self.lambda)?
            }
        })
    }

    /// Runs the configured trainer from `params0`.
    fn train(
        &self,
        corpus: &[Sentence],
        lexicon: &Lexicon,
        params0: DmvParams,
        monitor: &mut Monitor,
    ) -> CliResult<(DmvParams, Option<NeuralModel>, TrainTrace)> {
        let cfg = self.train_config()?;
        Ok(match self.mode {
            ModeArg::Soft => {
                let (p, t) = soft_em_with(corpus, params0, &cfg, monitor)?;
                (p, None, t)
            }
            ModeArg::Hard => {
                let (p, t) = hard_em_tabular_with(corpus, params0, &cfg, monitor)?;
                (p, None, t)
            }
            ModeArg::Neural => {
                let ncfg = self.neural.config(self.seed)?;
                let mut net = self.neural.network(lexicon, self.valence()?, &ncfg)?;
                let epochs = self
                    .neural
                    .warm_start_epochs
                    .unwrap_or(DEFAULT_WARM_START_EPOCHS);
                if epochs > 0 {
                    warm_start(&mut net, corpus, &params0, &ncfg, epochs)?;
                }
                let (net, p, t) = hard_em_neural_with(corpus, net, params0, &cfg, &ncfg, monitor)?;
                (p, Some(net), t)
            }
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preprocessed corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Model file to write.
    #[arg(long)]
    output: PathBuf,
    /// Trace CSV to write.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// CoNLL trees for `--init trees`, aligned with the training corpus.
    #[arg(long, value_name = "FILE")]
    init_trees: Option<PathBuf>,
    /// CoNLL file with gold heads scored after every iteration.
    #[arg(long, value_name = "FILE")]
    val: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    /// Record wall-clock seconds in the trace.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    grammar: GrammarArgs,
}

#[derive(Args, Debug)]
struct ParseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output CoNLL file (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// CoNLL file with gold heads.
    #[arg(long)]
    gold: PathBuf,
    /// Model to parse the gold sentences with.
    #[arg(long, conflicts_with = "pred")]
    model: Option<PathBuf>,
    /// CoNLL file with predicted heads.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Per-sentence CSV report.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Only score sentences up to this stripped length.
    #[arg(long)]
    max_len: Option<usize>,
    #[command(flatten)]
    strip: StripArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Language {
    English,
    Chinese,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Results CSV.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated word cutoffs (default: the list for --language).
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = Language::English)]
    language: Language,
    /// Comma-separated training-set sizes (default: the whole corpus).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Seed of the shuffle whose prefixes form the training sets.
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Only evaluate sentences up to this stripped length.
    #[arg(long)]
    eval_max_len: Option<usize>,
    /// Cells run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record wall-clock seconds.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    strip: StripArgs,
    #[command(flatten)]
    grammar: GrammarArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 1000)]
    grad_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of the analytic gradient (the check must then fail).
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory for train.conll, val.conll and test.conll.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Inserts config-file entries as flags right after the subcommand name.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut path: Option<PathBuf> = None;
    let mut sub_idx = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if sub_idx.is_none() && !a.starts_with('-') {
            sub_idx = Some(i);
        }
        i += 1;
    }
    let path = path.or_else(|| {
        std::env::var_os(CONFIG_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    });
    let (Some(path), Some(sub_idx)) = (path, sub_idx) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(Error::io(&path, e)))?;
    let mut injected: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let key = key.trim().replace('_', "-");
        match value.trim() {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            v => {
                injected.push(format!("--{key}").into());
                injected.push(v.into());
            }
        }
    }
    let mut out = args;
    out.splice(sub_idx + 1..sub_idx + 1, injected);
    Ok(out)
}

/// Runs the command line and returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let result = expand_config(args).and_then(|args| match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                Err(CliError::Usage(String::new()))
            } else {
                Ok(())
            }
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(CliError::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            EXIT_VERIFY
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(*a),
        Command::Parse(a) => cmd_parse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(*a),
        Command::Verify(a) => cmd_verify(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> crate::Result<()>,
) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> CliResult<()> {
    if a.cutoff == 0 || a.max_len == 0 {
        return Err(CliError::Usage(
            "--cutoff and --max-len must be >= 1".into(),
        ));
    }
    let punct = a.strip.tags();
    let raw = strip_and_filter(&read_conll(&a.input)?, &punct, a.max_len);
    let lexicon = build_lexicon(&raw, a.cutoff)?;
    let sentences = encode(&raw, &lexicon)?;
    println!("sentences\t{}", sentences.len());
    println!("tags\t{}", lexicon.num_tags());
    println!("vocab_size\t{}", lexicon.len());
    let file = CorpusFile::new(
        Preprocessing {
            punct_tags: sorted_tags(&punct),
            max_len: a.max_len,
        },
        lexicon,
        raw,
        sentences,
    );
    save_corpus(&a.output, &file)?;
    Ok(())
}

/// Reads a CoNLL file, strips punctuation and encodes it with `lexicon`.
/// Sentences that are empty after stripping, or longer than `max_len`, are
/// dropped.
fn load_eval_corpus(
    path: &Path,
    lexicon: &Lexicon,
    punct: &HashSet<String>,
    max_len: Option<usize>,
) -> CliResult<Vec<Sentence>> {
    let raw = strip_and_filter(&read_conll(path)?, punct, max_len.unwrap_or(usize::MAX));
    Ok(encode(&raw, lexicon)?)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let g = &a.grammar;
    g.validate()?;
    if (a.init_trees.is_some()) != (g.init == InitArg::Trees) {
        return Err(CliError::Usage(
            "--init-trees goes together with --init trees".into(),
        ));
    }
    if a.checkpoint_every.is_some() != a.checkpoint_dir.is_some() {
        return Err(CliError::Usage(
            "--checkpoint-every and --checkpoint-dir go together".into(),
        ));
    }
    let cf = load_corpus(&a.corpus)?;
    let punct: HashSet<String> = cf.preprocessing.punct_tags.iter().cloned().collect();
    let trees = match &a.init_trees {
        Some(p) => Some(read_init_trees(p, &cf, &punct)?),
        None => None,
    };
    let params0 = g.initial_params(&cf.sentences, cf.lexicon.len(), trees.as_deref())?;
    let val = match &a.val {
        Some(p) => Some(load_eval_corpus(p, &cf.lexicon, &punct, None)?),
        None => None,
    };
    let train_cfg = g.train_config()?;
    if let Some(dir) = &a.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let checkpoint = a.checkpoint_dir.clone().map(|dir| {
        let lexicon = cf.lexicon.clone();
        let pre = cf.preprocessing.clone();
        let cfg = train_cfg.clone();
        Box::new(move |it: usize, p: &DmvParams, net: Option<&NeuralModel>| {
            let file = ModelFile::new(
                lexicon.clone(),
                pre.clone(),
                p.clone(),
                Some(cfg.clone()),
                net.cloned(),
            );
            save_model(dir.join(format!("checkpoint-{it:05}.json")), &file)
        }) as Box<crate::trainer::CheckpointFn>
    });
    let mut monitor = Monitor {
        validation: val.as_deref(),
        checkpoint_every: a.checkpoint_every.unwrap_or(0),
        checkpoint,
    };
    let (params, network, trace) = g.train(&cf.sentences, &cf.lexicon, params0, &mut monitor)?;
    let model = ModelFile::new(
        cf.lexicon,
        cf.preprocessing,
        params,
        Some(train_cfg),
        network,
    );
    save_model(&a.output, &model)?;
    if let Some(t) = &a.trace {
        write_file(t, |w| trace.write_csv(w, a.timing))?;
    }
    if let Some(last) = trace.records.last() {
        println!("iterations\t{}", trace.len());
        println!("ll_per_token\t{}", last.ll_per_token);
        if let Some(d) = last.val_dda {
            println!("val_dda\t{d:.4}");
        }
    }
    Ok(())
}

/// Trees for `--init trees`: the file must hold the training sentences, in
/// order, with heads.
fn read_init_trees(
    path: &Path,
    cf: &CorpusFile,
    punct: &HashSet<String>,
) -> CliResult<Vec<ParseTree>> {
    let raw = strip_and_filter(&read_conll(path)?, punct, cf.preprocessing.max_len);
    if raw.len() != cf.raw.len() {
        return Err(CliError::Data(Error::InvalidArgument(format!(
            "{} has {} sentences after preprocessing, the corpus has {}",
            path.display(),
            raw.len(),
            cf.raw.len()
        ))));
    }
    raw.iter()
        .zip(&cf.raw)
        .enumerate()
        .map(|(i, (t, s))| {
            if t.forms != s.forms || t.pos != s.pos {
                return Err(CliError::Data(Error::InvalidTree {
                    sentence: i,
                    reason: "words or tags differ from the training corpus".into(),
                }));
            }
            let heads = t.gold_heads.as_ref().ok_or_else(|| Error::InvalidTree {
                sentence: i,
                reason: "no heads".into(),
            })?;
            ParseTree::from_conll_heads(heads).map_err(|e| {
                CliError::Data(Error::InvalidTree {
                    sentence: i,
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

fn cmd_parse(a: ParseArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let punct = model.punct_set();
    let blocks = read_conll_blocks(&a.input)?;
    let heads: Vec<Vec<usize>> = blocks
        .par_iter()
        .map(|b| {
            let forms: Vec<&str> = b.rows.iter().map(|r| r[FORM_COL].as_str()).collect();
            let tags: Vec<&str> = b.rows.iter().map(|r| r[POS_COL].as_str()).collect();
            model.parse_tokens(&forms, &tags, &punct)
        })
        .collect::<crate::Result<_>>()?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let io_err = |e: io::Error| Error::io(a.output.as_deref().unwrap_or(Path::new("<stdout>")), e);
    for (b, h) in blocks.iter().zip(&heads) {
        for (row, head) in b.rows.iter().zip(h) {
            let mut row = row.clone();
            row[HEAD_COL] = head.to_string();
            writeln!(out, "{}", row.join("\t")).map_err(io_err)?;
        }
        writeln!(out).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let report = match (&a.model, &a.pred) {
        (Some(m), None) => {
            let model = load_model(m)?;
            let punct = match a.strip.punct_tags {
                Some(_) => a.strip.tags(),
                None => model.punct_set(),
            };
            let corpus = load_eval_corpus(&a.gold, &model.lexicon, &punct, a.max_len)?;
            evaluate(&model.params, &corpus)?
        }
        (None, Some(p)) => {
            let punct = a.strip.tags();
            let heads_of = |path: &Path| -> CliResult<Vec<Vec<usize>>> {
                let blocks = read_conll_blocks(path)?;
                let raw = blocks_to_raw(&blocks, path)?;
                raw.iter()
                    .filter_map(|s| strip_punct(s, &punct))
                    .enumerate()
                    .map(|(i, s)| {
                        s.gold_heads.ok_or_else(|| {
                            CliError::Data(Error::InvalidTree {
                                sentence: i,
                                reason: format!("{} has no heads", path.display()),
                            })
                        })
                    })
                    .collect()
            };
            let gold = heads_of(&a.gold)?;
            let pred = heads_of(p)?;
            let keep: Vec<bool> = gold
                .iter()
                .map(|g| a.max_len.is_none_or(|m| g.len() <= m))
                .collect();
            let filt = |v: Vec<Vec<usize>>| -> Vec<Vec<usize>> {
                v.into_iter()
                    .zip(&keep)
                    .filter(|(_, k)| **k)
                    .map(|(h, _)| h)
                    .collect()
            };
            if gold.len() != pred.len() {
                return Err(CliError::Data(Error::InvalidArgument(format!(
                    "{} gold sentences but {} predicted",
                    gold.len(),
                    pred.len()
                ))));
            }
            score_heads(&filt(pred), &filt(gold))?
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs exactly one of --model and --pred".into(),
            ))
        }
    };
    print!("{}", report.to_text());
    if let Some(p) = &a.csv {
        write_file(p, |w| report.write_csv(w))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
struct SweepRow {
    cutoff: usize,
    vocab_size: Option<usize>,
    corpus_size: usize,
    seed: String,
    dda_val: Option<f64>,
    dda_test: Option<f64>,
    seconds: f64,
    status: String,
}

struct SweepData {
    train: Vec<RawSentence>,
    val: Vec<RawSentence>,
    test: Vec<RawSentence>,
}

fn run_cell(a: &SweepArgs, data: &SweepData, cutoff: usize, size: usize, seed: u64) -> SweepRow {
    let start = Instant::now();
    let mut row = SweepRow {
        cutoff,
        vocab_size: None,
        corpus_size: size.min(data.train.len()),
        seed: seed.to_string(),
        dda_val: None,
        dda_test: None,
        seconds: 0.0,
        status: "ok".into(),
    };
    let result = (|| -> CliResult<()> {
        let raw = &data.train[..row.corpus_size];
        let lexicon = build_lexicon(raw, cutoff)?;
        row.vocab_size = Some(lexicon.len());
        let corpus = encode(raw, &lexicon)?;
        let val = encode(&data.val, &lexicon)?;
        let test = encode(&data.test, &lexicon)?;
        let mut g = a.grammar.clone();
        g.seed = seed;
        let params0 = g.initial_params(&corpus, lexicon.len(), None)?;
        let (params, _, _) = g.train(&corpus, &lexicon, params0, &mut Monitor::default())?;
        if !val.is_empty() {
            row.dda_val = Some(evaluate(&params, &val)?.dda_all);
        }
        if !test.is_empty() {
            row.dda_test = Some(evaluate(&params, &test)?.dda_all);
        }
        Ok(())
    })();
    if let Err(e) = result {
        row.status = match e {
            CliError::Data(e) => format!("error: {e}"),
            CliError::Usage(m) | CliError::Verify(m) => format!("error: {m}"),
        };
    }
    row.seconds = start.elapsed().as_secs_f64();
    row
}

/// Mean of the successful rows of one (cutoff, size) group.
fn average_rows(group: &[SweepRow]) -> SweepRow {
    let ok: Vec<&SweepRow> = group.iter().filter(|r| r.status == "ok").collect();
    let mean = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = ok.iter().map(|r| f(r)).collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    SweepRow {
        cutoff: group[0].cutoff,
        vocab_size: group.iter().find_map(|r| r.vocab_size),
        corpus_size: group[0].corpus_size,
        seed: "avg".into(),
        dda_val: mean(&|r| r.dda_val),
        dda_test: mean(&|r| r.dda_test),
        seconds: group.iter().map(|r| r.seconds).sum::<f64>() / group.len() as f64,
        status: if ok.len() == group.len() {
            "ok".into()
        } else {
            format!("partial {}/{}", ok.len(), group.len())
        },
    }
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    a.grammar.validate()?;
    if a.grammar.init == InitArg::Trees {
        return Err(CliError::Usage(
            "sweep supports --init km, uniform or random".into(),
        ));
    }
    let cutoffs = a.cutoffs.clone().unwrap_or_else(|| match a.language {
        Language::English => ENGLISH_CUTOFFS.to_vec(),
        Language::Chinese => CHINESE_CUTOFFS.to_vec(),
    });
    if cutoffs.is_empty() || cutoffs.contains(&0) || a.seeds.is_empty() || a.jobs == 0 {
        return Err(CliError::Usage(
            "cutoffs must be positive; seeds and jobs non-empty".into(),
        ));
    }
    let punct = a.strip.tags();
    let mut train = strip_and_filter(&read_conll(&a.train)?, &punct, a.max_len);
    if train.is_empty() {
        return Err(CliError::Data(Error::EmptyCorpus));
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(a.shuffle_seed));
    let eval_len = a.eval_max_len.unwrap_or(usize::MAX);
    let data = SweepData {
        val: strip_and_filter(&read_conll(&a.val)?, &punct, eval_len),
        test: strip_and_filter(&read_conll(&a.test)?, &punct, eval_len),
        train,
    };
    let sizes = a.sizes.clone().unwrap_or_else(|| vec![data.train.len()]);
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CliError::Usage("corpus sizes must be positive".into()));
    }
    for &s in &sizes {
        if s > data.train.len() {
            warn!(
                "corpus size {s} exceeds the {} training sentences; using all",
                data.train.len()
            );
        }
    }
    let mut cells: Vec<(usize, usize, u64)> = Vec::new();
    for &c in &cutoffs {
        for &s in &sizes {
            cells.extend(a.seeds.iter().map(|&seed| (c, s, seed)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(c, s, seed)| run_cell(&a, &data, c, s, seed))
            .collect()
    });
    let mode = TrainMode::from(a.grammar.mode).to_string();
    let init = a.grammar.init.to_string();
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    write_file(&a.output, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(e.to_string());
        csv.write_record([
            "cutoff",
            "vocab_size",
            "corpus_size",
            "seed",
            "init",
            "mode",
            "dda_val",
            "dda_test",
            "seconds",
            "status",
        ])
        .map_err(err)?;
        for group in rows.chunks(a.seeds.len()) {
            let avg = average_rows(group);
            for r in group.iter().chain(std::iter::once(&avg)) {
                csv.write_record([
                    r.cutoff.to_string(),
                    r.vocab_size.map(|v| v.to_string()).unwrap_or_default(),
                    r.corpus_size.to_string(),
                    r.seed.clone(),
                    init.clone(),
                    mode.clone(),
                    fmt(r.dda_val),
                    fmt(r.dda_test),
                    if a.timing {
                        format!("{:.3}", r.seconds)
                    } else {
                        String::new()
                    },
                    r.status.clone(),
                ])
                .map_err(err)?;
            }
        }
        csv.flush().map_err(|e| Error::Format(e.to_string()))
    })?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("cells\t{}", rows.len());
    println!("failed\t{failed}");
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let report = run_verify(&VerifyOptions {
        cases: a.cases,
        grad_samples: a.grad_samples,
        seed: a.seed,
        fault: if a.inject_fault {
            GradFault::FlipSign
        } else {
            GradFault::None
        },
        ..Default::default()
    });
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Verify(
            if report.oracle_ok() {
                "gradient check"
            } else {
                "oracle equivalence"
            }
            .into(),
        ))
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    if a.max_len == 0 {
        return Err(CliError::Usage("--max-len must be >= 1".into()));
    }
    write_benchmark(&a.output, [a.train, a.val, a.test], a.max_len, a.seed)?;
    println!(
        "wrote {} / {} / {} sentences to {}",
        a.train,
        a.val,
        a.test,
        a.output.display()
    );
    Ok(())
}
