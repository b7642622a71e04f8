use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cdcm::corpus::{build_pools, extract_corpus, parse_corpus, tokenize, PoolStats};
use cdcm::embeddings::{pretrain_bilingual, read_embeddings, write_embeddings, PretrainConfig};
use cdcm::model::{read_model, write_model};
use cdcm::trainer::{grad_check_against, run_curriculum, GradCheckReport, TraceRecord};
use cdcm::{
    AlignedSentencePair, BilingualEmbeddings, Cdcm, ContextualExample, Difficulty, Error, GradientSet, ModelConfig,
    PhraseTable, Scalar, Span, TrainConfig, TrainingTriple, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::args::{Cli, Command, GradCheckArgs, PretrainArgs, TrainArgs};
use crate::config::ConfigFile;
use crate::error::{CliError, CliResult};

pub const SOURCE_EMBEDDINGS_FILE: &str = "source.emb";
pub const TARGET_EMBEDDINGS_FILE: &str = "target.emb";
pub const MODEL_FILE: &str = "model.txt";
pub const STAGE_FILES: [&str; 3] = ["stage1.txt", "stage2.txt", "stage3.txt"];
pub const TRACE_FILE: &str = "loss_trace.txt";

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Pretrain(PretrainOptions),
    Train(TrainOptions),
    Score(ScoreOptions),
    GradCheck(GradCheckOptions),
    Negatives(NegativesOptions),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub corpus: PathBuf,
    pub phrase_table: Option<PathBuf>,
    pub embeddings: Option<(PathBuf, PathBuf)>,
    pub out: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_phrase_len: usize,
    pub negatives_per_example: usize,
    pub embed_init_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub model: PathBuf,
    pub queries: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    pub kink_margin: f64,
    pub retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 0, h: 1e-5, tol: 1e-4, kink_margin: 1e-6, retries: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativesOptions {
    pub corpus: PathBuf,
    pub phrase_table: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub max_phrase_len: usize,
    pub negatives_per_example: usize,
}

fn existing_file(path: PathBuf) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn output_dir(path: PathBuf) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn output_file(path: PathBuf) -> CliResult<PathBuf> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        )),
        _ => Ok(path),
    }
}

impl RunConfig {
    /// Merges flags with the optional config file and checks every path.
    pub fn resolve(cli: Cli) -> CliResult<Self> {
        let file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let f = &file;
        Ok(match cli.command {
            Command::Pretrain(a) => RunConfig::Pretrain(resolve_pretrain(a, f)?),
            Command::Train(a) => RunConfig::Train(resolve_train(a, f)?),
            Command::Score(a) => RunConfig::Score(ScoreOptions {
                model: existing_file(f.require(a.model, "model")?)?,
                queries: existing_file(f.require(a.queries, "queries")?)?,
                out: f.opt(a.out, "out")?.map(output_file).transpose()?,
            }),
            Command::Gradcheck(a) => RunConfig::GradCheck(resolve_gradcheck(a, f)?),
            Command::Negatives(a) => RunConfig::Negatives(NegativesOptions {
                corpus: existing_file(f.require(a.corpus, "corpus")?)?,
                phrase_table: f.opt(a.phrase_table, "phrase_table")?.map(existing_file).transpose()?,
                out: f.opt(a.out, "out")?.map(output_file).transpose()?,
                seed: f.require(a.seed, "seed")?,
                max_phrase_len: f.get(a.max_phrase_len, "max_phrase_len", 7)?,
                negatives_per_example: f.get(a.negatives_per_example, "negatives_per_example", 1)?,
            }),
        })
    }
}

fn resolve_pretrain(a: PretrainArgs, f: &ConfigFile) -> CliResult<PretrainOptions> {
    let d = PretrainConfig::default();
    let pretrain = PretrainConfig {
        embed_dim: f.get(a.embed_dim, "embed_dim", d.embed_dim)?,
        window_dim: f.get(a.window_dim, "window_dim", d.window_dim)?,
        combine_dim: f.get(a.combine_dim, "combine_dim", d.combine_dim)?,
        hidden_dim: f.get(a.hidden_dim, "hidden_dim", d.hidden_dim)?,
        epochs: f.get(a.epochs, "epochs", d.epochs)?,
        negatives: f.get(a.negatives, "negatives", d.negatives)?,
        learning_rate: f.get(a.learning_rate, "learning_rate", d.learning_rate)?,
        init_scale: f.get(a.embed_init_scale, "embed_init_scale", d.init_scale)?,
        init_gain: f.get(a.init_gain, "init_gain", d.init_gain)?,
        seed: f.require(a.seed, "seed")?,
    };
    if pretrain.embed_dim == 0 || pretrain.window_dim == 0 || pretrain.combine_dim == 0 || pretrain.hidden_dim == 0 {
        return Err(Error::Config("pretraining dimensions must be positive".into()).into());
    }
    if !(pretrain.learning_rate > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", pretrain.learning_rate)).into());
    }
    Ok(PretrainOptions {
        corpus: existing_file(f.require(a.corpus, "corpus")?)?,
        out: output_dir(f.require(a.out, "out")?)?,
        pretrain,
    })
}

fn resolve_train(a: TrainArgs, f: &ConfigFile) -> CliResult<TrainOptions> {
    let md = ModelConfig::default();
    let td = TrainConfig::default();
    let seed = f.require(a.seed, "seed")?;
    let model = ModelConfig {
        embed_dim: f.get(a.embed_dim, "embed_dim", md.embed_dim)?,
        window: f.get(a.window, "window", md.window)?,
        feature_maps: f.get(a.feature_maps, "feature_maps", md.feature_maps)?,
        source_layers: f.get(a.source_layers, "source_layers", md.source_layers)?,
        target_layers: f.get(a.target_layers, "target_layers", md.target_layers)?,
        combine_dim: f.get(a.combine_dim, "combine_dim", md.combine_dim)?,
        hidden_dim: f.get(a.hidden_dim, "hidden_dim", md.hidden_dim)?,
        source_len: f.get(a.source_len, "source_len", md.source_len)?,
        target_len: f.get(a.target_len, "target_len", md.target_len)?,
        init_gain: f.get(a.init_gain, "init_gain", md.init_gain)?,
    };
    let train = TrainConfig {
        learning_rate: f.get(a.learning_rate, "learning_rate", td.learning_rate)?,
        embed_lr_factor: f.get(a.embed_lr_factor, "embed_lr_factor", td.embed_lr_factor)?,
        steps: f.get(a.steps, "steps", td.steps)?,
        budget: f.opt(a.budget, "budget")?,
        seed,
        convergence_tol: f.get(a.convergence_tol, "convergence_tol", td.convergence_tol)?,
    };
    train.validate()?;
    let max_phrase_len = f.get(a.max_phrase_len, "max_phrase_len", model.target_len)?;
    if max_phrase_len == 0 || max_phrase_len > model.target_len {
        return Err(Error::Config(format!(
            "max phrase length {max_phrase_len} must be between 1 and the target length limit {}",
            model.target_len
        ))
        .into());
    }
    let embeddings = match (
        f.opt(a.source_embeddings, "source_embeddings")?,
        f.opt(a.target_embeddings, "target_embeddings")?,
    ) {
        (Some(s), Some(t)) => Some((existing_file(s)?, existing_file(t)?)),
        (None, None) => None,
        _ => return Err(CliError::Usage("source and target embeddings must be given together".into())),
    };
    Ok(TrainOptions {
        corpus: existing_file(f.require(a.corpus, "corpus")?)?,
        phrase_table: f.opt(a.phrase_table, "phrase_table")?.map(existing_file).transpose()?,
        embeddings,
        out: output_dir(f.require(a.out, "out")?)?,
        seed,
        model,
        train,
        max_phrase_len,
        negatives_per_example: f.get(a.negatives_per_example, "negatives_per_example", 1)?,
        embed_init_scale: f.get(a.embed_init_scale, "embed_init_scale", 0.05)?,
    })
}

fn resolve_gradcheck(a: GradCheckArgs, f: &ConfigFile) -> CliResult<GradCheckOptions> {
    let d = GradCheckOptions::default();
    let opts = GradCheckOptions {
        seed: f.get(a.seed, "seed", d.seed)?,
        h: f.get(a.h, "h", d.h)?,
        tol: f.get(a.tol, "tol", d.tol)?,
        kink_margin: f.get(a.kink_margin, "kink_margin", d.kink_margin)?,
        retries: f.get(a.retries, "retries", d.retries)?,
    };
    if !(opts.h > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::Config("finite-difference step and tolerance must be positive".into()).into());
    }
    Ok(opts)
}

// ---------------------------------------------------------------------------
// shared input handling

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_corpus(path: &Path) -> CliResult<Vec<AlignedSentencePair>> {
    parse_corpus(open(path)?).map_err(|e| CliError::in_file(path, e))
}

fn load_phrase_table(path: Option<&Path>, examples: &[ContextualExample]) -> CliResult<PhraseTable> {
    match path {
        Some(p) => PhraseTable::parse(open(p)?).map_err(|e| CliError::in_file(p, e)),
        None => Ok(PhraseTable::from_examples(examples)),
    }
}

fn write_model_file<T: Scalar>(path: &Path, cdcm: &Cdcm<T>) -> CliResult<()> {
    let mut w = create(path)?;
    write_model(cdcm, &mut w).map_err(|e| CliError::io(path, e))?;
    finish(path, w)
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub files: [PathBuf; 2],
}

pub fn cmd_pretrain(opts: &PretrainOptions, log: &mut dyn Write) -> CliResult<PretrainReport> {
    let corpus = load_corpus(&opts.corpus)?;
    if corpus.is_empty() {
        return Err(CliError::in_file(&opts.corpus, Error::NoTrainingData("corpus is empty".into())));
    }
    let trainer = pretrain_bilingual::<f64>(&corpus, opts.pretrain.clone()).map_err(|e| CliError::in_file(&opts.corpus, e))?;
    for (i, loss) in trainer.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "epoch {} mean loss {loss}", i + 1);
    }
    let emb = &trainer.embeddings;
    let files = [opts.out.join(SOURCE_EMBEDDINGS_FILE), opts.out.join(TARGET_EMBEDDINGS_FILE)];
    for (path, vocab, table) in [(&files[0], &emb.source_vocab, &emb.source), (&files[1], &emb.target_vocab, &emb.target)] {
        let mut w = create(path)?;
        write_embeddings(vocab, table, &mut w).map_err(|e| CliError::io(path, e))?;
        finish(path, w)?;
    }
    Ok(PretrainReport {
        epoch_losses: trainer.epoch_losses.clone(),
        source_vocab: emb.source_vocab.len(),
        target_vocab: emb.target_vocab.len(),
        files,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub pools: [usize; 3],
    pub stats: PoolStats,
    pub presentations: [usize; 3],
    pub trace: Vec<TraceRecord>,
}

fn pool_summary(stats: &PoolStats, sizes: [usize; 3]) -> String {
    format!(
        "examples {} | easy {} (dropped {}) | medium {} (dropped {}) | difficult {} (dropped {})",
        stats.examples, sizes[0], stats.easy_dropped, sizes[1], stats.medium_dropped, sizes[2], stats.difficult_dropped
    )
}

fn load_embeddings(paths: &(PathBuf, PathBuf)) -> CliResult<BilingualEmbeddings<f64>> {
    let (source_vocab, source) = read_embeddings(open(&paths.0)?).map_err(|e| CliError::in_file(&paths.0, e))?;
    let (target_vocab, target) = read_embeddings(open(&paths.1)?).map_err(|e| CliError::in_file(&paths.1, e))?;
    if source.dim() != target.dim() {
        return Err(Error::Config(format!(
            "source embeddings have dimension {} but target embeddings {}",
            source.dim(),
            target.dim()
        ))
        .into());
    }
    Ok(BilingualEmbeddings { source_vocab, source, target_vocab, target })
}

pub fn cmd_train(opts: &TrainOptions, log: &mut dyn Write) -> CliResult<TrainReport> {
    let corpus: Vec<Arc<AlignedSentencePair>> = load_corpus(&opts.corpus)?.into_iter().map(Arc::new).collect();
    let examples = extract_corpus(&corpus, opts.max_phrase_len);
    if examples.is_empty() {
        return Err(CliError::in_file(&opts.corpus, Error::NoTrainingData("no phrase pairs could be extracted".into())));
    }
    let table = load_phrase_table(opts.phrase_table.as_deref(), &examples)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let embeddings = match &opts.embeddings {
        Some(paths) => load_embeddings(paths)?,
        None => BilingualEmbeddings::random(
            Vocabulary::from_tokens(corpus.iter().flat_map(|p| p.src())),
            Vocabulary::from_tokens(corpus.iter().flat_map(|p| p.tgt())),
            opts.model.embed_dim,
            opts.embed_init_scale,
            &mut rng,
        ),
    };
    let cdcm = Cdcm::new(&opts.model, embeddings, &mut rng)?;

    // Examples the model cannot represent are skipped rather than failing mid-training.
    let usable: Vec<ContextualExample> =
        examples.into_iter().filter(|ex| ex.sentence.src().len() <= cdcm.source_len).collect();
    let pools = build_pools(&usable, &table, opts.max_phrase_len, opts.negatives_per_example, &mut rng);
    let sizes = [pools.easy.len(), pools.medium.len(), pools.difficult.len()];
    let _ = writeln!(log, "pools: {}", pool_summary(&pools.stats, sizes));
    let budget = opts.train.budget.unwrap_or(sizes[0]);
    if budget > 0 {
        if let Some(stage) = sizes.iter().position(|&n| n == 0) {
            let name = [Difficulty::Easy, Difficulty::Medium, Difficulty::Difficult][stage];
            return Err(Error::NoTrainingData(format!(
                "{name} pool is empty; {}",
                pool_summary(&pools.stats, sizes)
            ))
            .into());
        }
    }

    let outcome = run_curriculum(&pools, cdcm, &opts.train)?;
    for (stage, n) in ["easy", "medium", "difficult"].iter().zip(outcome.presentations) {
        let _ = writeln!(log, "{stage}: {n} presentations");
    }

    for (name, snap) in STAGE_FILES.iter().zip(&outcome.snapshots) {
        write_model_file(&opts.out.join(name), snap)?;
    }
    write_model_file(&opts.out.join(MODEL_FILE), outcome.final_model())?;
    let trace_path = opts.out.join(TRACE_FILE);
    let mut w = create(&trace_path)?;
    for record in &outcome.trace {
        writeln!(w, "{record}").map_err(|e| CliError::io(&trace_path, e))?;
    }
    finish(&trace_path, w)?;

    Ok(TrainReport { pools: sizes, stats: pools.stats, presentations: outcome.presentations, trace: outcome.trace })
}

// ---------------------------------------------------------------------------
// score

/// One `sentence ||| i j ||| target phrase` query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub sentence: Vec<String>,
    pub span: Span,
    pub phrase: Vec<String>,
}

pub fn parse_query(line: &str, line_no: usize) -> cdcm::Result<Query> {
    let fields: Vec<&str> = line.split("|||").collect();
    let parse = |message: String| Error::Parse { line: line_no, message };
    if fields.len() != 3 {
        return Err(parse(format!("expected 3 fields separated by `|||`, found {}", fields.len())));
    }
    let bounds: Vec<usize> = fields[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse(format!("span bound `{t}` is not an index"))))
        .collect::<cdcm::Result<_>>()?;
    let [start, end] = bounds[..] else {
        return Err(parse(format!("span needs two indices, found {}", bounds.len())));
    };
    if start > end {
        return Err(Error::Validation { line: line_no, message: format!("span start {start} after end {end}") });
    }
    let sentence = tokenize(fields[0]);
    if end >= sentence.len() {
        return Err(Error::Validation {
            line: line_no,
            message: format!("span [{start}, {end}] outside sentence of {} tokens", sentence.len()),
        });
    }
    Ok(Query { sentence, span: Span::new(start, end), phrase: tokenize(fields[2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scored: usize,
    /// `(line number, message)` of every query that failed.
    pub failures: Vec<(usize, String)>,
}

/// Scores every non-blank query line in parallel; output keeps input order.
pub fn score_lines<T: Scalar>(cdcm: &Cdcm<T>, lines: &[(usize, String)]) -> Vec<(usize, cdcm::Result<T>)> {
    lines
        .par_iter()
        .map(|(no, line)| {
            let result = parse_query(line, *no).and_then(|q| cdcm.score(&q.sentence, q.span, &q.phrase));
            (*no, result)
        })
        .collect()
}

pub fn cmd_score(opts: &ScoreOptions, stdout: &mut dyn Write, log: &mut dyn Write) -> CliResult<ScoreReport> {
    let cdcm: Cdcm<f64> = read_model(open(&opts.model)?).map_err(|e| CliError::in_file(&opts.model, e))?;
    let mut lines = Vec::new();
    for (idx, line) in open(&opts.queries)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&opts.queries, e))?;
        if !line.trim().is_empty() {
            lines.push((idx + 1, line));
        }
    }
    let results = score_lines(&cdcm, &lines);

    let mut text = String::new();
    let mut report = ScoreReport { scored: 0, failures: Vec::new() };
    for (no, result) in results {
        match result {
            Ok(score) => {
                text.push_str(&format!("{no}\t{score}\n"));
                report.scored += 1;
            }
            // parse and validation errors already carry the line number
            Err(e @ (cdcm::Error::Parse { .. } | cdcm::Error::Validation { .. })) => report.failures.push((no, e.to_string())),
            Err(e) => report.failures.push((no, format!("line {no}: {e}"))),
        }
    }
    match &opts.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
            finish(path, w)?;
        }
        None => stdout.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?,
    }
    for (_, msg) in &report.failures {
        let _ = writeln!(log, "{}: {msg}", opts.queries.display());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck

/// The model checked by `gradcheck`: 4-dimensional embeddings, 3 feature
/// maps, sentences up to 10 tokens and phrases up to 5, default depths.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        feature_maps: 3,
        combine_dim: 3,
        hidden_dim: 3,
        source_len: 10,
        target_len: 5,
        ..ModelConfig::default()
    }
}

const MINI_SOURCE_WORDS: usize = 6;
const MINI_TARGET_WORDS: usize = 6;
const MINI_INIT: f64 = 0.5;

/// Random miniature model; every parameter, biases included, is uniform on ±0.5.
pub fn miniature_model<R: Rng + ?Sized>(rng: &mut R) -> Cdcm<f64> {
    let words = |prefix: &str, n: usize| Vocabulary::from_tokens((0..n).map(|i| format!("{prefix}{i}")));
    let emb = BilingualEmbeddings::random(words("s", MINI_SOURCE_WORDS), words("t", MINI_TARGET_WORDS), 4, MINI_INIT, rng);
    let mut cdcm = Cdcm::new(&miniature_config(), emb, rng).expect("miniature config is valid");
    for (_, slice) in cdcm.model.named_slices_mut() {
        slice.iter_mut().for_each(|v| *v = f64::sample_symmetric(rng, MINI_INIT));
    }
    cdcm
}

/// Random sentence, span and pair of phrases over the miniature vocabulary.
pub fn miniature_triple<R: Rng + ?Sized>(cdcm: &Cdcm<f64>, rng: &mut R) -> TrainingTriple {
    let sentence: Vec<String> =
        (0..rng.gen_range(3..=cdcm.source_len)).map(|_| format!("s{}", rng.gen_range(0..MINI_SOURCE_WORDS))).collect();
    let start = rng.gen_range(0..sentence.len());
    let end = rng.gen_range(start..sentence.len().min(start + 3));
    let mut phrase = || -> Vec<String> {
        (0..rng.gen_range(1..=cdcm.target_len)).map(|_| format!("t{}", rng.gen_range(0..MINI_TARGET_WORDS))).collect()
    };
    let (positive, negative) = (phrase(), phrase());
    let pair = AlignedSentencePair::new(sentence, positive.clone(), Vec::new()).expect("no links to validate");
    TrainingTriple {
        example: ContextualExample { sentence: Arc::new(pair), src_span: Span::new(start, end), positive_tgt: positive },
        negative_tgt: negative,
        difficulty: Difficulty::Easy,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    /// Draws made until one qualified.
    pub attempts: usize,
    pub passed: bool,
}

/// Whether every weight matrix and both embedding tables receive some
/// gradient, so the check exercises each layer rather than a dead path.
pub fn full_coverage(grads: &GradientSet<f64>) -> bool {
    let weights_live = grads
        .model
        .named_slices()
        .iter()
        .filter(|(name, _)| name.ends_with("weight"))
        .all(|(_, s)| s.iter().any(|&v| v != 0.0));
    let live_rows = |rows: &std::collections::BTreeMap<usize, Vec<f64>>| rows.values().flatten().any(|&v| v != 0.0);
    weights_live && live_rows(&grads.source_rows) && live_rows(&grads.target_rows)
}

/// As [`cmd_gradcheck`], with `tamper` applied to the analytic gradient first.
///
/// Each attempt draws a fresh miniature model and triple; an attempt counts
/// once its hinge is active, no kink lies within the margin and every layer
/// carries gradient.
pub fn gradcheck_with(opts: &GradCheckOptions, tamper: &dyn Fn(&mut GradientSet<f64>)) -> CliResult<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for attempt in 1..=opts.retries.max(1) {
        let cdcm = miniature_model(&mut rng);
        let triple = miniature_triple(&cdcm, &mut rng);
        let eval = cdcm.evaluate_triple(&triple)?;
        if eval.loss <= 0.0 || eval.kink_distance < opts.kink_margin || !full_coverage(&eval.grads) {
            continue;
        }
        let mut grads = eval.grads;
        tamper(&mut grads);
        let report = grad_check_against(&cdcm, &triple, &grads, opts.h)?;
        let passed = report.passes(opts.tol);
        return Ok(GradCheckOutcome { report, attempts: attempt, passed });
    }
    Err(CliError::Inconclusive(format!(
        "no draw with an active hinge, full gradient coverage and no kink within {:e} after {} tries",
        opts.kink_margin, opts.retries
    )))
}

pub fn format_report(outcome: &GradCheckOutcome, tol: f64) -> String {
    let mut s = format!("{:<28} {:>7} {:>12} {:>7} {:>14} {:>14}\n", "group", "entries", "max_rel_err", "worst", "analytic", "numeric");
    for g in &outcome.report.groups {
        s.push_str(&format!(
            "{:<28} {:>7} {:>12.3e} {:>7} {:>14.6e} {:>14.6e}\n",
            g.name, g.entries, g.max_rel_err, g.worst_index, g.analytic, g.numeric
        ));
    }
    s.push_str(&format!(
        "loss {} after {} draw(s); max relative error {:.3e} (tolerance {tol:e}): {}\n",
        outcome.report.loss,
        outcome.attempts,
        outcome.report.max_rel_err,
        if outcome.passed { "PASS" } else { "FAIL" }
    ));
    s
}

pub fn cmd_gradcheck(opts: &GradCheckOptions, stdout: &mut dyn Write) -> CliResult<GradCheckOutcome> {
    let outcome = gradcheck_with(opts, &|_| {})?;
    stdout.write_all(format_report(&outcome, opts.tol).as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    if !outcome.passed {
        return Err(CliError::GradCheckFailed { max_rel_err: outcome.report.max_rel_err, tol: opts.tol });
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// negatives

pub fn format_triple(t: &TrainingTriple) -> String {
    format!(
        "{} ||| {} ||| {} ||| {} ||| {}",
        t.difficulty,
        t.example.sentence.src().join(" "),
        t.example.src_span,
        t.example.positive_tgt.join(" "),
        t.negative_tgt.join(" ")
    )
}

pub fn cmd_negatives(opts: &NegativesOptions, stdout: &mut dyn Write, log: &mut dyn Write) -> CliResult<PoolStats> {
    let corpus: Vec<Arc<AlignedSentencePair>> = load_corpus(&opts.corpus)?.into_iter().map(Arc::new).collect();
    let examples = extract_corpus(&corpus, opts.max_phrase_len);
    let table = load_phrase_table(opts.phrase_table.as_deref(), &examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pools = build_pools(&examples, &table, opts.max_phrase_len, opts.negatives_per_example, &mut rng);
    let mut text = String::new();
    for t in pools.easy.iter().chain(&pools.medium).chain(&pools.difficult) {
        text.push_str(&format_triple(t));
        text.push('\n');
    }
    match &opts.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
            finish(path, w)?;
        }
        None => stdout.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?,
    }
    let sizes = [pools.easy.len(), pools.medium.len(), pools.difficult.len()];
    let _ = writeln!(log, "pools: {}", pool_summary(&pools.stats, sizes));
    Ok(pools.stats)
}

/// Runs a parsed command line, writing results to `stdout` and diagnostics to `log`.
pub fn run(cli: Cli, stdout: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    match RunConfig::resolve(cli)? {
        RunConfig::Pretrain(o) => cmd_pretrain(&o, log).map(|_| ()),
        RunConfig::Train(o) => cmd_train(&o, log).map(|_| ()),
        RunConfig::Score(o) => {
            let report = cmd_score(&o, stdout, log)?;
            match report.failures.len() {
                0 => Ok(()),
                failed => Err(CliError::ScoreFailures { failed, total: failed + report.scored }),
            }
        }
        RunConfig::GradCheck(o) => cmd_gradcheck(&o, stdout).map(|_| ()),
        RunConfig::Negatives(o) => cmd_negatives(&o, stdout, log).map(|_| ()),
    }
}
