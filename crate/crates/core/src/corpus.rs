//! Word-aligned parallel text, phrase-pair extraction, and the negative
//! example pools used by curriculum training.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

pub type Phrase = Vec<String>;

const FIELD_SEP: &str = "|||";

/// Inclusive token range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start after end");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSentencePair {
    src: Vec<String>,
    tgt: Vec<String>,
    /// Sorted, deduplicated `(src_index, tgt_index)` links.
    alignment: Vec<(usize, usize)>,
}

impl AlignedSentencePair {
    pub fn new(src: Vec<String>, tgt: Vec<String>, mut alignment: Vec<(usize, usize)>) -> Result<Self> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Validation { line: 0, message: "empty sentence".into() });
        }
        for &(s, t) in &alignment {
            if s >= src.len() {
                return Err(Error::Validation {
                    line: 0,
                    message: format!("source index {s} out of range for {} tokens", src.len()),
                });
            }
            if t >= tgt.len() {
                return Err(Error::Validation {
                    line: 0,
                    message: format!("target index {t} out of range for {} tokens", tgt.len()),
                });
            }
        }
        alignment.sort_unstable();
        alignment.dedup();
        Ok(Self { src, tgt, alignment })
    }

    pub fn src(&self) -> &[String] {
        &self.src
    }

    pub fn tgt(&self) -> &[String] {
        &self.tgt
    }

    pub fn alignment(&self) -> &[(usize, usize)] {
        &self.alignment
    }
}

/// Parses one `src ||| tgt ||| i-j i-j ...` line. `line_no` is used in errors.
pub fn parse_pair_line(line: &str, line_no: usize) -> Result<AlignedSentencePair> {
    let fields: Vec<&str> = line.split(FIELD_SEP).collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 3 fields separated by `|||`, found {}", fields.len()),
        });
    }
    let src = tokenize(fields[0]);
    let tgt = tokenize(fields[1]);
    let mut alignment = Vec::new();
    for link in fields[2].split_whitespace() {
        let parsed = link
            .split_once('-')
            .and_then(|(s, t)| Some((s.parse::<usize>().ok()?, t.parse::<usize>().ok()?)));
        match parsed {
            Some(p) => alignment.push(p),
            None => {
                return Err(Error::Parse { line: line_no, message: format!("malformed alignment link `{link}`") })
            }
        }
    }
    AlignedSentencePair::new(src, tgt, alignment).map_err(|e| match e {
        Error::Validation { message, .. } => Error::Validation { line: line_no, message },
        other => other,
    })
}

/// Reads a corpus, one aligned pair per non-blank line (line numbers are 1-based).
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<AlignedSentencePair>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_pair_line(&line, idx + 1)?);
    }
    Ok(out)
}

pub fn tokenize(s: &str) -> Phrase {
    s.split_whitespace().map(str::to_owned).collect()
}

/// A source phrase inside its sentence together with its aligned translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualExample {
    pub sentence: Arc<AlignedSentencePair>,
    pub src_span: Span,
    pub positive_tgt: Phrase,
}

impl ContextualExample {
    pub fn source_phrase(&self) -> &[String] {
        &self.sentence.src()[self.src_span.start..=self.src_span.end]
    }
}

/// Enumerates every alignment-consistent `(source span, target span)` pair with
/// both sides at most `max_len` tokens.
///
/// Both spans must start and end on aligned words; unaligned boundary words
/// are never added.
pub fn consistent_span_pairs(pair: &AlignedSentencePair, max_len: usize) -> Vec<(Span, Span)> {
    let n = pair.src.len();
    let mut src_links: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut tgt_links: Vec<Vec<usize>> = vec![Vec::new(); pair.tgt.len()];
    for &(s, t) in &pair.alignment {
        src_links[s].push(t);
        tgt_links[t].push(s);
    }

    let mut out = Vec::new();
    for start in 0..n {
        if src_links[start].is_empty() {
            continue;
        }
        let (mut tmin, mut tmax) = (usize::MAX, 0);
        for end in start..n.min(start + max_len) {
            for &t in &src_links[end] {
                tmin = tmin.min(t);
                tmax = tmax.max(t);
            }
            if src_links[end].is_empty() {
                continue;
            }
            if tmax - tmin + 1 > max_len {
                continue;
            }
            let closed = (tmin..=tmax).all(|t| tgt_links[t].iter().all(|&s| start <= s && s <= end));
            if closed {
                out.push((Span::new(start, end), Span::new(tmin, tmax)));
            }
        }
    }
    out
}

pub fn extract_phrase_pairs(pair: &Arc<AlignedSentencePair>, max_len: usize) -> Vec<ContextualExample> {
    consistent_span_pairs(pair, max_len)
        .into_iter()
        .map(|(s, t)| ContextualExample {
            sentence: Arc::clone(pair),
            src_span: s,
            positive_tgt: pair.tgt[t.start..=t.end].to_vec(),
        })
        .collect()
}

pub fn extract_corpus(corpus: &[Arc<AlignedSentencePair>], max_len: usize) -> Vec<ContextualExample> {
    corpus.iter().flat_map(|p| extract_phrase_pairs(p, max_len)).collect()
}

/// Source phrase → target phrase → count, plus the distinct target inventory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhraseTable {
    entries: BTreeMap<Phrase, BTreeMap<Phrase, u64>>,
    targets: Vec<Phrase>,
}

impl PhraseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_examples<'a, I: IntoIterator<Item = &'a ContextualExample>>(examples: I) -> Self {
        let mut table = Self::new();
        for ex in examples {
            table.insert(ex.source_phrase().to_vec(), ex.positive_tgt.clone(), 1);
        }
        table
    }

    pub fn insert(&mut self, src: Phrase, tgt: Phrase, count: u64) {
        debug_assert!(count >= 1);
        if let Err(pos) = self.targets.binary_search(&tgt) {
            self.targets.insert(pos, tgt.clone());
        }
        *self.entries.entry(src).or_default().entry(tgt).or_insert(0) += count;
    }

    pub fn candidates(&self, src: &[String]) -> Option<&BTreeMap<Phrase, u64>> {
        self.entries.get(src)
    }

    /// Sorted distinct target phrases.
    pub fn targets(&self) -> &[Phrase] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Phrase, &Phrase, u64)> {
        self.entries.iter().flat_map(|(s, m)| m.iter().map(move |(t, &c)| (s, t, c)))
    }

    /// Reads `src ||| tgt ||| count` lines.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut table = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(FIELD_SEP).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 fields separated by `|||`, found {}", fields.len()),
                });
            }
            let count: u64 = fields[2].trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad count `{}`", fields[2].trim()),
            })?;
            let (src, tgt) = (tokenize(fields[0]), tokenize(fields[1]));
            if count == 0 || src.is_empty() || tgt.is_empty() {
                return Err(Error::Validation {
                    line: line_no,
                    message: "phrase table entries need non-empty phrases and count >= 1".into(),
                });
            }
            table.insert(src, tgt, count);
        }
        Ok(table)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, t, c) in self.iter() {
            writeln!(w, "{} ||| {} ||| {}", s.join(" "), t.join(" "), c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Medium,
    Difficult,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Difficult => "difficult",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub example: ContextualExample,
    pub negative_tgt: Phrase,
    pub difficulty: Difficulty,
}

/// Uniform draw over the table's distinct target phrases other than the positive.
pub fn gen_easy_negative<R: Rng + ?Sized>(ex: &ContextualExample, table: &PhraseTable, rng: &mut R) -> Result<Phrase> {
    let targets = table.targets();
    let usable = targets.len() - usize::from(targets.binary_search(&ex.positive_tgt).is_ok());
    if usable == 0 {
        return Err(Error::NoCandidate("phrase table holds no target other than the positive".into()));
    }
    loop {
        let cand = &targets[rng.gen_range(0..targets.len())];
        if *cand != ex.positive_tgt {
            return Ok(cand.clone());
        }
    }
}

/// Translation of another source phrase from the same sentence whose span
/// does not overlap the example's span.
pub fn gen_medium_negative<R: Rng + ?Sized>(ex: &ContextualExample, max_len: usize, rng: &mut R) -> Result<Phrase> {
    let pool: Vec<Phrase> = extract_phrase_pairs(&ex.sentence, max_len)
        .into_iter()
        .filter(|c| !c.src_span.overlaps(&ex.src_span) && c.positive_tgt != ex.positive_tgt)
        .map(|c| c.positive_tgt)
        .collect();
    if pool.is_empty() {
        return Err(Error::NoCandidate(format!(
            "no non-overlapping phrase in sentence for span [{}]",
            ex.src_span
        )));
    }
    Ok(pool[rng.gen_range(0..pool.len())].clone())
}

/// Rival candidate listed in the table for the same source phrase.
pub fn gen_difficult_negative<R: Rng + ?Sized>(ex: &ContextualExample, table: &PhraseTable, rng: &mut R) -> Result<Phrase> {
    let src = ex.source_phrase();
    let rivals: Vec<&Phrase> = table
        .candidates(src)
        .map(|m| m.keys().filter(|t| **t != ex.positive_tgt).collect())
        .unwrap_or_default();
    if rivals.is_empty() {
        return Err(Error::NoCandidate(format!("source phrase `{}` has no rival candidate", src.join(" "))));
    }
    Ok(rivals[rng.gen_range(0..rivals.len())].clone())
}

/// Pool-selection probabilities of the MIX sampler.
pub fn mix_weights(pools: usize, step: usize) -> Result<Vec<f64>> {
    match pools {
        1 => Ok(vec![1.0]),
        2 => Ok(vec![0.5, 0.5]),
        3 => {
            let denom = (step + 2) as f64;
            Ok(vec![1.0 / denom, 1.0 / denom, step as f64 / denom])
        }
        n => Err(Error::Config(format!("MIX takes 1 to 3 pools, got {n}"))),
    }
}

/// Chooses a pool index according to [`mix_weights`].
pub fn mix_select<R: Rng + ?Sized>(pools: usize, step: usize, rng: &mut R) -> Result<usize> {
    let weights = mix_weights(pools, step)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(0))
}

/// Draws one triple: a pool by MIX weights, then uniformly within that pool.
pub fn mix_sample<'a, R: Rng + ?Sized>(
    pools: &[&'a [TrainingTriple]],
    step: usize,
    rng: &mut R,
) -> Result<&'a TrainingTriple> {
    let which = mix_select(pools.len(), step, rng)?;
    let pool = pools[which];
    if pool.is_empty() {
        return Err(Error::PoolExhausted(which));
    }
    Ok(&pool[rng.gen_range(0..pool.len())])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub examples: usize,
    pub easy_dropped: usize,
    pub medium_dropped: usize,
    pub difficult_dropped: usize,
}

/// Easy, medium and difficult triples for a set of examples.
#[derive(Debug, Clone, Default)]
pub struct CurriculumPools {
    pub easy: Vec<TrainingTriple>,
    pub medium: Vec<TrainingTriple>,
    pub difficult: Vec<TrainingTriple>,
    pub stats: PoolStats,
}

/// Generates `per_example` negatives of each difficulty for every example.
///
/// Examples that cannot produce a negative of some difficulty are left out of
/// that pool only and counted in [`PoolStats`].
pub fn build_pools<R: Rng + ?Sized>(
    examples: &[ContextualExample],
    table: &PhraseTable,
    max_len: usize,
    per_example: usize,
    rng: &mut R,
) -> CurriculumPools {
    let mut pools = CurriculumPools { stats: PoolStats { examples: examples.len(), ..Default::default() }, ..Default::default() };
    for ex in examples {
        for difficulty in [Difficulty::Easy, Difficulty::Medium, Difficulty::Difficult] {
            let (pool, dropped) = match difficulty {
                Difficulty::Easy => (&mut pools.easy, &mut pools.stats.easy_dropped),
                Difficulty::Medium => (&mut pools.medium, &mut pools.stats.medium_dropped),
                Difficulty::Difficult => (&mut pools.difficult, &mut pools.stats.difficult_dropped),
            };
            for _ in 0..per_example {
                let neg = match difficulty {
                    Difficulty::Easy => gen_easy_negative(ex, table, rng),
                    Difficulty::Medium => gen_medium_negative(ex, max_len, rng),
                    Difficulty::Difficult => gen_difficult_negative(ex, table, rng),
                };
                match neg {
                    Ok(negative_tgt) => pool.push(TrainingTriple { example: ex.clone(), negative_tgt, difficulty }),
                    Err(_) => {
                        *dropped += 1;
                        break;
                    }
                }
            }
        }
    }
    pools
}
