//! Vocabularies, word embedding tables and tagged encoder inputs.

mod pretrain;

pub use pretrain::{
    context_window, pretrain_bilingual, word_pair_score, PretrainConfig, PretrainTriple, Pretrainer, WindowPair,
    WordPairGrad, WordPairScorer,
};

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::corpus::Span;
use crate::error::{Error, Result};
use crate::linalg::{Columns, Matrix};
use crate::Scalar;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Dense token ↔ index map. Indices 0, 1, 2 are always UNK, BOS, EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub const UNK_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const RESERVED: usize = 3;

    pub fn new() -> Self {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        for w in [UNK, BOS, EOS] {
            v.add(w);
        }
        v
    }

    /// Vocabulary of the tokens in first-appearance order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.add(t.as_ref());
        }
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Index of `word`, or the UNK index for unknown words.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(Self::UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub(crate) fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < Self::RESERVED || words[..Self::RESERVED] != [UNK, BOS, EOS] {
            return Err(Error::Validation {
                line: 2,
                message: format!("embedding file must start with {UNK}, {BOS}, {EOS}"),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Validation { line: i + 2, message: format!("duplicate word `{w}`") });
            }
        }
        Ok(Self { words, index })
    }
}

/// `V × d` matrix of word vectors; row `i` belongs to vocabulary index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    vectors: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn zeros(words: usize, dim: usize) -> Self {
        Self { vectors: Matrix::zeros(words, dim) }
    }

    pub fn random<R: Rng + ?Sized>(words: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        Self { vectors: Matrix::random(words, dim, scale, rng) }
    }

    pub fn from_matrix(vectors: Matrix<T>) -> Self {
        Self { vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn row(&self, id: usize) -> &[T] {
        self.vectors.row(id)
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [T] {
        self.vectors.row_mut(id)
    }

    pub fn as_slice(&self) -> &[T] {
        self.vectors.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.vectors.as_mut_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.is_finite()
    }
}

/// Writes `V d` followed by one `word v1 … vd` line per row.
pub fn write_embeddings<T: Scalar, W: Write>(vocab: &Vocabulary, table: &EmbeddingTable<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{} {}", table.len(), table.dim())?;
    for (id, word) in vocab.words().iter().enumerate() {
        write!(w, "{word}")?;
        for v in table.row(id) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_embeddings<T: Scalar, R: BufRead>(reader: R) -> Result<(Vocabulary, EmbeddingTable<T>)> {
    let mut lines = reader.lines().enumerate();
    let read_err = |line: usize, e: std::io::Error| Error::Parse { line, message: e.to_string() };
    let (words_count, dim) = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| read_err(1, e))?;
            let nums: Vec<usize> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if nums.len() != 2 || line.split_whitespace().count() != 2 {
                return Err(Error::Parse { line: 1, message: "expected header `V d`".into() });
            }
            (nums[0], nums[1])
        }
        None => return Err(Error::Parse { line: 1, message: "empty embedding file".into() }),
    };
    let mut words = Vec::with_capacity(words_count);
    let mut data = Vec::with_capacity(words_count * dim);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| read_err(line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().unwrap_or_default().to_owned();
        let values: Vec<T> = fields
            .map(|f| f.parse::<T>().map_err(|_| Error::Parse { line: line_no, message: format!("bad number `{f}`") }))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation { line: line_no, message: "non-finite embedding value".into() });
        }
        words.push(word);
        data.extend(values);
    }
    if words.len() != words_count {
        return Err(Error::Validation {
            line: 1,
            message: format!("header declares {words_count} words, file has {}", words.len()),
        });
    }
    let vocab = Vocabulary::from_words(words)?;
    Ok((vocab, EmbeddingTable::from_matrix(Matrix::from_vec(words_count, dim, data))))
}

/// Vocabularies and tables for both languages.
#[derive(Debug, Clone, PartialEq)]
pub struct BilingualEmbeddings<T> {
    pub source_vocab: Vocabulary,
    pub source: EmbeddingTable<T>,
    pub target_vocab: Vocabulary,
    pub target: EmbeddingTable<T>,
}

impl<T: Scalar> BilingualEmbeddings<T> {
    pub fn random<R: Rng + ?Sized>(
        source_vocab: Vocabulary,
        target_vocab: Vocabulary,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let source = EmbeddingTable::random(source_vocab.len(), dim, scale, rng);
        let target = EmbeddingTable::random(target_vocab.len(), dim, scale, rng);
        Self { source_vocab, source, target_vocab, target }
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }
}

/// Encoder input: embedding columns plus one 0/1 tag row marking the phrase,
/// zero-padded to a fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSentenceMatrix<T> {
    pub columns: Columns<T>,
    /// Vocabulary index of each non-padding column.
    pub ids: Vec<usize>,
}

impl<T: Scalar> TaggedSentenceMatrix<T> {
    pub fn actual_length(&self) -> usize {
        self.ids.len()
    }

    pub fn tag_row(&self) -> usize {
        self.columns.dim() - 1
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Builds the tagged, padded input matrix for `tokens`.
///
/// Columns hold the word vector (UNK for unknown words) with the tag bit
/// appended: 1 inside `span`, 0 elsewhere (all 0 when `span` is `None`).
/// Columns from `tokens.len()` up to `width` are exactly zero.
pub fn lookup_tagged<T: Scalar, S: AsRef<str>>(
    vocab: &Vocabulary,
    table: &EmbeddingTable<T>,
    tokens: &[S],
    span: Option<Span>,
    width: usize,
) -> Result<TaggedSentenceMatrix<T>> {
    if tokens.len() > width {
        return Err(Error::Length { len: tokens.len(), max: width });
    }
    if let Some(s) = span {
        if s.end >= tokens.len() {
            return Err(Error::IndexOutOfRange { index: s.end, len: tokens.len() });
        }
    }
    let d = table.dim();
    let ids = vocab.ids(tokens);
    let mut columns = Columns::zeros(d + 1, width);
    for (t, &id) in ids.iter().enumerate() {
        let col = columns.column_mut(t);
        col[..d].copy_from_slice(table.row(id));
        if span.is_some_and(|s| s.contains(t)) {
            col[d] = T::one();
        }
    }
    Ok(TaggedSentenceMatrix { columns, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocabulary, EmbeddingTable<f64>) {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = EmbeddingTable::random(vocab.len(), 4, 0.05, &mut rng);
        (vocab, table)
    }

    #[test]
    fn reserved_tokens_come_first() {
        let v = Vocabulary::from_tokens(["x", "y", "x"]);
        assert_eq!(v.words(), [UNK, BOS, EOS, "x", "y"]);
        assert_eq!(v.id("nope"), Vocabulary::UNK_ID);
    }

    #[test]
    fn tag_row_marks_span() {
        let (vocab, table) = setup();
        let m = lookup_tagged(&vocab, &table, &["a", "b", "c"], Some(Span::new(1, 1)), 6).unwrap();
        let tags: Vec<f64> = (0..6).map(|c| m.columns.get(m.tag_row(), c)).collect();
        assert_eq!(tags, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.columns.column(0)[..4], *table.row(vocab.id("a")));
        for c in 3..6 {
            assert!(m.columns.column(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_input_is_all_zero() {
        let (vocab, table) = setup();
        let none: [&str; 0] = [];
        let m = lookup_tagged(&vocab, &table, &none, None, 5).unwrap();
        assert!(m.columns.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_words_share_unk_row() {
        let (vocab, table) = setup();
        let m = lookup_tagged(&vocab, &table, &["zz", "qq"], None, 2).unwrap();
        assert_eq!(m.columns.column(0), m.columns.column(1));
        assert_eq!(m.columns.column(0)[..4], *table.row(Vocabulary::UNK_ID));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let (vocab, table) = setup();
        assert_eq!(
            lookup_tagged(&vocab, &table, &["a", "b", "c"], None, 2).unwrap_err(),
            Error::Length { len: 3, max: 2 }
        );
    }

    #[test]
    fn embedding_file_round_trips_exactly() {
        let (vocab, table) = setup();
        let mut buf = Vec::new();
        write_embeddings(&vocab, &table, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("6 4\n<unk> "));
        let (v2, t2) = read_embeddings::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(v2, vocab);
        assert!(t2.as_slice().iter().zip(table.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn embedding_file_errors_carry_lines() {
        let err = read_embeddings::<f64, _>("4 2\n<unk> 0 0\n<s> 0 0\n</s> 0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err:?}");
        let err = read_embeddings::<f64, _>("1 1\nword 0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }
}
