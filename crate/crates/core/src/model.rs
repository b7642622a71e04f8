//! The full matcher: two encoders, the matching head and the word
//! embeddings, with triple loss/gradient evaluation and a text file format.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::convnet::{encode, encoder_backward, ConvLayer, EncoderStack, Side};
use crate::corpus::{Span, TrainingTriple};
use crate::embeddings::{lookup_tagged, BilingualEmbeddings, EmbeddingTable, TaggedSentenceMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Columns, Matrix};
use crate::matcher::{hinge_active, hinge_loss, MatcherParams};
use crate::trainer::GradientSet;
use crate::Scalar;

const FORMAT_TAG: &str = "cdcm-model";
const FORMAT_VERSION: u32 = 1;

/// Architecture and input lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub feature_maps: usize,
    pub source_layers: usize,
    pub target_layers: usize,
    pub combine_dim: usize,
    pub hidden_dim: usize,
    /// Longest accepted source sentence.
    pub source_len: usize,
    /// Longest accepted target phrase.
    pub target_len: usize,
    /// Weights start uniform on `±init_gain·√(6 / fan_in)`; biases start at zero.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 50,
            window: 3,
            feature_maps: 100,
            source_layers: 4,
            target_layers: 3,
            combine_dim: 100,
            hidden_dim: 100,
            source_len: 40,
            target_len: 7,
            init_gain: 1.0,
        }
    }
}

/// Trainable network parameters (everything except the word embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingModel<T> {
    pub source: EncoderStack<T>,
    pub target: EncoderStack<T>,
    pub matcher: MatcherParams<T>,
}

impl<T: Scalar> MatchingModel<T> {
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let input = config.embed_dim + 1;
        let dims = |layers: usize| {
            let mut d = vec![input];
            d.extend(std::iter::repeat_n(config.feature_maps, layers));
            d
        };
        let stack = |side, layers| EncoderStack {
            side,
            layers: dims(layers).windows(2).map(|w| ConvLayer::zeros(w[0], w[1], config.window)).collect(),
        };
        let source = stack(Side::Source, config.source_layers);
        let target = stack(Side::Target, config.target_layers);
        let matcher =
            MatcherParams::zeros(source.output_dim(), target.output_dim(), config.combine_dim, config.hidden_dim);
        let mut model = Self { source, target, matcher };
        let fan_ins: Vec<usize> = model
            .source
            .layers
            .iter()
            .chain(&model.target.layers)
            .flat_map(|l| [l.weight.cols(), 0])
            .chain([model.matcher.combine.cols(), 0, model.matcher.hidden.cols(), 0, model.matcher.output.len(), 0])
            .collect();
        for ((_, slice), fan_in) in model.named_slices_mut().into_iter().zip(fan_ins) {
            if fan_in == 0 {
                slice.iter_mut().for_each(|v| *v = T::zero());
            } else {
                let bound = config.init_gain * (6.0 / fan_in as f64).sqrt();
                slice.iter_mut().for_each(|v| *v = T::sample_symmetric(rng, bound));
            }
        }
        model
    }

    pub fn zeros_like(&self) -> Self {
        Self { source: self.source.zeros_like(), target: self.target.zeros_like(), matcher: self.matcher.zeros_like() }
    }

    pub fn named_slices(&self) -> Vec<(String, &[T])> {
        let mut out = self.source.named_slices();
        out.extend(self.target.named_slices());
        out.extend(self.matcher.named_slices().into_iter().map(|(n, s)| (format!("matcher.{n}"), s)));
        out
    }

    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = self.source.named_slices_mut();
        out.extend(self.target.named_slices_mut());
        out.extend(self.matcher.named_slices_mut().into_iter().map(|(n, s)| (format!("matcher.{n}"), s)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_slices().iter().map(|(_, s)| s.len()).sum()
    }
}

/// `s(encode(f), encode(ê))`
pub fn score_example<T: Scalar>(
    source: &TaggedSentenceMatrix<T>,
    target: &TaggedSentenceMatrix<T>,
    model: &MatchingModel<T>,
) -> Result<T> {
    let (x, _) = encode(&source.columns, &model.source)?;
    let (y, _) = encode(&target.columns, &model.target)?;
    model.matcher.forward(&x, &y).map(|(s, _)| s)
}

/// Network, embeddings and the input length limits they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdcm<T> {
    pub model: MatchingModel<T>,
    pub embeddings: BilingualEmbeddings<T>,
    pub source_len: usize,
    pub target_len: usize,
}

/// Loss, scores and gradient of one training triple.
#[derive(Debug, Clone)]
pub struct TripleEvaluation<T> {
    pub loss: T,
    pub positive_score: T,
    pub negative_score: T,
    pub grads: GradientSet<T>,
    /// Distance to the nearest non-differentiable point of the forward pass.
    pub kink_distance: f64,
}

impl<T: Scalar> Cdcm<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, embeddings: BilingualEmbeddings<T>, rng: &mut R) -> Result<Self> {
        if embeddings.source.dim() != config.embed_dim || embeddings.target.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} / {} does not match configured {}",
                embeddings.source.dim(),
                embeddings.target.dim(),
                config.embed_dim
            )));
        }
        if config.window == 0 || config.feature_maps == 0 || config.source_layers == 0 || config.target_layers == 0 {
            return Err(Error::Config("window, feature maps and layer counts must be positive".into()));
        }
        let model = MatchingModel::random(config, rng);
        Ok(Self { model, embeddings, source_len: config.source_len, target_len: config.target_len })
    }

    /// Encoder input width: the length limit, widened with zero padding up
    /// to the shortest input the stack accepts.
    pub fn source_width(&self) -> usize {
        self.source_len.max(self.model.source.min_input_len())
    }

    pub fn target_width(&self) -> usize {
        self.target_len.max(self.model.target.min_input_len())
    }

    /// Source sentence with the phrase `span` tagged.
    pub fn tag_source<S: AsRef<str>>(&self, tokens: &[S], span: Span) -> Result<TaggedSentenceMatrix<T>> {
        if tokens.len() > self.source_len {
            return Err(Error::Length { len: tokens.len(), max: self.source_len });
        }
        lookup_tagged(&self.embeddings.source_vocab, &self.embeddings.source, tokens, Some(span), self.source_width())
    }

    /// Target phrase with every word tagged.
    pub fn tag_target<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TaggedSentenceMatrix<T>> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty target phrase".into()));
        }
        if tokens.len() > self.target_len {
            return Err(Error::Length { len: tokens.len(), max: self.target_len });
        }
        let all = Span::new(0, tokens.len() - 1);
        lookup_tagged(&self.embeddings.target_vocab, &self.embeddings.target, tokens, Some(all), self.target_width())
    }

    pub fn score<S: AsRef<str>, U: AsRef<str>>(&self, sentence: &[S], span: Span, phrase: &[U]) -> Result<T> {
        score_example(&self.tag_source(sentence, span)?, &self.tag_target(phrase)?, &self.model)
    }

    pub fn triple_loss(&self, triple: &TrainingTriple) -> Result<T> {
        let ex = &triple.example;
        let src = self.tag_source(ex.sentence.src(), ex.src_span)?;
        let sp = score_example(&src, &self.tag_target(&ex.positive_tgt)?, &self.model)?;
        let sn = score_example(&src, &self.tag_target(&triple.negative_tgt)?, &self.model)?;
        Ok(hinge_loss(sp, sn))
    }

    pub fn evaluate_triple(&self, triple: &TrainingTriple) -> Result<TripleEvaluation<T>> {
        let ex = &triple.example;
        self.evaluate(ex.sentence.src(), ex.src_span, &ex.positive_tgt, &triple.negative_tgt)
    }

    /// Forward and backward pass of the hinge loss for one triple.
    pub fn evaluate<S: AsRef<str>>(
        &self,
        sentence: &[S],
        span: Span,
        positive: &[S],
        negative: &[S],
    ) -> Result<TripleEvaluation<T>> {
        let src = self.tag_source(sentence, span)?;
        let pos = self.tag_target(positive)?;
        let neg = self.tag_target(negative)?;

        let (x, src_tape) = encode(&src.columns, &self.model.source)?;
        let (y_pos, pos_tape) = encode(&pos.columns, &self.model.target)?;
        let (y_neg, neg_tape) = encode(&neg.columns, &self.model.target)?;
        let (sp, head_pos) = self.model.matcher.forward(&x, &y_pos)?;
        let (sn, head_neg) = self.model.matcher.forward(&x, &y_neg)?;
        let loss = hinge_loss(sp, sn);

        let margin = (T::one() + sn - sp).abs().to_f64_lossy();
        let kink_distance = [
            margin,
            src_tape.kink_distance(),
            pos_tape.kink_distance(),
            neg_tape.kink_distance(),
            head_pos.kink_distance(),
            head_neg.kink_distance(),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);

        let mut grads = GradientSet::zeros_like(&self.model);
        if hinge_active(sp, sn) {
            let gp = self.model.matcher.backward(head_pos, -T::one());
            let gn = self.model.matcher.backward(head_neg, T::one());
            for (((_, acc), (_, a)), (_, b)) in grads
                .model
                .matcher
                .named_slices_mut()
                .into_iter()
                .zip(gp.params.named_slices())
                .zip(gn.params.named_slices())
            {
                axpy(T::one(), a, acc);
                axpy(T::one(), b, acc);
            }
            let dx: Vec<T> = gp.source.iter().zip(&gn.source).map(|(&a, &b)| a + b).collect();

            let (g_src, din_src) = encoder_backward(src_tape, &self.model.source, &dx)?;
            let (g_pos, din_pos) = encoder_backward(pos_tape, &self.model.target, &gp.target)?;
            let (g_neg, din_neg) = encoder_backward(neg_tape, &self.model.target, &gn.target)?;
            grads.model.source = g_src;
            for (((_, acc), (_, a)), (_, b)) in grads
                .model
                .target
                .named_slices_mut()
                .into_iter()
                .zip(g_pos.named_slices())
                .zip(g_neg.named_slices())
            {
                axpy(T::one(), a, acc);
                axpy(T::one(), b, acc);
            }
            scatter_rows(&din_src, &src.ids, &mut grads.source_rows);
            scatter_rows(&din_pos, &pos.ids, &mut grads.target_rows);
            scatter_rows(&din_neg, &neg.ids, &mut grads.target_rows);
        }
        Ok(TripleEvaluation { loss, positive_score: sp, negative_score: sn, grads, kink_distance })
    }
}

/// Adds the embedding part of each non-padding input column to its word's row.
fn scatter_rows<T: Scalar>(input_grad: &Columns<T>, ids: &[usize], rows: &mut BTreeMap<usize, Vec<T>>) {
    let d = input_grad.dim() - 1;
    for (col, &id) in ids.iter().enumerate() {
        let g = &input_grad.column(col)[..d];
        let acc = rows.entry(id).or_insert_with(|| vec![T::zero(); d]);
        axpy(T::one(), g, acc);
    }
}

// ---------------------------------------------------------------------------
// text format

fn write_row<T: Scalar, W: Write>(w: &mut W, values: &[T]) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            write!(w, " ")?;
        }
        write!(w, "{v}")?;
        first = false;
    }
    writeln!(w)
}

fn write_matrix<T: Scalar, W: Write>(w: &mut W, m: &Matrix<T>) -> std::io::Result<()> {
    for r in 0..m.rows() {
        write_row(w, m.row(r))?;
    }
    Ok(())
}

fn write_stack<T: Scalar, W: Write>(w: &mut W, stack: &EncoderStack<T>) -> std::io::Result<()> {
    writeln!(w, "[{}_stack]", stack.side)?;
    writeln!(w, "layers {}", stack.layers.len())?;
    for layer in &stack.layers {
        writeln!(w, "conv {} {} {}", layer.feature_maps(), layer.window(), layer.input_dim())?;
        write_matrix(w, &layer.weight)?;
        write_row(w, &layer.bias)?;
    }
    Ok(())
}

fn write_table<T: Scalar, W: Write>(w: &mut W, name: &str, vocab: &Vocabulary, table: &EmbeddingTable<T>) -> std::io::Result<()> {
    writeln!(w, "[{name}]")?;
    crate::embeddings::write_embeddings(vocab, table, &mut *w)
}

/// Serializes the model as versioned text; every value is written in its
/// shortest round-trip decimal form, so [`read_model`] restores it bit for bit.
pub fn write_model<T: Scalar, W: Write>(cdcm: &Cdcm<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{FORMAT_TAG} {FORMAT_VERSION}")?;
    writeln!(w, "[config]")?;
    writeln!(w, "source_len {}", cdcm.source_len)?;
    writeln!(w, "target_len {}", cdcm.target_len)?;
    write_stack(&mut w, &cdcm.model.source)?;
    write_stack(&mut w, &cdcm.model.target)?;
    let m = &cdcm.model.matcher;
    writeln!(w, "[matcher]")?;
    writeln!(w, "combine {} {} {}", m.combine_dim(), m.source_dim(), m.target_dim())?;
    write_matrix(&mut w, &m.combine)?;
    write_row(&mut w, &m.combine_bias)?;
    writeln!(w, "hidden {} {}", m.hidden_dim(), m.combine_dim())?;
    write_matrix(&mut w, &m.hidden)?;
    write_row(&mut w, &m.hidden_bias)?;
    writeln!(w, "output {}", m.hidden_dim())?;
    write_row(&mut w, &m.output)?;
    write_row(&mut w, std::slice::from_ref(&m.output_bias))?;
    let e = &cdcm.embeddings;
    write_table(&mut w, "source_embeddings", &e.source_vocab, &e.source)?;
    write_table(&mut w, "target_embeddings", &e.target_vocab, &e.target)?;
    Ok(())
}

struct Lines {
    lines: Vec<String>,
    pos: usize,
}

impl Lines {
    fn next(&mut self) -> Result<(usize, &str)> {
        while self.pos < self.lines.len() && self.lines[self.pos].trim().is_empty() {
            self.pos += 1;
        }
        if self.pos >= self.lines.len() {
            return Err(Error::Parse { line: self.pos + 1, message: "unexpected end of model file".into() });
        }
        self.pos += 1;
        Ok((self.pos, self.lines[self.pos - 1].trim()))
    }

    fn expect(&mut self, header: &str) -> Result<()> {
        let (line, text) = self.next()?;
        if text != header {
            return Err(Error::Parse { line, message: format!("expected `{header}`, found `{text}`") });
        }
        Ok(())
    }

    /// Keyword line followed by `n` unsigned integers.
    fn keyword(&mut self, key: &str, n: usize) -> Result<Vec<usize>> {
        let (line, text) = self.next()?;
        let mut parts = text.split_whitespace();
        let bad = || Error::Parse { line, message: format!("expected `{key}` with {n} integer(s), found `{text}`") };
        if parts.next() != Some(key) {
            return Err(bad());
        }
        let nums: Vec<usize> = parts.map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if nums.len() != n {
            return Err(bad());
        }
        Ok(nums)
    }

    fn row<T: Scalar>(&mut self, len: usize) -> Result<Vec<T>> {
        let (line, text) = self.next()?;
        let values: Vec<T> = text
            .split_whitespace()
            .map(|f| f.parse::<T>().map_err(|_| Error::Parse { line, message: format!("bad number `{f}`") }))
            .collect::<Result<_>>()?;
        if values.len() != len {
            return Err(Error::Parse { line, message: format!("expected {len} values, found {}", values.len()) });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation { line, message: "non-finite parameter".into() });
        }
        Ok(values)
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row::<T>(cols)?);
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn stack<T: Scalar>(&mut self, side: Side) -> Result<EncoderStack<T>> {
        self.expect(&format!("[{side}_stack]"))?;
        let n = self.keyword("layers", 1)?[0];
        if n == 0 {
            return Err(Error::Parse { line: self.pos, message: "encoder needs at least one layer".into() });
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let dims = self.keyword("conv", 3)?;
            let (maps, window, input) = (dims[0], dims[1], dims[2]);
            if maps == 0 || window == 0 || input == 0 {
                return Err(Error::Parse { line: self.pos, message: "zero-sized conv layer".into() });
            }
            if let Some(prev) = layers.last().map(|l: &crate::convnet::ConvLayer<T>| l.feature_maps()) {
                if prev != input {
                    return Err(Error::Parse {
                        line: self.pos,
                        message: format!("layer input {input} does not follow previous output {prev}"),
                    });
                }
            }
            let weight = self.matrix(maps, window * input)?;
            let bias = self.row(maps)?;
            layers.push(crate::convnet::ConvLayer::from_parts(weight, bias, window)?);
        }
        Ok(EncoderStack { side, layers })
    }

    fn table<T: Scalar>(&mut self, name: &str) -> Result<(Vocabulary, EmbeddingTable<T>)> {
        self.expect(&format!("[{name}]"))?;
        let (line, header) = self.next()?;
        let dims: Vec<usize> = header.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        if dims.len() != 2 {
            return Err(Error::Parse { line, message: "expected embedding header `V d`".into() });
        }
        let (count, dim) = (dims[0], dims[1]);
        let mut words = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let (line, text) = self.next()?;
            let (word, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
            words.push(word.to_owned());
            let values: Vec<T> = rest
                .split_whitespace()
                .map(|f| f.parse::<T>().map_err(|_| Error::Parse { line, message: format!("bad number `{f}`") }))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::Parse { line, message: format!("expected {dim} values, found {}", values.len()) });
            }
            data.extend(values);
        }
        let vocab = Vocabulary::from_words(words)?;
        Ok((vocab, EmbeddingTable::from_matrix(Matrix::from_vec(count, dim, data))))
    }
}

pub fn read_model<T: Scalar, R: BufRead>(reader: R) -> Result<Cdcm<T>> {
    let lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect::<Result<Vec<_>>>()?;
    let mut lines = Lines { lines, pos: 0 };
    let version = lines.keyword(FORMAT_TAG, 1)?[0];
    if version != FORMAT_VERSION as usize {
        return Err(Error::Parse { line: 1, message: format!("unsupported model version {version}") });
    }
    lines.expect("[config]")?;
    let source_len = lines.keyword("source_len", 1)?[0];
    let target_len = lines.keyword("target_len", 1)?[0];
    let source = lines.stack(Side::Source)?;
    let target = lines.stack(Side::Target)?;

    lines.expect("[matcher]")?;
    let c = lines.keyword("combine", 3)?;
    let (combine_dim, source_dim, target_dim) = (c[0], c[1], c[2]);
    if source_dim != source.output_dim() || target_dim != target.output_dim() {
        return Err(Error::Parse { line: lines.pos, message: "matcher input does not match encoder outputs".into() });
    }
    let combine = lines.matrix(combine_dim, source_dim + target_dim)?;
    let combine_bias = lines.row(combine_dim)?;
    let hd = lines.keyword("hidden", 2)?;
    if hd[1] != combine_dim {
        return Err(Error::Parse { line: lines.pos, message: "hidden layer input does not match combine width".into() });
    }
    let hidden_dim = hd[0];
    let mut full = MatcherParams::zeros(source_dim, target_dim, combine_dim, hidden_dim);
    full.combine = combine;
    full.combine_bias = combine_bias;
    full.hidden = lines.matrix(hidden_dim, combine_dim)?;
    full.hidden_bias = lines.row(hidden_dim)?;
    if lines.keyword("output", 1)?[0] != hidden_dim {
        return Err(Error::Parse { line: lines.pos, message: "output layer does not match hidden width".into() });
    }
    full.output = lines.row(hidden_dim)?;
    full.output_bias = lines.row(1)?[0];

    let (source_vocab, source_table) = lines.table("source_embeddings")?;
    let (target_vocab, target_table) = lines.table("target_embeddings")?;
    if source_table.dim() + 1 != source.input_dim() || target_table.dim() + 1 != target.input_dim() {
        return Err(Error::Parse { line: lines.pos, message: "embedding dimension does not match encoder input".into() });
    }
    Ok(Cdcm {
        model: MatchingModel { source, target, matcher: full },
        embeddings: BilingualEmbeddings { source_vocab, source: source_table, target_vocab, target: target_table },
        source_len,
        target_len,
    })
}
