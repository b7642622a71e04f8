//! Context-dependent bilingual word embedding pretraining.
//!
//! Each aligned word pair `(f_i, e_j)` is seen through a five-word window on
//! each side. A window is embedded by concatenating its word vectors and
//! passing them through an affine map and ReLU; the two window vectors are
//! scored by a matching head of the same form as the phrase matcher, and the
//! model is trained with the ranking hinge loss against a negative in which
//! the centre word of one side is replaced by a random word.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BilingualEmbeddings, EmbeddingTable, Vocabulary};
use crate::corpus::AlignedSentencePair;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::matcher::{hinge_active, hinge_loss, MatcherParams, MatcherTape};
use crate::scalar::relu;
use crate::Scalar;

pub const WINDOW: usize = 5;
const HALF: usize = WINDOW / 2;

/// The window `tokens[i-2 ..= i+2]`, filled with `bos` / `eos` past either end.
pub fn context_window<X: Clone>(tokens: &[X], i: usize, bos: X, eos: X) -> Result<[X; WINDOW]> {
    if i >= tokens.len() {
        return Err(Error::IndexOutOfRange { index: i, len: tokens.len() });
    }
    Ok(std::array::from_fn(|w| {
        let pos = i as isize + w as isize - HALF as isize;
        if pos < 0 {
            bos.clone()
        } else if pos as usize >= tokens.len() {
            eos.clone()
        } else {
            tokens[pos as usize].clone()
        }
    }))
}

/// Source and target windows (vocabulary indices) around one aligned pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowPair {
    pub source: [usize; WINDOW],
    pub target: [usize; WINDOW],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainTriple {
    pub positive: WindowPair,
    pub negative: WindowPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordPairScorer<T> {
    /// `H × 5d`
    pub source_proj: Matrix<T>,
    pub source_bias: Vec<T>,
    pub target_proj: Matrix<T>,
    pub target_bias: Vec<T>,
    pub matcher: MatcherParams<T>,
}

pub struct WordPairTape<T> {
    source_in: Vec<T>,
    source_pre: Vec<T>,
    target_in: Vec<T>,
    target_pre: Vec<T>,
    matcher: MatcherTape<T>,
    pair: WindowPair,
}

/// Gradient of one score: scorer parameters plus one row per window slot.
#[derive(Debug, Clone)]
pub struct WordPairGrad<T> {
    pub scorer: WordPairScorer<T>,
    pub source_rows: Vec<(usize, Vec<T>)>,
    pub target_rows: Vec<(usize, Vec<T>)>,
}

fn concat_window<T: Scalar>(table: &EmbeddingTable<T>, ids: &[usize; WINDOW]) -> Vec<T> {
    ids.iter().flat_map(|&id| table.row(id).iter().copied()).collect()
}

fn affine_relu<T: Scalar>(w: &Matrix<T>, b: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
    let mut pre = w.matvec(x);
    pre.iter_mut().zip(b).for_each(|(z, &bi)| *z += bi);
    let out = pre.iter().map(|&z| relu(z)).collect();
    (pre, out)
}

fn relu_grad<T: Scalar>(g: &[T], pre: &[T]) -> Vec<T> {
    g.iter().zip(pre).map(|(&g, &z)| if z > T::zero() { g } else { T::zero() }).collect()
}

impl<T: Scalar> WordPairScorer<T> {
    pub fn zeros(embed_dim: usize, window_dim: usize, combine_dim: usize, hidden_dim: usize) -> Self {
        Self {
            source_proj: Matrix::zeros(window_dim, WINDOW * embed_dim),
            source_bias: vec![T::zero(); window_dim],
            target_proj: Matrix::zeros(window_dim, WINDOW * embed_dim),
            target_bias: vec![T::zero(); window_dim],
            matcher: MatcherParams::zeros(window_dim, window_dim, combine_dim, hidden_dim),
        }
    }

    /// Weights uniform on `±gain·√(6 / fan_in)`, biases zero.
    pub fn random<R: Rng + ?Sized>(
        embed_dim: usize,
        window_dim: usize,
        combine_dim: usize,
        hidden_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut s = Self::zeros(embed_dim, window_dim, combine_dim, hidden_dim);
        let window_in = WINDOW * embed_dim;
        let fan_ins = [window_in, 0, window_in, 0, 2 * window_dim, 0, combine_dim, 0, hidden_dim, 0];
        for ((_, slice), fan_in) in s.named_slices_mut().into_iter().zip(fan_ins) {
            if fan_in > 0 {
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                slice.iter_mut().for_each(|v| *v = T::sample_symmetric(rng, bound));
            }
        }
        s
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.source_proj.cols() / WINDOW,
            self.source_proj.rows(),
            self.matcher.combine_dim(),
            self.matcher.hidden_dim(),
        )
    }

    pub fn named_slices(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("source_window.weight".into(), self.source_proj.as_slice()),
            ("source_window.bias".into(), &self.source_bias[..]),
            ("target_window.weight".into(), self.target_proj.as_slice()),
            ("target_window.bias".into(), &self.target_bias[..]),
        ];
        out.extend(self.matcher.named_slices());
        out
    }

    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![
            ("source_window.weight".into(), self.source_proj.as_mut_slice()),
            ("source_window.bias".into(), &mut self.source_bias[..]),
            ("target_window.weight".into(), self.target_proj.as_mut_slice()),
            ("target_window.bias".into(), &mut self.target_bias[..]),
        ];
        out.extend(self.matcher.named_slices_mut());
        out
    }

    pub fn forward(&self, pair: &WindowPair, emb: &BilingualEmbeddings<T>) -> (T, WordPairTape<T>) {
        let source_in = concat_window(&emb.source, &pair.source);
        let target_in = concat_window(&emb.target, &pair.target);
        let (source_pre, x) = affine_relu(&self.source_proj, &self.source_bias, &source_in);
        let (target_pre, y) = affine_relu(&self.target_proj, &self.target_bias, &target_in);
        let (score, matcher) = self.matcher.forward(&x, &y).expect("window projections match matcher shape");
        (score, WordPairTape { source_in, source_pre, target_in, target_pre, matcher, pair: *pair })
    }

    pub fn backward(&self, tape: WordPairTape<T>, grad_score: T) -> WordPairGrad<T> {
        let mut scorer = self.zeros_like();
        let head = self.matcher.backward(tape.matcher, grad_score);
        scorer.matcher = head.params;

        let d_source_pre = relu_grad(&head.source, &tape.source_pre);
        scorer.source_proj.add_outer(&d_source_pre, &tape.source_in);
        scorer.source_bias = d_source_pre.clone();
        let d_source_in = self.source_proj.matvec_transposed(&d_source_pre);

        let d_target_pre = relu_grad(&head.target, &tape.target_pre);
        scorer.target_proj.add_outer(&d_target_pre, &tape.target_in);
        scorer.target_bias = d_target_pre.clone();
        let d_target_in = self.target_proj.matvec_transposed(&d_target_pre);

        let d = d_source_in.len() / WINDOW;
        let rows = |ids: &[usize; WINDOW], grads: &[T]| {
            ids.iter().enumerate().map(|(w, &id)| (id, grads[w * d..(w + 1) * d].to_vec())).collect()
        };
        WordPairGrad {
            scorer,
            source_rows: rows(&tape.pair.source, &d_source_in),
            target_rows: rows(&tape.pair.target, &d_target_in),
        }
    }

    /// Smallest |pre-activation| over every ReLU of the last forward pass.
    pub fn kink_distance(tape: &WordPairTape<T>) -> f64 {
        tape.source_pre
            .iter()
            .chain(&tape.target_pre)
            .map(|z| z.abs().to_f64_lossy())
            .fold(tape.matcher.kink_distance(), f64::min)
    }
}

pub fn word_pair_score<T: Scalar>(pair: &WindowPair, scorer: &WordPairScorer<T>, emb: &BilingualEmbeddings<T>) -> T {
    scorer.forward(pair, emb).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub embed_dim: usize,
    pub window_dim: usize,
    pub combine_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    /// Embeddings start uniform on `±init_scale`.
    pub init_scale: f64,
    /// Gain of the fan-in scaled scorer initialization.
    pub init_gain: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 50,
            window_dim: 50,
            combine_dim: 50,
            hidden_dim: 50,
            epochs: 5,
            negatives: 1,
            learning_rate: 0.02,
            init_scale: 0.05,
            init_gain: 1.0,
            seed: 0,
        }
    }
}

/// Embeddings and scoring head under training.
#[derive(Debug, Clone)]
pub struct Pretrainer<T> {
    pub embeddings: BilingualEmbeddings<T>,
    pub scorer: WordPairScorer<T>,
    pub config: PretrainConfig,
    /// Mean training loss of every finished epoch.
    pub epoch_losses: Vec<f64>,
}

impl<T: Scalar> Pretrainer<T> {
    /// Builds vocabularies from `corpus` and draws initial parameters.
    pub fn new<R: Rng + ?Sized>(corpus: &[AlignedSentencePair], config: PretrainConfig, rng: &mut R) -> Self {
        let source_vocab = Vocabulary::from_tokens(corpus.iter().flat_map(|p| p.src()));
        let target_vocab = Vocabulary::from_tokens(corpus.iter().flat_map(|p| p.tgt()));
        let embeddings = BilingualEmbeddings::random(source_vocab, target_vocab, config.embed_dim, config.init_scale, rng);
        let scorer = WordPairScorer::random(
            config.embed_dim,
            config.window_dim,
            config.combine_dim,
            config.hidden_dim,
            config.init_gain,
            rng,
        );
        Self { embeddings, scorer, config, epoch_losses: Vec::new() }
    }

    /// One window pair per alignment link, in corpus order.
    pub fn window_pairs(&self, corpus: &[AlignedSentencePair]) -> Vec<WindowPair> {
        let mut out = Vec::new();
        for pair in corpus {
            let src = self.embeddings.source_vocab.ids(pair.src());
            let tgt = self.embeddings.target_vocab.ids(pair.tgt());
            for &(i, j) in pair.alignment() {
                out.push(WindowPair {
                    source: context_window(&src, i, Vocabulary::BOS_ID, Vocabulary::EOS_ID).expect("aligned index in range"),
                    target: context_window(&tgt, j, Vocabulary::BOS_ID, Vocabulary::EOS_ID).expect("aligned index in range"),
                });
            }
        }
        out
    }

    /// Replaces the centre word on a uniformly chosen side with a different
    /// random (non-reserved) word of that side's vocabulary.
    pub fn negative<R: Rng + ?Sized>(&self, pair: &WindowPair, rng: &mut R) -> Result<WindowPair> {
        let sizes = [self.embeddings.source_vocab.len(), self.embeddings.target_vocab.len()];
        let usable: Vec<usize> = (0..2).filter(|&s| sizes[s] >= Vocabulary::RESERVED + 2).collect();
        if usable.is_empty() {
            return Err(Error::NoTrainingData("vocabularies too small to draw negatives".into()));
        }
        let side = usable[rng.gen_range(0..usable.len())];
        let mut neg = *pair;
        let window = if side == 0 { &mut neg.source } else { &mut neg.target };
        let original = window[HALF];
        loop {
            let cand = rng.gen_range(Vocabulary::RESERVED..sizes[side]);
            if cand != original {
                window[HALF] = cand;
                return Ok(neg);
            }
        }
    }

    pub fn score(&self, pair: &WindowPair) -> T {
        word_pair_score(pair, &self.scorer, &self.embeddings)
    }

    pub fn loss(&self, triple: &PretrainTriple) -> T {
        hinge_loss(self.score(&triple.positive), self.score(&triple.negative))
    }

    /// Hinge loss of `triple` with its full gradient (empty rows when inactive).
    pub fn loss_and_grad(&self, triple: &PretrainTriple) -> (T, Option<(WordPairGrad<T>, WordPairGrad<T>)>) {
        let (sp, tape_pos) = self.scorer.forward(&triple.positive, &self.embeddings);
        let (sn, tape_neg) = self.scorer.forward(&triple.negative, &self.embeddings);
        let loss = hinge_loss(sp, sn);
        if !hinge_active(sp, sn) {
            return (loss, None);
        }
        let gp = self.scorer.backward(tape_pos, -T::one());
        let gn = self.scorer.backward(tape_neg, T::one());
        (loss, Some((gp, gn)))
    }

    /// One SGD update on `triple`; returns its loss before the update.
    pub fn step(&mut self, triple: &PretrainTriple) -> Result<T> {
        let (loss, grads) = self.loss_and_grad(triple);
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        let Some((gp, gn)) = grads else { return Ok(loss) };
        let lr = T::lit(self.config.learning_rate);
        for g in [gp, gn] {
            for ((_, p), (_, d)) in self.scorer.named_slices_mut().into_iter().zip(g.scorer.named_slices()) {
                axpy(-lr, d, p);
            }
            for (id, d) in &g.source_rows {
                axpy(-lr, d, self.embeddings.source.row_mut(*id));
            }
            for (id, d) in &g.target_rows {
                axpy(-lr, d, self.embeddings.target.row_mut(*id));
            }
        }
        Ok(loss)
    }

    /// Shuffles `pairs` and trains on fresh negatives; returns the mean loss.
    pub fn train_epoch<R: Rng + ?Sized>(&mut self, pairs: &[WindowPair], rng: &mut R) -> Result<f64> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in order {
            for _ in 0..self.config.negatives {
                let negative = self.negative(&pairs[idx], rng)?;
                total += self.step(&PretrainTriple { positive: pairs[idx], negative })?.to_f64_lossy();
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        self.epoch_losses.push(mean);
        Ok(mean)
    }
}

/// Trains bilingual embeddings on every alignment link of `corpus`.
pub fn pretrain_bilingual<T: Scalar>(corpus: &[AlignedSentencePair], config: PretrainConfig) -> Result<Pretrainer<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Pretrainer::new(corpus, config, &mut rng);
    let pairs = trainer.window_pairs(corpus);
    if pairs.is_empty() {
        return Err(Error::NoTrainingData("corpus has no alignment links".into()));
    }
    for _ in 0..trainer.config.epochs {
        trainer.train_epoch(&pairs, &mut rng)?;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;

    #[test]
    fn window_boundaries() {
        let w = ["w0", "w1", "w2"];
        assert_eq!(context_window(&w, 0, "<s>", "</s>").unwrap(), ["<s>", "<s>", "w0", "w1", "w2"]);
        let w5 = ["w0", "w1", "w2", "w3", "w4"];
        assert_eq!(context_window(&w5, 2, "<s>", "</s>").unwrap(), w5);
        assert_eq!(context_window(&["w0"], 0, "<s>", "</s>").unwrap(), ["<s>", "<s>", "w0", "</s>", "</s>"]);
        assert!(matches!(context_window(&w, 3, "<s>", "</s>"), Err(Error::IndexOutOfRange { index: 3, len: 3 })));
    }

    fn toy() -> Vec<AlignedSentencePair> {
        parse_corpus("a b c ||| x y z ||| 0-0 1-1 2-2\nb c d ||| y z w ||| 0-0 1-1 2-2\n".as_bytes()).unwrap()
    }

    #[test]
    fn zero_params_score_zero() {
        let corpus = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Pretrainer::<f64>::new(&corpus, PretrainConfig { embed_dim: 4, ..Default::default() }, &mut rng);
        t.scorer = WordPairScorer::zeros(4, 50, 50, 50);
        let pairs = t.window_pairs(&corpus);
        assert_eq!(pairs.len(), 6);
        assert_eq!(t.score(&pairs[0]), 0.0);
    }

    #[test]
    fn negative_changes_exactly_one_centre_word() {
        let corpus = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Pretrainer::<f64>::new(&corpus, PretrainConfig { embed_dim: 4, ..Default::default() }, &mut rng);
        for p in t.window_pairs(&corpus) {
            for _ in 0..10 {
                let n = t.negative(&p, &mut rng).unwrap();
                let diffs: Vec<usize> = (0..WINDOW)
                    .flat_map(|w| [(p.source[w] != n.source[w]).then_some(w), (p.target[w] != n.target[w]).then_some(w)])
                    .flatten()
                    .collect();
                assert_eq!(diffs, vec![HALF]);
            }
        }
    }

    #[test]
    fn zero_epochs_keep_initial_tables() {
        let corpus = toy();
        let cfg = PretrainConfig { embed_dim: 4, window_dim: 3, combine_dim: 3, hidden_dim: 3, epochs: 0, seed: 5, ..Default::default() };
        let trained = pretrain_bilingual::<f64>(&corpus, cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fresh = Pretrainer::<f64>::new(&corpus, cfg, &mut rng);
        assert_eq!(trained.embeddings, fresh.embeddings);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let corpus = toy();
        let cfg = PretrainConfig { embed_dim: 4, window_dim: 3, combine_dim: 3, hidden_dim: 3, epochs: 3, seed: 9, ..Default::default() };
        let a = pretrain_bilingual::<f64>(&corpus, cfg.clone()).unwrap();
        let b = pretrain_bilingual::<f64>(&corpus, cfg).unwrap();
        let bits = |t: &EmbeddingTable<f64>| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.embeddings.source), bits(&b.embeddings.source));
        assert_eq!(bits(&a.embeddings.target), bits(&b.embeddings.target));
    }

    #[test]
    fn no_links_is_an_error() {
        let corpus = parse_corpus("a b ||| x y |||\n".as_bytes()).unwrap();
        assert!(matches!(pretrain_bilingual::<f64>(&corpus, PretrainConfig::default()), Err(Error::NoTrainingData(_))));
    }

    #[test]
    fn score_gradient_matches_central_differences() {
        let corpus = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = PretrainConfig { embed_dim: 3, window_dim: 4, combine_dim: 4, hidden_dim: 3, init_scale: 0.6, ..Default::default() };
        let mut t = Pretrainer::<f64>::new(&corpus, cfg, &mut rng);
        let pairs = t.window_pairs(&corpus);
        let pair = pairs[1];
        let (_, tape) = t.scorer.forward(&pair, &t.embeddings);
        assert!(WordPairScorer::kink_distance(&tape) > 1e-6);
        let g = t.scorer.backward(tape, 1.0);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

        let analytic: Vec<Vec<f64>> = g.scorer.named_slices().into_iter().map(|(_, s)| s.to_vec()).collect();
        for (grp, values) in analytic.iter().enumerate() {
            for (i, &a) in values.iter().enumerate() {
                let base = t.scorer.named_slices()[grp].1[i];
                t.scorer.named_slices_mut()[grp].1[i] = base + h;
                let up = t.score(&pair);
                t.scorer.named_slices_mut()[grp].1[i] = base - h;
                let down = t.score(&pair);
                t.scorer.named_slices_mut()[grp].1[i] = base;
                let n = (up - down) / (2.0 * h);
                assert!(rel(a, n) < 1e-4, "group {grp}[{i}]: {a} vs {n}");
            }
        }
        // accumulate row gradients per word (a word may fill several slots)
        let mut src_acc = EmbeddingTable::<f64>::zeros(t.embeddings.source.len(), 3);
        for (id, d) in &g.source_rows {
            axpy(1.0, d, src_acc.row_mut(*id));
        }
        for id in 0..t.embeddings.source.len() {
            for c in 0..3 {
                let base = t.embeddings.source.row(id)[c];
                t.embeddings.source.row_mut(id)[c] = base + h;
                let up = t.score(&pair);
                t.embeddings.source.row_mut(id)[c] = base - h;
                let down = t.score(&pair);
                t.embeddings.source.row_mut(id)[c] = base;
                let n = (up - down) / (2.0 * h);
                assert!(rel(src_acc.row(id)[c], n) < 1e-4, "source row {id}[{c}]");
            }
        }
        let mut tgt_acc = EmbeddingTable::<f64>::zeros(t.embeddings.target.len(), 3);
        for (id, d) in &g.target_rows {
            axpy(1.0, d, tgt_acc.row_mut(*id));
        }
        for id in 0..t.embeddings.target.len() {
            for c in 0..3 {
                let base = t.embeddings.target.row(id)[c];
                t.embeddings.target.row_mut(id)[c] = base + h;
                let up = t.score(&pair);
                t.embeddings.target.row_mut(id)[c] = base - h;
                let down = t.score(&pair);
                t.embeddings.target.row_mut(id)[c] = base;
                let n = (up - down) / (2.0 * h);
                assert!(rel(tgt_acc.row(id)[c], n) < 1e-4, "target row {id}[{c}]");
            }
        }
    }
}
