//! SGD with separate parameter and embedding learning rates, the
//! easy → medium → difficult curriculum, and the finite-difference checker.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{mix_sample, CurriculumPools, TrainingTriple};
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::model::{Cdcm, MatchingModel};
use crate::Scalar;

/// Gradient with the shape of the network plus sparse embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub model: MatchingModel<T>,
    pub source_rows: BTreeMap<usize, Vec<T>>,
    pub target_rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(model: &MatchingModel<T>) -> Self {
        Self { model: model.zeros_like(), source_rows: BTreeMap::new(), target_rows: BTreeMap::new() }
    }

    pub fn is_finite(&self) -> bool {
        self.model.named_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
            && self.source_rows.values().chain(self.target_rows.values()).all(|r| r.iter().all(|v| v.is_finite()))
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &GradientSet<T>) {
        for ((_, acc), (_, g)) in self.model.named_slices_mut().into_iter().zip(other.model.named_slices()) {
            axpy(T::one(), g, acc);
        }
        for (mine, theirs) in [(&mut self.source_rows, &other.source_rows), (&mut self.target_rows, &other.target_rows)] {
            for (id, g) in theirs {
                let acc = mine.entry(*id).or_insert_with(|| vec![T::zero(); g.len()]);
                axpy(T::one(), g, acc);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let params = self.model.named_slices().into_iter().flat_map(|(_, s)| s.to_vec());
        let rows = self.source_rows.values().chain(self.target_rows.values()).flatten().copied();
        params.chain(rows).map(|v| v.abs().to_f64_lossy()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Learning rate of the network parameters.
    pub learning_rate: f64,
    /// Embeddings move at `learning_rate * embed_lr_factor`.
    pub embed_lr_factor: f64,
    /// Number of difficult-curriculum steps; easy and medium stages get `n * t` presentations.
    pub steps: usize,
    /// Presentations per unit budget; `None` means the size of the easy pool.
    pub budget: Option<usize>,
    pub seed: u64,
    /// Stage ends once a window's mean loss improves on the previous window
    /// by less than this fraction.
    pub convergence_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.02, embed_lr_factor: 0.01, steps: 3, budget: None, seed: 0, convergence_tol: 1e-4 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(Error::Config("curriculum step count must be at least 1".into()));
        }
        if self.embed_lr_factor < 0.0 || self.convergence_tol < 0.0 {
            return Err(Error::Config("embedding rate factor and tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// `Θ ← Θ − η·g_Θ`; `W ← W − η·factor·g_W` on the rows present in `grads`.
pub fn sgd_step<T: Scalar>(cdcm: &mut Cdcm<T>, grads: &GradientSet<T>, config: &TrainConfig) -> Result<()> {
    if !grads.is_finite() {
        let bad: Vec<String> = grads
            .model
            .named_slices()
            .into_iter()
            .filter(|(_, s)| s.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
            .collect();
        return Err(Error::NonFinite(format!("gradient in {bad:?} or embedding rows; training aborted")));
    }
    let lr = T::lit(config.learning_rate);
    let embed_lr = T::lit(config.learning_rate * config.embed_lr_factor);
    for ((_, p), (_, g)) in cdcm.model.named_slices_mut().into_iter().zip(grads.model.named_slices()) {
        axpy(-lr, g, p);
    }
    for (id, g) in &grads.source_rows {
        axpy(-embed_lr, g, cdcm.embeddings.source.row_mut(*id));
    }
    for (id, g) in &grads.target_rows {
        axpy(-embed_lr, g, cdcm.embeddings.target.row_mut(*id));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Easy,
    Medium,
    Difficult,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Easy => "easy",
            Stage::Medium => "medium",
            Stage::Difficult => "difficult",
        })
    }
}

/// Mean loss of one window of presentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub stage: Stage,
    pub step: usize,
    pub window: usize,
    pub presentations: usize,
    pub mean_loss: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.stage, self.step, self.window, self.mean_loss)
    }
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome<T> {
    /// Model after the easy, medium and difficult curricula.
    pub snapshots: [Cdcm<T>; 3],
    pub trace: Vec<TraceRecord>,
    /// Presentations made in each stage.
    pub presentations: [usize; 3],
}

impl<T: Scalar> CurriculumOutcome<T> {
    pub fn final_model(&self) -> &Cdcm<T> {
        &self.snapshots[2]
    }
}

/// Trains on triples from `sample` until `budget` presentations have been
/// made or the windowed mean loss stops improving.
#[allow(clippy::too_many_arguments)]
fn curriculum<T, F>(
    cdcm: &mut Cdcm<T>,
    config: &TrainConfig,
    budget: usize,
    window: usize,
    stage: Stage,
    step: usize,
    trace: &mut Vec<TraceRecord>,
    mut sample: F,
) -> Result<usize>
where
    T: Scalar,
    F: FnMut() -> Result<TrainingTriple>,
{
    let mut presented = 0;
    let mut window_sum = 0.0;
    let mut window_count = 0;
    let mut window_idx = 0;
    let mut previous: Option<f64> = None;
    while presented < budget {
        let triple = sample()?;
        let eval = cdcm.evaluate_triple(&triple)?;
        let loss = eval.loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss in {stage} curriculum after {presented} presentations")));
        }
        if loss > 0.0 {
            sgd_step(cdcm, &eval.grads, config)?;
        }
        presented += 1;
        window_sum += loss;
        window_count += 1;
        if window_count == window || presented == budget {
            let mean = window_sum / window_count as f64;
            trace.push(TraceRecord { stage, step, window: window_idx, presentations: window_count, mean_loss: mean });
            window_idx += 1;
            let plateau = match previous {
                Some(prev) if prev <= 0.0 => true,
                Some(prev) => (prev - mean) / prev < config.convergence_tol,
                None => false,
            };
            if plateau && window_count == window {
                break;
            }
            previous = Some(mean);
            window_sum = 0.0;
            window_count = 0;
        }
    }
    Ok(presented)
}

/// Runs the three curricula and snapshots the model after each.
///
/// Stage 1 samples easy triples for up to `n·t` presentations, stage 2 mixes
/// easy and medium pools for up to `n·t`, and stage 3 runs `n` steps of up to
/// `t` presentations each over the three pools with the difficult pool
/// weighted `s / (s + 2)` at step `s`.
pub fn run_curriculum<T: Scalar>(
    pools: &CurriculumPools,
    mut cdcm: Cdcm<T>,
    config: &TrainConfig,
) -> Result<CurriculumOutcome<T>> {
    config.validate()?;
    let t = config.budget.unwrap_or(pools.easy.len());
    let n = config.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut presentations = [0usize; 3];

    let require = |pool: &[TrainingTriple], idx: usize| {
        if t > 0 && pool.is_empty() {
            Err(Error::PoolExhausted(idx))
        } else {
            Ok(())
        }
    };

    require(&pools.easy, 0)?;
    let easy: [&[TrainingTriple]; 1] = [&pools.easy];
    presentations[0] = curriculum(&mut cdcm, config, n * t, t, Stage::Easy, 0, &mut trace, || {
        mix_sample(&easy, 0, &mut rng).cloned()
    })?;
    let after_easy = cdcm.clone();

    require(&pools.medium, 1)?;
    let two: [&[TrainingTriple]; 2] = [&pools.easy, &pools.medium];
    presentations[1] = curriculum(&mut cdcm, config, n * t, t, Stage::Medium, 0, &mut trace, || {
        mix_sample(&two, 0, &mut rng).cloned()
    })?;
    let after_medium = cdcm.clone();

    require(&pools.difficult, 2)?;
    let three: [&[TrainingTriple]; 3] = [&pools.easy, &pools.medium, &pools.difficult];
    for step in 1..=n {
        presentations[2] += curriculum(&mut cdcm, config, t, t, Stage::Difficult, step, &mut trace, || {
            mix_sample(&three, step, &mut rng).cloned()
        })?;
    }
    Ok(CurriculumOutcome { snapshots: [after_easy, after_medium, cdcm], trace, presentations })
}

/// Mean hinge loss over `triples`.
pub fn mean_loss<T: Scalar>(cdcm: &Cdcm<T>, triples: &[TrainingTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in triples {
        total += cdcm.triple_loss(t)?.to_f64_lossy();
    }
    Ok(total / triples.len() as f64)
}

/// Fraction of triples whose positive outscores the negative.
pub fn ranking_accuracy<T: Scalar>(cdcm: &Cdcm<T>, triples: &[TrainingTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for t in triples {
        let ex = &t.example;
        let src = cdcm.tag_source(ex.sentence.src(), ex.src_span)?;
        let sp = crate::model::score_example(&src, &cdcm.tag_target(&ex.positive_tgt)?, &cdcm.model)?;
        let sn = crate::model::score_example(&src, &cdcm.tag_target(&t.negative_tgt)?, &cdcm.model)?;
        correct += usize::from(sp > sn);
    }
    Ok(correct as f64 / triples.len() as f64)
}

/// Below this magnitude gradients are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst entry of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    /// Hinge loss at the unperturbed point.
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the analytic gradient of the triple loss with central
/// differences `(L(p + h) − L(p − h)) / 2h` for every network parameter and
/// every entry of the embedding rows the triple touches.
///
/// Fails with [`Error::NearKink`] when the forward pass lies within
/// `kink_margin` of a ReLU kink, a max tie or the hinge corner.
pub fn grad_check<T: Scalar>(cdcm: &Cdcm<T>, triple: &TrainingTriple, h: f64, kink_margin: f64) -> Result<GradCheckReport> {
    let eval = cdcm.evaluate_triple(triple)?;
    if eval.kink_distance < kink_margin {
        return Err(Error::NearKink { margin: kink_margin });
    }
    grad_check_against(cdcm, triple, &eval.grads, h)
}

/// As [`grad_check`], but against a caller-supplied analytic gradient.
pub fn grad_check_against<T: Scalar>(
    cdcm: &Cdcm<T>,
    triple: &TrainingTriple,
    analytic: &GradientSet<T>,
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("perturbation must be positive, got {h}")));
    }
    let mut probe = cdcm.clone();
    let loss = cdcm.triple_loss(triple)?.to_f64_lossy();
    let step = T::lit(h);
    let mut groups = Vec::new();

    let finish = |name: String, pairs: Vec<(f64, f64)>| {
        let mut g = GroupCheck { name, entries: pairs.len(), max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for (i, (a, n)) in pairs.into_iter().enumerate() {
            let e = relative_error(a, n);
            if e > g.max_rel_err || i == 0 {
                g = GroupCheck { max_rel_err: e, worst_index: i, analytic: a, numeric: n, ..g };
            }
        }
        g
    };

    let analytic_groups: Vec<(String, Vec<T>)> =
        analytic.model.named_slices().into_iter().map(|(n, s)| (n, s.to_vec())).collect();
    for (g, (name, values)) in analytic_groups.into_iter().enumerate() {
        let mut pairs = Vec::with_capacity(values.len());
        for (i, a) in values.into_iter().enumerate() {
            let base = probe.model.named_slices()[g].1[i];
            probe.model.named_slices_mut()[g].1[i] = base + step;
            let up = probe.triple_loss(triple)?;
            probe.model.named_slices_mut()[g].1[i] = base - step;
            let down = probe.triple_loss(triple)?;
            probe.model.named_slices_mut()[g].1[i] = base;
            pairs.push((a.to_f64_lossy(), ((up - down) / (step + step)).to_f64_lossy()));
        }
        groups.push(finish(name, pairs));
    }

    let ex = &triple.example;
    let vocab = &cdcm.embeddings;
    let mut source_ids: Vec<usize> = vocab.source_vocab.ids(ex.sentence.src());
    source_ids.sort_unstable();
    source_ids.dedup();
    let mut target_ids: Vec<usize> = vocab.target_vocab.ids(&ex.positive_tgt);
    target_ids.extend(vocab.target_vocab.ids(&triple.negative_tgt));
    target_ids.sort_unstable();
    target_ids.dedup();

    for (is_source, ids) in [(true, source_ids), (false, target_ids)] {
        let rows = if is_source { &analytic.source_rows } else { &analytic.target_rows };
        let dim = cdcm.embeddings.dim();
        let mut pairs = Vec::with_capacity(ids.len() * dim);
        for &id in &ids {
            for c in 0..dim {
                let a = rows.get(&id).map_or(T::zero(), |r| r[c]);
                let base = *embedding_entry(&mut probe, is_source, id, c);
                *embedding_entry(&mut probe, is_source, id, c) = base + step;
                let up = probe.triple_loss(triple)?;
                *embedding_entry(&mut probe, is_source, id, c) = base - step;
                let down = probe.triple_loss(triple)?;
                *embedding_entry(&mut probe, is_source, id, c) = base;
                pairs.push((a.to_f64_lossy(), ((up - down) / (step + step)).to_f64_lossy()));
            }
        }
        let name = if is_source { "source_embeddings" } else { "target_embeddings" };
        groups.push(finish(name.to_owned(), pairs));
    }

    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_rel_err, loss })
}

fn embedding_entry<T: Scalar>(cdcm: &mut Cdcm<T>, source: bool, id: usize, col: usize) -> &mut T {
    let table = if source { &mut cdcm.embeddings.source } else { &mut cdcm.embeddings.target };
    &mut table.row_mut(id)[col]
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::{
        build_pools, extract_corpus, parse_pair_line, tokenize, AlignedSentencePair, ContextualExample, Difficulty,
        PhraseTable, Span,
    };
    use crate::embeddings::{BilingualEmbeddings, Vocabulary};
    use crate::model::ModelConfig;

    const CORPUS: &[&str] = &[
        "a b c ||| x y z ||| 0-0 1-1 2-2",
        "a c b ||| w z y ||| 0-0 1-1 2-2",
        "d b a ||| v y x ||| 0-0 1-1 2-2",
        "c d a ||| z v w ||| 0-0 1-1 2-2",
        "b a d ||| y w v ||| 0-0 1-1 2-2",
    ];

    fn tiny(seed: u64) -> Cdcm<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            embed_dim: 4,
            feature_maps: 3,
            source_layers: 2,
            target_layers: 1,
            combine_dim: 3,
            hidden_dim: 3,
            source_len: 10,
            target_len: 5,
            init_gain: 1.0,
            ..Default::default()
        };
        let emb = BilingualEmbeddings::random(
            Vocabulary::from_tokens(["a", "b", "c", "d"]),
            Vocabulary::from_tokens(["v", "w", "x", "y", "z"]),
            4,
            0.5,
            &mut rng,
        );
        Cdcm::new(&config, emb, &mut rng).unwrap()
    }

    fn pools(seed: u64) -> CurriculumPools {
        let corpus: Vec<_> = CORPUS.iter().enumerate().map(|(i, l)| Arc::new(parse_pair_line(l, i + 1).unwrap())).collect();
        let examples = extract_corpus(&corpus, 2);
        let table = PhraseTable::from_examples(&examples);
        build_pools(&examples, &table, 2, 1, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn triple(sentence: &str, span: Span, pos: &str, neg: &str) -> TrainingTriple {
        let tokens = tokenize(sentence);
        let n = tokens.len();
        let pair = AlignedSentencePair::new(tokens, tokenize(pos), vec![(0, 0)]).unwrap();
        assert!(span.end < n);
        TrainingTriple {
            example: ContextualExample { sentence: Arc::new(pair), src_span: span, positive_tgt: tokenize(pos) },
            negative_tgt: tokenize(neg),
            difficulty: Difficulty::Easy,
        }
    }

    /// First triple (from a fixed list of candidates) with an active hinge
    /// and no kink within `margin`.
    fn checkable(cdcm: &Cdcm<f64>, margin: f64) -> TrainingTriple {
        let candidates = [
            ("a b c d", Span::new(1, 2), "y z", "x"),
            ("d c b a", Span::new(0, 0), "v", "w x"),
            ("c a d", Span::new(1, 2), "w v", "y"),
            ("b b a c", Span::new(2, 3), "x z", "v w"),
        ];
        for (s, span, p, n) in candidates {
            for swap in [false, true] {
                let (p, n) = if swap { (n, p) } else { (p, n) };
                let t = triple(s, span, p, n);
                let e = cdcm.evaluate_triple(&t).unwrap();
                if e.loss > 0.0 && e.kink_distance >= margin {
                    return t;
                }
            }
        }
        panic!("no checkable triple");
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        let mut m = tiny(0);
        let before = m.clone();
        let g = GradientSet::zeros_like(&m.model);
        sgd_step(&mut m, &g, &TrainConfig::default()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn single_parameter_and_embedding_updates() {
        let mut m = tiny(1);
        m.model.matcher.output_bias = 1.0;
        let mut g = GradientSet::zeros_like(&m.model);
        g.model.matcher.output_bias = 2.0;
        let row_before = m.embeddings.source.row(4).to_vec();
        let grad_row = vec![1.0, -2.0, 0.5, 3.0];
        g.source_rows.insert(4, grad_row.clone());
        sgd_step(&mut m, &g, &TrainConfig::default()).unwrap();
        assert!((m.model.matcher.output_bias - 0.96).abs() < 1e-15);
        for ((after, before), g) in m.embeddings.source.row(4).iter().zip(&row_before).zip(&grad_row) {
            assert!((after - (before - 0.0002 * g)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = tiny(2);
        let before = m.clone();
        let mut g = GradientSet::zeros_like(&m.model);
        g.model.matcher.hidden_bias[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut m, &g, &TrainConfig::default()), Err(Error::NonFinite(_))));
        assert_eq!(m, before);
    }

    #[test]
    fn two_rate_law_holds_on_real_gradients() {
        let mut m = tiny(3);
        let t = checkable(&m, 0.0);
        let g = m.evaluate_triple(&t).unwrap().grads;
        let before = m.clone();
        let config = TrainConfig::default();
        sgd_step(&mut m, &g, &config).unwrap();
        let eta = config.learning_rate;
        for (((_, new), (_, old)), (_, grad)) in
            m.model.named_slices().into_iter().zip(before.model.named_slices()).zip(g.model.named_slices())
        {
            for ((n, o), d) in new.iter().zip(old).zip(grad) {
                assert_eq!(n.to_bits(), (o + (-eta) * d).to_bits());
            }
        }
        let embed_eta = eta * 0.01;
        let mut max_delta: f64 = 0.0;
        for id in 0..m.embeddings.source.len() {
            let grad = g.source_rows.get(&id);
            for c in 0..4 {
                let (n, o) = (m.embeddings.source.row(id)[c], before.embeddings.source.row(id)[c]);
                let d = grad.map_or(0.0, |r| r[c]);
                let expected = if grad.is_some() { o + (-embed_eta) * d } else { o };
                assert_eq!(n.to_bits(), expected.to_bits());
                max_delta = max_delta.max((n - o).abs());
            }
        }
        assert!(max_delta <= embed_eta * g.max_abs() * (1.0 + 1e-12));
    }

    #[test]
    fn only_words_in_the_triple_get_embedding_gradient() {
        let m = tiny(4);
        let t = checkable(&m, 0.0);
        let g = m.evaluate_triple(&t).unwrap().grads;
        let src_ids = m.embeddings.source_vocab.ids(t.example.sentence.src());
        let mut tgt_ids = m.embeddings.target_vocab.ids(&t.example.positive_tgt);
        tgt_ids.extend(m.embeddings.target_vocab.ids(&t.negative_tgt));
        assert!(g.source_rows.keys().all(|id| src_ids.contains(id)));
        assert!(g.target_rows.keys().all(|id| tgt_ids.contains(id)));
    }

    #[test]
    fn miniature_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = tiny(10 + seed);
            let t = checkable(&m, 1e-6);
            let report = grad_check(&m, &t, 1e-5, 1e-6).unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
            let names: Vec<&str> = report.groups.iter().map(|g| g.name.as_str()).collect();
            for want in ["source.conv0.weight", "target.conv0.bias", "matcher.output.bias", "source_embeddings", "target_embeddings"] {
                assert!(names.contains(&want), "{names:?}");
            }
        }
    }

    #[test]
    fn halving_the_step_does_not_blow_up_the_error() {
        let m = tiny(20);
        let t = checkable(&m, 1e-6);
        let coarse = grad_check(&m, &t, 1e-5, 1e-6).unwrap().max_rel_err;
        let fine = grad_check(&m, &t, 5e-6, 1e-6).unwrap().max_rel_err;
        assert!(fine <= 4.0 * coarse.max(1e-10), "{coarse} -> {fine}");
    }

    #[test]
    fn inactive_hinge_has_flat_gradient() {
        let (mut m, t, gap) = (5..50)
            .find_map(|seed| {
                let m = tiny(seed);
                let t = checkable(&m, 0.0);
                let e = m.evaluate_triple(&t).unwrap();
                let gap = e.positive_score - e.negative_score;
                (gap.abs() > 1e-3).then_some((m, t, gap))
            })
            .unwrap();
        // both scores share the output bias, so scaling the weights scales the gap
        let scale = 10.0 / gap;
        m.model.matcher.output.iter_mut().for_each(|w| *w *= scale);
        let e = m.evaluate_triple(&t).unwrap();
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.grads.max_abs(), 0.0);
        let h = 1e-5;
        let report = grad_check_against(&m, &t, &e.grads, h).unwrap();
        for g in &report.groups {
            assert!(g.numeric.abs() < h, "{g:?}");
        }
        assert_eq!(report.loss, 0.0);
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let m = tiny(6);
        let t = checkable(&m, 1e-6);
        let mut g = m.evaluate_triple(&t).unwrap().grads;
        g.model.source.layers[0].bias[0] += 0.5;
        let report = grad_check_against(&m, &t, &g, 1e-5).unwrap();
        assert!(!report.passes(1e-4));
        let worst = report.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
        assert_eq!(worst.name, "source.conv0.bias");
    }

    #[test]
    fn kink_margin_rejects() {
        let m = tiny(7);
        let t = checkable(&m, 0.0);
        assert!(matches!(grad_check(&m, &t, 1e-5, f64::INFINITY), Err(Error::NearKink { .. })));
        assert!(grad_check(&m, &t, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_budget_returns_identical_snapshots() {
        let m = tiny(8);
        let config = TrainConfig { steps: 1, budget: Some(0), ..Default::default() };
        let out = run_curriculum(&pools(0), m.clone(), &config).unwrap();
        for snap in &out.snapshots {
            assert_eq!(*snap, m);
        }
        assert_eq!(out.presentations, [0, 0, 0]);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn stage_budgets_are_respected() {
        let p = pools(1);
        let config = TrainConfig { steps: 2, budget: Some(7), convergence_tol: 0.0, seed: 3, ..Default::default() };
        let out = run_curriculum(&p, tiny(9), &config).unwrap();
        assert!(out.presentations[0] <= 14 && out.presentations[1] <= 14 && out.presentations[2] <= 14);
        for step in 1..=2 {
            let in_step: usize =
                out.trace.iter().filter(|r| r.stage == Stage::Difficult && r.step == step).map(|r| r.presentations).sum();
            assert!(in_step <= 7);
        }
        let total: usize = out.trace.iter().map(|r| r.presentations).sum();
        assert_eq!(total, out.presentations.iter().sum::<usize>());
    }

    #[test]
    fn curriculum_is_reproducible() {
        let config = TrainConfig { steps: 2, budget: Some(10), seed: 42, ..Default::default() };
        let a = run_curriculum(&pools(2), tiny(11), &config).unwrap();
        let b = run_curriculum(&pools(2), tiny(11), &config).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn empty_required_pool_is_reported() {
        let mut p = pools(3);
        p.difficult.clear();
        let config = TrainConfig { steps: 1, budget: Some(2), ..Default::default() };
        assert_eq!(run_curriculum(&p, tiny(12), &config).unwrap_err(), Error::PoolExhausted(2));
        p.easy.clear();
        assert_eq!(run_curriculum(&p, tiny(12), &config).unwrap_err(), Error::PoolExhausted(0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn stage_one_lowers_validation_loss() {
        let p = pools(4);
        let m = tiny(13);
        let before = mean_loss(&m, &p.easy).unwrap();
        let config = TrainConfig { steps: 3, budget: Some(200), learning_rate: 0.05, seed: 1, ..Default::default() };
        let out = run_curriculum(&p, m, &config).unwrap();
        let after = mean_loss(&out.snapshots[0], &p.easy).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / REL_ERR_FLOOR);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
