//! Convolutional sentence model.
//!
//! An encoder is a chain of `(gated convolution, local max-pool)` layers
//! followed by a max over all remaining positions. Inputs are `d × L`
//! column sequences; the gate zeroes any output column whose input window is
//! exactly all-zero, so trailing zero padding contributes nothing.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Columns, Matrix};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "source",
            Side::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `J × (k · d_in)`; row `j` is the filter of feature map `j`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    window: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(input_dim: usize, feature_maps: usize, window: usize) -> Self {
        assert!(input_dim >= 1 && feature_maps >= 1 && window >= 1, "degenerate conv layer");
        Self {
            weight: Matrix::zeros(feature_maps, window * input_dim),
            bias: vec![T::zero(); feature_maps],
            window,
        }
    }

    pub fn from_parts(weight: Matrix<T>, bias: Vec<T>, window: usize) -> Result<Self> {
        if window == 0 || weight.rows() == 0 || !weight.cols().is_multiple_of(window) || weight.cols() == 0 {
            return Err(Error::Shape(format!(
                "conv weight {}x{} incompatible with window {window}",
                weight.rows(),
                weight.cols()
            )));
        }
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!("bias length {} != feature maps {}", bias.len(), weight.rows())));
        }
        Ok(Self { weight, bias, window })
    }

    pub fn random<R: Rng + ?Sized>(input_dim: usize, feature_maps: usize, window: usize, scale: f64, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input_dim, feature_maps, window);
        layer.weight = Matrix::random(feature_maps, window * input_dim, scale, rng);
        layer.bias.iter_mut().for_each(|b| *b = T::sample_symmetric(rng, scale));
        layer
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn feature_maps(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols() / self.window
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.feature_maps(), self.window)
    }
}

/// Values one gated convolution needs for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvTape<T> {
    input: Columns<T>,
    pre: Columns<T>,
    gate: Vec<bool>,
}

/// Source position of every pooled value.
#[derive(Debug, Clone)]
pub struct PoolTape {
    input_len: usize,
    argmax: Vec<usize>,
    min_gap: f64,
}

/// `c_i = g(ĉ_i) · ReLU(W ĉ_i + B)` over every full window of `k` columns.
pub fn gated_conv_forward<T: Scalar>(input: &Columns<T>, layer: &ConvLayer<T>) -> Result<(Columns<T>, ConvTape<T>)> {
    let k = layer.window;
    if input.dim() != layer.input_dim() {
        return Err(Error::Shape(format!("conv expects input dim {}, got {}", layer.input_dim(), input.dim())));
    }
    if input.len() < k {
        return Err(Error::Shape(format!("conv window {k} longer than input length {}", input.len())));
    }
    let out_len = input.len() - k + 1;
    let maps = layer.feature_maps();
    let mut pre = Columns::zeros(maps, out_len);
    let mut out = Columns::zeros(maps, out_len);
    let mut gate = vec![false; out_len];
    for i in 0..out_len {
        let window = input.window(i, k);
        if window.iter().all(|v| *v == T::zero()) {
            continue;
        }
        gate[i] = true;
        let z = pre.column_mut(i);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = dot(layer.weight.row(j), window) + layer.bias[j];
        }
        for (o, &zj) in out.column_mut(i).iter_mut().zip(pre.column(i)) {
            if zj > T::zero() {
                *o = zj;
            }
        }
    }
    Ok((out, ConvTape { input: input.clone(), pre, gate }))
}

/// Returns the parameter gradient and the gradient with respect to the input.
pub fn gated_conv_backward<T: Scalar>(
    tape: ConvTape<T>,
    layer: &ConvLayer<T>,
    grad_out: &Columns<T>,
) -> (ConvLayer<T>, Columns<T>) {
    let k = layer.window;
    let mut grad = layer.zeros_like();
    let mut grad_in = Columns::zeros(tape.input.dim(), tape.input.len());
    for (i, &open) in tape.gate.iter().enumerate() {
        if !open {
            continue;
        }
        let window = tape.input.window(i, k);
        for (j, (&g, &z)) in grad_out.column(i).iter().zip(tape.pre.column(i)).enumerate() {
            if z <= T::zero() || g == T::zero() {
                continue;
            }
            grad.bias[j] += g;
            axpy(g, window, grad.weight.row_mut(j));
            axpy(g, layer.weight.row(j), grad_in.window_mut(i, k));
        }
    }
    (grad, grad_in)
}

/// Max over non-overlapping pairs `(2i, 2i+1)`; an odd trailing column is
/// passed through alone. Ties go to the lower index.
pub fn maxpool_forward<T: Scalar>(input: &Columns<T>) -> (Columns<T>, PoolTape) {
    let dim = input.dim();
    let out_len = input.len().div_ceil(2);
    let mut out = Columns::zeros(dim, out_len);
    let mut argmax = vec![0; dim * out_len];
    let mut min_gap = f64::INFINITY;
    for i in 0..out_len {
        let left = 2 * i;
        let right = left + 1;
        for r in 0..dim {
            let a = input.get(r, left);
            let (pos, val) = if right < input.len() {
                let b = input.get(r, right);
                if a > T::zero() || b > T::zero() {
                    min_gap = min_gap.min((a - b).abs().to_f64_lossy());
                }
                if b > a {
                    (right, b)
                } else {
                    (left, a)
                }
            } else {
                (left, a)
            };
            out.set(r, i, val);
            argmax[i * dim + r] = pos;
        }
    }
    (out, PoolTape { input_len: input.len(), argmax, min_gap })
}

pub fn maxpool_backward<T: Scalar>(tape: &PoolTape, grad_out: &Columns<T>) -> Columns<T> {
    let dim = grad_out.dim();
    let mut grad_in = Columns::zeros(dim, tape.input_len);
    for i in 0..grad_out.len() {
        for r in 0..dim {
            let src = tape.argmax[i * dim + r];
            let g = grad_in.get(r, src) + grad_out.get(r, i);
            grad_in.set(r, src, g);
        }
    }
    grad_in
}

/// Per-row max over all columns, with the winning column of each row.
pub fn global_pool<T: Scalar>(input: &Columns<T>) -> Result<(Vec<T>, Vec<usize>)> {
    if input.is_empty() {
        return Err(Error::Shape("global pool over empty sequence".into()));
    }
    let mut best: Vec<T> = input.column(0).to_vec();
    let mut argmax = vec![0; input.dim()];
    for i in 1..input.len() {
        for (r, &v) in input.column(i).iter().enumerate() {
            if v > best[r] {
                best[r] = v;
                argmax[r] = i;
            }
        }
    }
    Ok((best, argmax))
}

/// A stack of gated convolutions, each followed by local max-pooling, ending
/// in a global max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack<T> {
    pub side: Side,
    pub layers: Vec<ConvLayer<T>>,
}

/// Lengths seen at every layer for one input length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLengths {
    pub input: usize,
    pub conv: usize,
    pub pool: usize,
}

impl<T: Scalar> EncoderStack<T> {
    /// Layer `l` maps `dims[l]` input rows to `dims[l + 1]` feature maps.
    pub fn random<R: Rng + ?Sized>(side: Side, dims: &[usize], window: usize, scale: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "encoder needs at least one conv layer");
        let layers = dims.windows(2).map(|w| ConvLayer::random(w[0], w[1], window, scale, rng)).collect();
        Self { side, layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { side: self.side, layers: self.layers.iter().map(ConvLayer::zeros_like).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, ConvLayer::feature_maps)
    }

    pub fn pooling_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shortest input every convolution in the stack can accept.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            if idx + 1 < self.layers.len() {
                need = 2 * need - 1;
            }
            need += layer.window - 1;
        }
        need
    }

    /// Sequence lengths before and after every conv and pool, or a shape error
    /// if some convolution would see fewer columns than its window.
    pub fn layer_lengths(&self, input_len: usize) -> Result<Vec<LayerLengths>> {
        let mut len = input_len;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if len < layer.window {
                return Err(Error::Shape(format!(
                    "{} encoder: length {len} shorter than window {} (minimum input {})",
                    self.side,
                    layer.window,
                    self.min_input_len()
                )));
            }
            let conv = len - layer.window + 1;
            let pool = conv.div_ceil(2);
            out.push(LayerLengths { input: len, conv, pool });
            len = pool;
        }
        Ok(out)
    }

    /// Whether appending zero columns to a `width`-column input whose last
    /// nonzero column is before `content_len` provably leaves the encoding
    /// unchanged: every pooled sequence has even length and every conv layer
    /// still sees at least `k − 1` trailing all-zero columns.
    pub fn padding_stable(&self, width: usize, content_len: usize) -> bool {
        let Ok(lengths) = self.layer_lengths(width) else { return false };
        let mut zeros = width.saturating_sub(content_len);
        for (layer, l) in self.layers.iter().zip(&lengths) {
            if zeros < layer.window - 1 || l.conv % 2 != 0 {
                return false;
            }
            zeros = (zeros - (layer.window - 1)) / 2;
        }
        true
    }

    pub fn named_slices(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{}.conv{i}.weight", self.side), l.weight.as_slice()));
            out.push((format!("{}.conv{i}.bias", self.side), &l.bias[..]));
        }
        out
    }

    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let side = self.side;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{side}.conv{i}.weight"), l.weight.as_mut_slice()));
            out.push((format!("{side}.conv{i}.bias"), &mut l.bias[..]));
        }
        out
    }
}

/// Everything [`encoder_backward`] needs. Consumed by value, so it can be
/// replayed at most once.
#[derive(Debug, Clone)]
pub struct ActivationTape<T> {
    layers: Vec<(ConvTape<T>, PoolTape)>,
    final_len: usize,
    global_argmax: Vec<usize>,
    global_gap: f64,
}

impl<T: Scalar> ActivationTape<T> {
    /// Distance of the recorded forward pass from the nearest point where
    /// the encoder is not differentiable: a ReLU pre-activation at zero or a
    /// near-tie between positive candidates of a max.
    pub fn kink_distance(&self) -> f64 {
        let mut d = self.global_gap;
        for (conv, pool) in &self.layers {
            d = d.min(pool.min_gap);
            for (i, &open) in conv.gate.iter().enumerate() {
                if open {
                    for z in conv.pre.column(i) {
                        d = d.min(z.abs().to_f64_lossy());
                    }
                }
            }
        }
        d
    }
}

pub fn encode<T: Scalar>(input: &Columns<T>, stack: &EncoderStack<T>) -> Result<(Vec<T>, ActivationTape<T>)> {
    stack.layer_lengths(input.len())?;
    let mut layers = Vec::with_capacity(stack.layers.len());
    let mut current = input.clone();
    for layer in &stack.layers {
        let (conv, conv_tape) = gated_conv_forward(&current, layer)?;
        let (pooled, pool_tape) = maxpool_forward(&conv);
        layers.push((conv_tape, pool_tape));
        current = pooled;
    }
    let (out, global_argmax) = global_pool(&current)?;
    let mut global_gap = f64::INFINITY;
    for (r, &best) in out.iter().enumerate() {
        if best > T::zero() {
            for i in 0..current.len() {
                if i != global_argmax[r] {
                    global_gap = global_gap.min((best - current.get(r, i)).to_f64_lossy());
                }
            }
        }
    }
    Ok((out, ActivationTape { layers, final_len: current.len(), global_argmax, global_gap }))
}

/// Reverse pass through the whole stack. Returns parameter gradients (shaped
/// like `stack`) and the gradient with respect to the encoder input.
pub fn encoder_backward<T: Scalar>(
    tape: ActivationTape<T>,
    stack: &EncoderStack<T>,
    output_grad: &[T],
) -> Result<(EncoderStack<T>, Columns<T>)> {
    if output_grad.len() != stack.output_dim() || tape.layers.len() != stack.layers.len() {
        return Err(Error::Shape("tape or output gradient does not match encoder".into()));
    }
    let mut grads = stack.zeros_like();
    let mut grad = Columns::zeros(stack.output_dim(), tape.final_len);
    for (r, (&g, &pos)) in output_grad.iter().zip(&tape.global_argmax).enumerate() {
        grad.set(r, pos, g);
    }
    for (idx, (conv_tape, pool_tape)) in tape.layers.into_iter().enumerate().rev() {
        let conv_grad = maxpool_backward(&pool_tape, &grad);
        let (layer_grad, input_grad) = gated_conv_backward(conv_tape, &stack.layers[idx], &conv_grad);
        grads.layers[idx] = layer_grad;
        grad = input_grad;
    }
    Ok((grads, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[f64]) -> Columns<f64> {
        Columns::from_columns(1, values.to_vec())
    }

    fn unit(w: &[f64], b: f64) -> ConvLayer<f64> {
        ConvLayer::from_parts(Matrix::from_vec(1, w.len(), w.to_vec()), vec![b], w.len()).unwrap()
    }

    #[test]
    fn conv_evaluates_window_sum() {
        let (out, _) = gated_conv_forward(&row(&[1.0, 2.0, 3.0]), &unit(&[1.0, 1.0, 1.0], 0.0)).unwrap();
        assert_eq!(out.as_slice(), &[6.0]);
    }

    #[test]
    fn gate_overrides_bias_on_zero_window() {
        let (out, _) = gated_conv_forward(&row(&[0.0, 0.0, 0.0, 0.0]), &unit(&[1.0, 1.0, 1.0], 5.0)).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
        let (out, _) = gated_conv_forward(&row(&[1.0, 0.0, 0.0, 0.0]), &unit(&[1.0, 1.0, 1.0], 5.0)).unwrap();
        assert_eq!(out.as_slice(), &[6.0, 0.0]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let (out, _) = gated_conv_forward(&row(&[1.0, 2.0, 3.0]), &unit(&[1.0, 0.0, 0.0], -5.0)).unwrap();
        assert_eq!(out.as_slice(), &[0.0]);
    }

    #[test]
    fn conv_rejects_short_input() {
        assert!(matches!(
            gated_conv_forward(&row(&[1.0, 2.0]), &unit(&[1.0, 1.0, 1.0], 0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let (out, _) = maxpool_forward(&row(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0]));
        assert_eq!(out.as_slice(), &[3.0, 4.0, 9.0]);
        let (out, _) = maxpool_forward(&row(&[2.0, 7.0, 5.0]));
        assert_eq!(out.as_slice(), &[7.0, 5.0]);
        let (out, _) = maxpool_forward(&row(&[0.0; 4]));
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn maxpool_ties_route_to_lower_index() {
        let input = row(&[2.0, 2.0, 1.0]);
        let (_, tape) = maxpool_forward(&input);
        let g = maxpool_backward(&tape, &row(&[1.0, 1.0]));
        assert_eq!(g.as_slice(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn global_pool_examples() {
        let single = Columns::from_columns(2, vec![4.0, -1.0]);
        assert_eq!(global_pool(&single).unwrap().0, vec![4.0, -1.0]);
        // J = 2, L = 2: rows [1, 2] and [5, 0]
        let m = Columns::from_columns(2, vec![1.0, 5.0, 2.0, 0.0]);
        assert_eq!(global_pool(&m).unwrap().0, vec![2.0, 5.0]);
        assert_eq!(global_pool(&Columns::<f64>::zeros(3, 4)).unwrap().0, vec![0.0; 3]);
    }

    #[test]
    fn default_stack_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let source = EncoderStack::<f64>::random(Side::Source, &[51, 100, 100, 100, 100], 3, 0.05, &mut rng);
        let target = EncoderStack::<f64>::random(Side::Target, &[51, 100, 100, 100], 3, 0.05, &mut rng);
        assert_eq!(source.min_input_len(), 31);
        assert_eq!(target.min_input_len(), 15);
        let lens: Vec<(usize, usize)> = source.layer_lengths(40).unwrap().iter().map(|l| (l.conv, l.pool)).collect();
        assert_eq!(lens, vec![(38, 19), (17, 9), (7, 4), (2, 1)]);
        assert!(source.layer_lengths(30).is_err());
        assert!(target.layer_lengths(7).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = EncoderStack::<f64>::random(Side::Source, &[3, 4, 2], 2, 0.5, &mut rng);
        let input = Columns::from_columns(3, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let (_, tape) = encode(&input, &stack).unwrap();
        let (grads, gin) = encoder_backward(tape, &stack, &[0.0, 0.0]).unwrap();
        assert!(grads.named_slices().iter().all(|(_, s)| s.iter().all(|&v| v == 0.0)));
        assert!(gin.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_gradient_matches_central_differences() {
        let h = 1e-5;
        let mut checked = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..=5);
            let j = rng.gen_range(2..=4);
            let stack = EncoderStack::<f64>::random(Side::Source, &[d, j, j], 2, 0.8, &mut rng);
            let len = rng.gen_range(stack.min_input_len()..=12);
            let content = rng.gen_range(1..=len);
            let mut input = Columns::zeros(d, len);
            for c in 0..content {
                for r in 0..d {
                    input.set(r, c, rng.gen_range(-1.0..1.0));
                }
            }
            let weights: Vec<f64> = (0..j).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |stack: &EncoderStack<f64>, input: &Columns<f64>| {
                let (y, _) = encode(input, stack).unwrap();
                dot(&y, &weights)
            };
            let (_, tape) = encode(&input, &stack).unwrap();
            if tape.kink_distance() < 1e-6 {
                continue;
            }
            checked += 1;
            let (grads, gin) = encoder_backward(tape, &stack, &weights).unwrap();
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

            let analytic: Vec<Vec<f64>> = grads.named_slices().into_iter().map(|(_, s)| s.to_vec()).collect();
            for (g, values) in analytic.iter().enumerate() {
                for (i, &a) in values.iter().enumerate() {
                    let eval = |delta: f64| {
                        let mut s = stack.clone();
                        s.named_slices_mut()[g].1[i] += delta;
                        objective(&s, &input)
                    };
                    let n = (eval(h) - eval(-h)) / (2.0 * h);
                    assert!(rel(a, n) < 1e-4, "seed {seed} group {g}[{i}]: {a} vs {n}");
                }
            }
            for i in 0..content * d {
                let eval = |delta: f64| {
                    let mut x = input.clone();
                    x.as_mut_slice()[i] += delta;
                    objective(&stack, &x)
                };
                let n = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(rel(gin.as_slice()[i], n) < 1e-4, "seed {seed} input[{i}]");
            }
        }
        assert!(checked >= 10, "too many kink rejections: {checked}");
    }

    #[test]
    fn padding_stability_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = EncoderStack::<f64>::random(Side::Source, &[2, 3, 3], 3, 0.5, &mut rng);
        // width 14: conv 12 (even), pool 6, conv 4 (even)
        assert!(stack.padding_stable(14, 6));
        assert!(!stack.padding_stable(14, 13));
        assert!(!stack.padding_stable(13, 2));
    }
}
