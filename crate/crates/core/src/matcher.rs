//! Matching head: one combining layer over `[x : y]` followed by an MLP with
//! one hidden layer and a linear scalar output, plus the ranking hinge loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::relu;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams<T> {
    /// `H × (J_src + J_tgt)`
    pub combine: Matrix<T>,
    pub combine_bias: Vec<T>,
    /// `H₂ × H`
    pub hidden: Matrix<T>,
    pub hidden_bias: Vec<T>,
    pub output: Vec<T>,
    pub output_bias: T,
    source_dim: usize,
}

impl<T: Scalar> MatcherParams<T> {
    pub fn zeros(source_dim: usize, target_dim: usize, combine_dim: usize, hidden_dim: usize) -> Self {
        Self {
            combine: Matrix::zeros(combine_dim, source_dim + target_dim),
            combine_bias: vec![T::zero(); combine_dim],
            hidden: Matrix::zeros(hidden_dim, combine_dim),
            hidden_bias: vec![T::zero(); hidden_dim],
            output: vec![T::zero(); hidden_dim],
            output_bias: T::zero(),
            source_dim,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        source_dim: usize,
        target_dim: usize,
        combine_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(source_dim, target_dim, combine_dim, hidden_dim);
        for (_, slice) in p.named_slices_mut() {
            slice.iter_mut().for_each(|v| *v = T::sample_symmetric(rng, scale));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.source_dim, self.target_dim(), self.combine_dim(), self.hidden_dim())
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.combine.cols() - self.source_dim
    }

    pub fn combine_dim(&self) -> usize {
        self.combine.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.rows()
    }

    pub fn named_slices(&self) -> Vec<(String, &[T])> {
        vec![
            ("combine.weight".into(), self.combine.as_slice()),
            ("combine.bias".into(), &self.combine_bias[..]),
            ("hidden.weight".into(), self.hidden.as_slice()),
            ("hidden.bias".into(), &self.hidden_bias[..]),
            ("output.weight".into(), &self.output[..]),
            ("output.bias".into(), std::slice::from_ref(&self.output_bias)),
        ]
    }

    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("combine.weight".into(), self.combine.as_mut_slice()),
            ("combine.bias".into(), &mut self.combine_bias[..]),
            ("hidden.weight".into(), self.hidden.as_mut_slice()),
            ("hidden.bias".into(), &mut self.hidden_bias[..]),
            ("output.weight".into(), &mut self.output[..]),
            ("output.bias".into(), std::slice::from_mut(&mut self.output_bias)),
        ]
    }

    pub fn forward(&self, x: &[T], y: &[T]) -> Result<(T, MatcherTape<T>)> {
        if x.len() != self.source_dim || y.len() != self.target_dim() {
            return Err(Error::Shape(format!(
                "matcher expects [{} : {}], got [{} : {}]",
                self.source_dim,
                self.target_dim(),
                x.len(),
                y.len()
            )));
        }
        let joined: Vec<T> = x.iter().chain(y).copied().collect();
        let mut combine_pre = self.combine.matvec(&joined);
        combine_pre.iter_mut().zip(&self.combine_bias).for_each(|(z, &b)| *z += b);
        let combined: Vec<T> = combine_pre.iter().map(|&z| relu(z)).collect();
        let mut hidden_pre = self.hidden.matvec(&combined);
        hidden_pre.iter_mut().zip(&self.hidden_bias).for_each(|(z, &b)| *z += b);
        let hidden: Vec<T> = hidden_pre.iter().map(|&z| relu(z)).collect();
        let score = dot(&self.output, &hidden) + self.output_bias;
        Ok((score, MatcherTape { joined, combine_pre, combined, hidden_pre, hidden }))
    }

    /// Gradients of the score scaled by `grad_score`, consuming the tape.
    pub fn backward(&self, tape: MatcherTape<T>, grad_score: T) -> MatcherGrad<T> {
        let mut params = self.zeros_like();
        params.output_bias = grad_score;
        params.output = tape.hidden.iter().map(|&h| h * grad_score).collect();

        let d_hidden_pre: Vec<T> = self
            .output
            .iter()
            .zip(&tape.hidden_pre)
            .map(|(&w, &z)| if z > T::zero() { w * grad_score } else { T::zero() })
            .collect();
        params.hidden.add_outer(&d_hidden_pre, &tape.combined);
        params.hidden_bias.copy_from_slice(&d_hidden_pre);

        let d_combined = self.hidden.matvec_transposed(&d_hidden_pre);
        let d_combine_pre: Vec<T> = d_combined
            .iter()
            .zip(&tape.combine_pre)
            .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
            .collect();
        params.combine.add_outer(&d_combine_pre, &tape.joined);
        params.combine_bias.copy_from_slice(&d_combine_pre);

        let mut d_joined = self.combine.matvec_transposed(&d_combine_pre);
        let d_target = d_joined.split_off(self.source_dim);
        MatcherGrad { params, source: d_joined, target: d_target }
    }

    pub fn is_finite(&self) -> bool {
        self.named_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values recorded by [`MatcherParams::forward`].
#[derive(Debug, Clone)]
pub struct MatcherTape<T> {
    joined: Vec<T>,
    combine_pre: Vec<T>,
    combined: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> MatcherTape<T> {
    /// Smallest |pre-activation| over both ReLU layers.
    pub fn kink_distance(&self) -> f64 {
        self.combine_pre
            .iter()
            .chain(&self.hidden_pre)
            .map(|z| z.abs().to_f64_lossy())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct MatcherGrad<T> {
    pub params: MatcherParams<T>,
    pub source: Vec<T>,
    pub target: Vec<T>,
}

pub fn match_score<T: Scalar>(x: &[T], y: &[T], params: &MatcherParams<T>) -> Result<T> {
    params.forward(x, y).map(|(s, _)| s)
}

/// `max(0, 1 + s_neg − s_pos)`
pub fn hinge_loss<T: Scalar>(s_pos: T, s_neg: T) -> T {
    let margin = T::one() + s_neg - s_pos;
    if margin > T::zero() {
        margin
    } else {
        T::zero()
    }
}

/// Whether gradient flows through the hinge.
pub fn hinge_active<T: Scalar>(s_pos: T, s_neg: T) -> bool {
    T::one() + s_neg - s_pos > T::zero()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_score_zero() {
        let p = MatcherParams::<f64>::zeros(3, 2, 4, 5);
        assert_eq!(match_score(&[1.0, 2.0, 3.0], &[4.0, 5.0], &p).unwrap(), 0.0);
    }

    #[test]
    fn output_scaling_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MatcherParams::<f64>::random(3, 2, 4, 4, 0.8, &mut rng);
        p.output_bias = 0.0;
        let (x, y) = ([0.3, 0.9, 0.1], [0.5, 0.2]);
        let s = match_score(&x, &y, &p).unwrap();
        p.output.iter_mut().for_each(|w| *w *= 2.5);
        let scaled = match_score(&x, &y, &p).unwrap();
        assert!((scaled - 2.5 * s).abs() <= 1e-15 * s.abs().max(1.0));
    }

    #[test]
    fn rejects_wrong_shapes() {
        let p = MatcherParams::<f64>::zeros(3, 2, 4, 5);
        assert!(matches!(match_score(&[1.0], &[4.0, 5.0], &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = MatcherParams::<f64>::random(4, 3, 5, 4, 0.7, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, tape) = p.forward(&x, &y).unwrap();
        assert!(tape.kink_distance() > 1e-6);
        let grad = p.backward(tape, 1.0);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

        let names: Vec<String> = p.named_slices().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grad.params.named_slices().into_iter().map(|(_, s)| s.to_vec()).collect();
        for (g, name) in names.iter().enumerate() {
            for i in 0..analytic[g].len() {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.named_slices_mut()[g].1[i] += delta;
                    match_score(&x, &y, &q).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(rel(analytic[g][i], numeric) < 1e-4, "{name}[{i}]: {} vs {numeric}", analytic[g][i]);
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let numeric = (match_score(&xp, &y, &p).unwrap() - match_score(&xm, &y, &p).unwrap()) / (2.0 * h);
            assert!(rel(grad.source[i], numeric) < 1e-4);
        }
        for i in 0..y.len() {
            let mut yp = y.clone();
            yp[i] += h;
            let mut ym = y.clone();
            ym[i] -= h;
            let numeric = (match_score(&x, &yp, &p).unwrap() - match_score(&x, &ym, &p).unwrap()) / (2.0 * h);
            assert!(rel(grad.target[i], numeric) < 1e-4);
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(0.9, -0.5), 0.0);
        assert!((hinge_loss(0.2, 0.5) - 1.3f64).abs() < 1e-15);
        for s in [-3.0, 0.0, 7.25] {
            assert_eq!(hinge_loss(s, s), 1.0);
        }
    }

    proptest! {
        #[test]
        fn hinge_is_zero_iff_margin_met(sp in -10.0f64..10.0, sn in -10.0f64..10.0) {
            let l = hinge_loss(sp, sn);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, sp - sn >= 1.0);
        }

        #[test]
        fn hinge_is_one_lipschitz(sp in -10.0f64..10.0, sn in -10.0f64..10.0, d in -5.0f64..5.0) {
            prop_assert!((hinge_loss(sp + d, sn) - hinge_loss(sp, sn)).abs() <= d.abs() + 1e-12);
            prop_assert!((hinge_loss(sp, sn + d) - hinge_loss(sp, sn)).abs() <= d.abs() + 1e-12);
        }

        #[test]
        fn hinge_depends_on_difference_only(sp in -10.0f64..10.0, sn in -10.0f64..10.0, c in -4.0f64..4.0) {
            prop_assert!((hinge_loss(sp + c, sn + c) - hinge_loss(sp, sn)).abs() < 1e-12);
        }
    }
}
