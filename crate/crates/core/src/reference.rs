//! Dense single-device attention with fully materialized scores and
//! probabilities. Every distributed path is checked against this module.

use crate::error::{Error, Result};
use crate::local::BlockMask;
use crate::tensor::{Matrix, Real, Vector};

/// One attention head: `O = softmax(Q Kᵀ · scale) V`.
#[derive(Debug, Clone)]
pub struct AttnProblem<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub scale: T,
    pub mask: Option<BlockMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput<T: Real = f64> {
    pub o: Matrix<T>,
    /// Per-row log-sum-exp of the scaled scores.
    pub lse: Vector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T: Real = f64> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

impl<T: Real> Grads<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            dq: Matrix::zeros(n, d),
            dk: Matrix::zeros(n, d),
            dv: Matrix::zeros(n, d),
        }
    }

    /// Largest elementwise difference over all three gradients.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.dq
            .max_abs_diff(&other.dq)
            .max(self.dk.max_abs_diff(&other.dk))
            .max(self.dv.max_abs_diff(&other.dv))
    }
}

impl<T: Real> AttnProblem<T> {
    /// Builds a problem with the default `1/√d` scale.
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        let scale = T::one() / T::from_f64(q.cols() as f64).sqrt();
        Self::with_scale(q, k, v, scale)
    }

    pub fn with_scale(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>, scale: T) -> Result<Self> {
        let p = Self {
            q,
            k,
            v,
            scale,
            mask: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_mask(mut self, mask: Option<BlockMask>) -> Result<Self> {
        if let Some(m) = &mask {
            m.validate(self.seq_len())?;
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.q.shape();
        if n == 0 || d == 0 {
            return Err(Error::Shape("Q must be non-empty".into()));
        }
        if self.k.shape() != (n, d) || self.v.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "Q {:?}, K {:?}, V {:?} must share one N×d shape",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        if !(self.scale > T::zero()) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument("scale must be positive and finite".into()));
        }
        if !(self.q.is_finite() && self.k.is_finite() && self.v.is_finite()) {
            return Err(crate::tensor::TensorError::NonFinite { op: "attention input" }.into());
        }
        Ok(())
    }

    fn allows(&self, q: usize, k: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.allows(q, k))
    }

    /// Row-normalized probabilities and the per-row log-sum-exp.
    fn probabilities(&self) -> Result<(Matrix<T>, Vector<T>)> {
        let n = self.seq_len();
        let s = self.q.matmul_transposed(&self.k)?.scale(self.scale)?;
        let mut p = Matrix::zeros(n, n);
        let mut lse = Vector::zeros(n);
        for r in 0..n {
            let m = (0..n)
                .filter(|&c| self.allows(r, c))
                .map(|c| s.get(r, c))
                .fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut sum = T::zero();
            for c in 0..n {
                if self.allows(r, c) {
                    let e = (s.get(r, c) - m).exp();
                    p.set(r, c, e);
                    sum += e;
                }
            }
            for x in p.row_mut(r) {
                *x = *x / sum;
            }
            lse[r] = m + sum.ln();
        }
        Ok((p, lse))
    }
}

pub fn forward_dense<T: Real>(p: &AttnProblem<T>) -> Result<AttnOutput<T>> {
    p.validate()?;
    let (probs, lse) = p.probabilities()?;
    let o = probs.matmul(&p.v)?;
    if !lse.is_finite() {
        return Err(crate::tensor::TensorError::NonFinite { op: "forward_dense" }.into());
    }
    Ok(AttnOutput { o, lse })
}

/// Analytic gradients of `Σ dO ∘ O` with respect to Q, K and V.
pub fn backward_dense<T: Real>(p: &AttnProblem<T>, d_o: &Matrix<T>) -> Result<Grads<T>> {
    p.validate()?;
    if d_o.shape() != p.q.shape() {
        return Err(Error::Shape(format!(
            "dO is {:?}, expected {:?}",
            d_o.shape(),
            p.q.shape()
        )));
    }
    let (probs, _) = p.probabilities()?;
    let o = probs.matmul(&p.v)?;
    let delta = d_o.hadamard(&o)?.rowsum()?;
    let dv = probs.transposed_matmul(d_o)?;
    let dp = d_o.matmul_transposed(&p.v)?;
    let ds = probs.hadamard(&dp.sub_row_broadcast(&delta)?)?;
    let dq = ds.matmul(&p.k)?.scale(p.scale)?;
    let dk = ds.transposed_matmul(&p.q)?.scale(p.scale)?;
    Ok(Grads { dq, dk, dv })
}

/// Central finite differences of `L = Σ dO ∘ forward_dense(·).O`, one input
/// entry at a time. Verification oracle only: cost is `O(N³d²)`.
pub fn finite_difference_grad(p: &AttnProblem<f64>, d_o: &Matrix<f64>, h: f64) -> Result<Grads<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    if d_o.shape() != p.q.shape() {
        return Err(Error::Shape("dO must match Q".into()));
    }
    let loss = |prob: &AttnProblem<f64>| -> Result<f64> {
        let o = forward_dense(prob)?.o;
        Ok(o.as_slice().iter().zip(d_o.as_slice()).map(|(a, b)| a * b).sum())
    };
    let mut work = p.clone();
    let mut grads = Grads::zeros(p.seq_len(), p.head_dim());
    for which in 0..3 {
        for idx in 0..p.q.len() {
            let orig = operand(&work, which).as_slice()[idx];
            operand_mut(&mut work, which).as_mut_slice()[idx] = orig + h;
            let plus = loss(&work)?;
            operand_mut(&mut work, which).as_mut_slice()[idx] = orig - h;
            let minus = loss(&work)?;
            operand_mut(&mut work, which).as_mut_slice()[idx] = orig;
            let g = match which {
                0 => &mut grads.dq,
                1 => &mut grads.dk,
                _ => &mut grads.dv,
            };
            g.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

fn operand(p: &AttnProblem<f64>, which: usize) -> &Matrix<f64> {
    match which {
        0 => &p.q,
        1 => &p.k,
        _ => &p.v,
    }
}

fn operand_mut(p: &mut AttnProblem<f64>, which: usize) -> &mut Matrix<f64> {
    match which {
        0 => &mut p.q,
        1 => &mut p.k,
        _ => &mut p.v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::random_matrix;

    fn problem(n: usize, d: usize, seed: u64) -> AttnProblem {
        AttnProblem::new(
            random_matrix(n, d, seed),
            random_matrix(n, d, seed + 1),
            random_matrix(n, d, seed + 2),
        )
        .unwrap()
    }

    #[test]
    fn single_row_returns_value_row() {
        let p = problem(1, 3, 1);
        let out = forward_dense(&p).unwrap();
        assert_eq!(out.o, p.v);
        let s = crate::tensor::dot(p.q.row(0), p.k.row(0)) * p.scale;
        assert!((out.lse[0] - s).abs() < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut p = problem(5, 3, 2);
        let k0 = p.k.row(0).to_vec();
        for r in 0..5 {
            p.k.row_mut(r).copy_from_slice(&k0);
        }
        let out = forward_dense(&p).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|r| p.v.get(r, c)).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((out.o.get(r, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_matches_reordered_recomputation() {
        let p = problem(6, 4, 3);
        let out = forward_dense(&p).unwrap();
        // Independent evaluation summing in reverse order.
        for r in 0..6 {
            let scores: Vec<f64> = (0..6)
                .map(|c| (0..4).rev().map(|k| p.q.get(r, k) * p.k.get(c, k)).sum::<f64>() * p.scale)
                .collect();
            let denom: f64 = scores.iter().rev().map(|s| s.exp()).sum();
            assert!((out.lse[r] - denom.ln()).abs() < 1e-12);
            for col in 0..4 {
                let num: f64 = (0..6).rev().map(|c| scores[c].exp() * p.v.get(c, col)).sum();
                assert!((out.o.get(r, col) - num / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_nonfinite() {
        let q = random_matrix(4, 2, 1);
        assert!(AttnProblem::new(q.clone(), random_matrix(3, 2, 2), random_matrix(4, 2, 3)).is_err());
        assert!(AttnProblem::with_scale(q.clone(), q.clone(), q.clone(), 0.0).is_err());
        let p = problem(4, 2, 1);
        assert!(backward_dense(&p, &Matrix::zeros(3, 2)).is_err());
        let mut bad = p.clone();
        bad.q.as_mut_slice()[0] = f64::INFINITY;
        assert!(forward_dense(&bad).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = problem(5, 3, 4);
        let g = backward_dense(&p, &Matrix::zeros(5, 3)).unwrap();
        assert_eq!(g, Grads::zeros(5, 3));
    }

    #[test]
    fn single_row_gradients() {
        let p = problem(1, 3, 5);
        let d_o = random_matrix(1, 3, 9);
        let g = backward_dense(&p, &d_o).unwrap();
        assert_eq!(g.dv, d_o);
        assert!(g.dq.max_abs() < 1e-15);
        assert!(g.dk.max_abs() < 1e-15);
    }

    fn close(a: &Matrix, b: &Matrix) -> bool {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| (x - y).abs() <= 1e-5_f64.max(1e-4 * y.abs()))
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = problem(5, 3, 6);
        let d_o = random_matrix(5, 3, 7);
        let g = backward_dense(&p, &d_o).unwrap();
        let fd = finite_difference_grad(&p, &d_o, 1e-5).unwrap();
        assert!(close(&g.dq, &fd.dq) && close(&g.dk, &fd.dk) && close(&g.dv, &fd.dv));
        // Relative check at 1e-6 on the larger entries.
        for (a, b) in [(&g.dq, &fd.dq), (&g.dk, &fd.dk), (&g.dv, &fd.dv)] {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-2));
            }
        }
    }

    #[test]
    fn finite_difference_degenerate_cases() {
        let p = problem(1, 3, 5);
        let d_o = random_matrix(1, 3, 9);
        let fd = finite_difference_grad(&p, &d_o, 1e-5).unwrap();
        assert!(fd.dv.max_abs_diff(&d_o) < 1e-9);
        assert!(fd.dq.max_abs() < 1e-9 && fd.dk.max_abs() < 1e-9);
        let zero = finite_difference_grad(&problem(4, 2, 1), &Matrix::zeros(4, 2), 1e-5).unwrap();
        assert_eq!(zero, Grads::zeros(4, 2));
        assert!(finite_difference_grad(&p, &d_o, 0.0).is_err());
    }

    #[test]
    fn lse_matches_direct_log_sum_exp() {
        let p = problem(9, 4, 11);
        let out = forward_dense(&p).unwrap();
        let s = p.q.matmul_transposed(&p.k).unwrap().scale(p.scale).unwrap();
        for r in 0..9 {
            let direct = s.row(r).iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((out.lse[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let p = problem(6, 2, 12).with_mask(Some(BlockMask::causal())).unwrap();
        let out = forward_dense(&p).unwrap();
        // Row 0 only sees key 0.
        for c in 0..2 {
            assert!((out.o.get(0, c) - p.v.get(0, c)).abs() < 1e-15);
        }
        let d_o = random_matrix(6, 2, 13);
        let g = backward_dense(&p, &d_o).unwrap();
        let fd = finite_difference_grad(&p, &d_o, 1e-5).unwrap();
        assert!(g.max_abs_diff(&fd) < 1e-7);
    }
}
