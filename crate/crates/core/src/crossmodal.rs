//! Cross-modal interaction in the rank-`r` space.
//!
//! All mechanisms are single-head and run after the per-modality down
//! projections, so queries, keys and values are `N x r` low-rank tokens.
//! The tape-level functions are what adapters call; the `Matrix` wrappers
//! at the bottom evaluate one mechanism in isolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar, Tape, Var};

/// Post-softmax attention weights captured for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord<T: Scalar = f64> {
    pub query_modality: String,
    pub key_modality: String,
    pub attachment: String,
    #[serde(skip)]
    pub weights: Matrix<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    /// Largest deviation of a row sum from 1, and whether all weights lie in `[0, 1]`.
    pub fn stochasticity(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        for r in 0..self.weights.rows() {
            let total: f64 = self.weights.row(r).iter().map(|v| v.as_f64()).sum();
            worst = worst.max((total - 1.0).abs());
        }
        let bounded = self.weights.data().iter().all(|&v| v >= T::zero() && v <= T::one());
        (worst, bounded)
    }
}

/// `softmax(q kᵀ / sqrt(r)) v`, returning the output and the weight node.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (nk, r) = tape.shape(k);
    if nk == 0 {
        return Err(Error::Protocol("attention over an empty key set".into()));
    }
    if tape.shape(q).1 != r {
        return Err(Error::Shape {
            op: "attend",
            left: tape.shape(q),
            right: tape.shape(k),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scale = T::one() / T::from_usize(r).expect("rank").sqrt();
    let weights = tape.softmax_rows_scaled(scores, scale)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Non-text low-rank tokens attend over the text low-rank tokens.
pub fn task_centric<T: Scalar>(tape: &mut Tape<T>, query_lr: Var, text_lr: Var) -> Result<(Var, Var)> {
    attend(tape, query_lr, text_lr, text_lr)
}

/// `uni_lr + lambda * att_out`.
pub fn residual_enhance<T: Scalar>(tape: &mut Tape<T>, uni_lr: Var, att_out: Var, lambda: T) -> Result<Var> {
    tape.axpy(uni_lr, att_out, lambda)
}

/// Text tokens attend over the concatenated non-text tokens and are
/// residually updated. Returns the updated text block and the weight node.
pub fn reversed_query<T: Scalar>(
    tape: &mut Tape<T>,
    text_lr: Var,
    nontext_lr: &[Var],
    lambda: T,
) -> Result<(Var, Var)> {
    if nontext_lr.is_empty() {
        return Err(Error::Protocol("reversed-query attention needs non-text keys".into()));
    }
    let keys = if nontext_lr.len() == 1 {
        nontext_lr[0]
    } else {
        tape.concat_rows(nontext_lr)?
    };
    let (att, weights) = attend(tape, text_lr, keys, keys)?;
    Ok((tape.axpy(text_lr, att, lambda)?, weights))
}

/// Attention-free interaction: the mean text token, scaled by `lambda`, is
/// added to every non-text row.
pub fn naive_interaction<T: Scalar>(tape: &mut Tape<T>, uni_lr: Var, text_lr: Var, lambda: T) -> Result<Var> {
    if tape.shape(text_lr).0 == 0 {
        return Err(Error::Protocol("naive interaction over an empty text span".into()));
    }
    let mean = tape.mean_rows(text_lr)?;
    let scaled = tape.scale(mean, lambda)?;
    tape.add_row(uni_lr, scaled)
}

/// Applies an `r x r` projection to row tokens: `x Wᵀ`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(x, wt)
}

/// Attention with learned query/key/value projections in rank space.
pub fn projected<T: Scalar>(
    tape: &mut Tape<T>,
    query_lr: Var,
    text_lr: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<(Var, Var)> {
    let q = project(tape, query_lr, wq)?;
    let k = project(tape, text_lr, wk)?;
    let v = project(tape, text_lr, wv)?;
    attend(tape, q, k, v)
}

/// Attention between two non-text modalities (query attends over key).
pub fn extra_pair<T: Scalar>(tape: &mut Tape<T>, query_lr: Var, key_lr: Var) -> Result<(Var, Var)> {
    attend(tape, query_lr, key_lr, key_lr)
}

fn run<T: Scalar>(
    inputs: &[&Matrix<T>],
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<(Var, Option<Var>)>,
) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.constant((*m).clone())).collect();
    let (out, w) = f(&mut tape, &vars)?;
    Ok((tape.value(out).clone(), w.map(|w| tape.value(w).clone())))
}

/// Evaluates task-centric attention on plain matrices.
pub fn task_centric_attention<T: Scalar>(
    query_lr: &Matrix<T>,
    text_lr: &Matrix<T>,
    query_modality: &str,
    text_modality: &str,
) -> Result<(Matrix<T>, AttentionRecord<T>)> {
    let (out, w) = run(&[query_lr, text_lr], |t, v| {
        task_centric(t, v[0], v[1]).map(|(o, w)| (o, Some(w)))
    })?;
    let record = AttentionRecord {
        query_modality: query_modality.to_string(),
        key_modality: text_modality.to_string(),
        attachment: String::new(),
        weights: w.expect("weights"),
    };
    Ok((out, record))
}

pub fn residual_enhance_matrix<T: Scalar>(uni_lr: &Matrix<T>, att_out: &Matrix<T>, lambda: T) -> Result<Matrix<T>> {
    uni_lr.axpy(att_out, lambda)
}

pub fn reversed_query_attention<T: Scalar>(
    text_lr: &Matrix<T>,
    nontext_lr: &[&Matrix<T>],
    lambda: T,
) -> Result<Matrix<T>> {
    let mut inputs = vec![text_lr];
    inputs.extend_from_slice(nontext_lr);
    run(&inputs, |t, v| {
        reversed_query(t, v[0], &v[1..], lambda).map(|(o, w)| (o, Some(w)))
    })
    .map(|r| r.0)
}

pub fn naive_interaction_matrix<T: Scalar>(uni_lr: &Matrix<T>, text_lr: &Matrix<T>, lambda: T) -> Result<Matrix<T>> {
    run(&[uni_lr, text_lr], |t, v| {
        naive_interaction(t, v[0], v[1], lambda).map(|o| (o, None))
    })
    .map(|r| r.0)
}

pub fn projected_attention<T: Scalar>(
    query_lr: &Matrix<T>,
    text_lr: &Matrix<T>,
    wq: &Matrix<T>,
    wk: &Matrix<T>,
    wv: &Matrix<T>,
) -> Result<Matrix<T>> {
    run(&[query_lr, text_lr, wq, wk, wv], |t, v| {
        projected(t, v[0], v[1], v[2], v[3], v[4]).map(|(o, w)| (o, Some(w)))
    })
    .map(|r| r.0)
}

pub fn extra_pair_attention<T: Scalar>(query_lr: &Matrix<T>, key_lr: &Matrix<T>) -> Result<Matrix<T>> {
    run(&[query_lr, key_lr], |t, v| {
        extra_pair(t, v[0], v[1]).map(|(o, w)| (o, Some(w)))
    })
    .map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::RngStream;

    /// Straight-line attention used as an oracle.
    fn oracle_attend(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Matrix<f64> {
        let r = q.cols() as f64;
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / r.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out.set(i, c, out.get(i, c) + e[j] / z * v.get(j, c));
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_that_key() {
        let q = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let t = Matrix::from_rows(&[&[0.25, -1.0]]);
        let (out, rec) = task_centric_attention(&q, &t, "audio", "text").unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), t.row(0));
        }
        assert_eq!(rec.weights, Matrix::filled(2, 1, 1.0));
    }

    #[test]
    fn identical_keys_give_that_key() {
        let q = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5], &[9.0, 9.0]]);
        let t = Matrix::from_rows(&[&[0.5, -1.5], &[0.5, -1.5], &[0.5, -1.5]]);
        let (out, _) = task_centric_attention(&q, &t, "a", "t").unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((out.get(r, c) - t.get(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_closed_form() {
        // r = 1, q = 2, keys 1 and -1: weights softmax([2, -2]).
        let q = Matrix::<f64>::from_rows(&[&[2.0]]);
        let t = Matrix::from_rows(&[&[1.0], &[-1.0]]);
        let (out, _) = task_centric_attention(&q, &t, "a", "t").unwrap();
        let w1 = 2f64.exp() / (2f64.exp() + (-2f64).exp());
        let w2 = 1.0 - w1;
        assert!((out.get(0, 0) - (w1 - w2)).abs() < 1e-15);
    }

    #[test]
    fn scale_is_one_over_sqrt_rank() {
        // At r = 1 the scale is exactly 1, so scores are unscaled.
        let q = Matrix::<f64>::from_rows(&[&[0.7]]);
        let t = Matrix::from_rows(&[&[1.3], &[-0.4], &[2.0]]);
        let (_, rec) = task_centric_attention(&q, &t, "a", "t").unwrap();
        let expected = q.matmul(&t.transpose()).unwrap().softmax_rows();
        assert!(rec.weights.bitwise_eq(&expected));
        // At r = 4 the scores are halved.
        let q4 = Matrix::<f64>::from_rows(&[&[0.7, 0.1, -0.2, 1.0]]);
        let t4 = Matrix::from_rows(&[&[1.0, 0.0, 0.5, -1.0], &[0.3, 0.3, 0.3, 0.3]]);
        let (_, rec4) = task_centric_attention(&q4, &t4, "a", "t").unwrap();
        let expected4 = q4.matmul(&t4.transpose()).unwrap().scale(0.5).softmax_rows();
        assert!(rec4.weights.max_abs_diff(&expected4).unwrap() < 1e-15);
    }

    #[test]
    fn empty_keys_are_a_protocol_error() {
        let q = Matrix::<f64>::zeros(2, 3);
        let t = Matrix::zeros(0, 3);
        assert!(matches!(
            task_centric_attention(&q, &t, "a", "t"),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn random_cases_match_oracle() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let q: Matrix<f64> = rng.normal_matrix(3, 4, 1.0);
            let t: Matrix<f64> = rng.normal_matrix(5, 4, 1.0);
            let (out, rec) = task_centric_attention(&q, &t, "a", "t").unwrap();
            assert!(out.max_abs_diff(&oracle_attend(&q, &t, &t)).unwrap() < 1e-12);
            let (dev, bounded) = rec.stochasticity();
            assert!(dev < 1e-12 && bounded);

            let lam = 0.5;
            let enhanced = residual_enhance_matrix(&q, &out, lam).unwrap();
            let oracle = Matrix::from_fn(3, 4, |r, c| q.get(r, c) + 0.5 * oracle_attend(&q, &t, &t).get(r, c));
            assert!(enhanced.max_abs_diff(&oracle).unwrap() < 1e-12);
        }
    }

    #[test]
    fn residual_identities() {
        let u = Matrix::<f64>::from_rows(&[&[1.0, -2.0]]);
        let a = Matrix::from_rows(&[&[5.0, 7.0]]);
        assert_eq!(residual_enhance_matrix(&u, &a, 0.0).unwrap(), u);
        assert_eq!(residual_enhance_matrix(&u, &u, 1.0).unwrap(), u.scale(2.0));
    }

    #[test]
    fn key_permutation_invariance() {
        let mut rng = RngStream::new(5, 0);
        let q: Matrix<f64> = rng.normal_matrix(3, 4, 1.0);
        let t: Matrix<f64> = rng.normal_matrix(6, 4, 1.0);
        let (base, _) = task_centric_attention(&q, &t, "a", "t").unwrap();
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                order.swap(i, rng.index(i + 1));
            }
            let rows: Vec<Matrix<f64>> = order.iter().map(|&i| t.slice_rows(i, 1).unwrap()).collect();
            let refs: Vec<&Matrix<f64>> = rows.iter().collect();
            let permuted = Matrix::concat_rows(&refs).unwrap();
            let (out, _) = task_centric_attention(&q, &permuted, "a", "t").unwrap();
            assert!(out.max_abs_diff(&base).unwrap() < 1e-12);
        }
    }

    #[test]
    fn reversed_query_cases() {
        let t = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let a = Matrix::from_rows(&[&[0.5, -0.5]]);
        let empty = Matrix::zeros(0, 2);
        let out = reversed_query_attention(&t, &[&a, &empty], 1.0).unwrap();
        assert_eq!(out, t.add_row(&a).unwrap());
        assert_eq!(reversed_query_attention(&t, &[&a], 0.0).unwrap(), t);

        let mut rng = RngStream::new(8, 0);
        let t: Matrix<f64> = rng.normal_matrix(4, 3, 1.0);
        let a: Matrix<f64> = rng.normal_matrix(2, 3, 1.0);
        let v: Matrix<f64> = rng.normal_matrix(3, 3, 1.0);
        let keys = Matrix::concat_rows(&[&a, &v]).unwrap();
        let out = reversed_query_attention(&t, &[&a, &v], 0.3).unwrap();
        let oracle = t.axpy(&oracle_attend(&t, &keys, &keys), 0.3).unwrap();
        assert!(out.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn naive_cases() {
        let u = Matrix::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]);
        let same = Matrix::from_rows(&[&[0.3, -0.7], &[0.3, -0.7]]);
        let naive = naive_interaction_matrix(&u, &same, 1.0).unwrap();
        let (att, _) = task_centric_attention(&u, &same, "a", "t").unwrap();
        let ca = residual_enhance_matrix(&u, &att, 1.0).unwrap();
        assert!(naive.max_abs_diff(&ca).unwrap() < 1e-12);
        assert_eq!(naive_interaction_matrix(&u, &same, 0.0).unwrap(), u);

        let mut rng = RngStream::new(10, 0);
        let u: Matrix<f64> = rng.normal_matrix(3, 4, 1.0);
        let t: Matrix<f64> = rng.normal_matrix(5, 4, 1.0);
        let mean = Matrix::from_fn(1, 4, |_, c| (0..5).map(|r| t.get(r, c)).sum::<f64>() / 5.0);
        let oracle = Matrix::from_fn(3, 4, |r, c| u.get(r, c) + 0.8 * mean.get(0, c));
        assert!(
            naive_interaction_matrix(&u, &t, 0.8)
                .unwrap()
                .max_abs_diff(&oracle)
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn projected_cases() {
        let mut rng = RngStream::new(12, 0);
        let q: Matrix<f64> = rng.normal_matrix(3, 4, 1.0);
        let t: Matrix<f64> = rng.normal_matrix(5, 4, 1.0);
        let id = Matrix::identity(4);
        let (plain, _) = task_centric_attention(&q, &t, "a", "t").unwrap();
        let proj = projected_attention(&q, &t, &id, &id, &id).unwrap();
        assert!(proj.max_abs_diff(&plain).unwrap() < 1e-12);
        let zero = Matrix::zeros(4, 4);
        assert_eq!(
            projected_attention(&q, &t, &id, &id, &zero).unwrap(),
            Matrix::zeros(3, 4)
        );

        let wq: Matrix<f64> = rng.normal_matrix(4, 4, 0.5);
        let wk: Matrix<f64> = rng.normal_matrix(4, 4, 0.5);
        let wv: Matrix<f64> = rng.normal_matrix(4, 4, 0.5);
        let pq = q.matmul(&wq.transpose()).unwrap();
        let pk = t.matmul(&wk.transpose()).unwrap();
        let pv = t.matmul(&wv.transpose()).unwrap();
        let out = projected_attention(&q, &t, &wq, &wk, &wv).unwrap();
        assert!(out.max_abs_diff(&oracle_attend(&pq, &pk, &pv)).unwrap() < 1e-12);
    }

    #[test]
    fn extra_pair_cases() {
        let q = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let key = Matrix::from_rows(&[&[-1.0, 0.5]]);
        let out = extra_pair_attention(&q, &key).unwrap();
        assert_eq!(out, Matrix::from_rows(&[&[-1.0, 0.5], &[-1.0, 0.5]]));
        let mut rng = RngStream::new(13, 0);
        let q: Matrix<f64> = rng.normal_matrix(3, 2, 1.0);
        let k: Matrix<f64> = rng.normal_matrix(4, 2, 1.0);
        assert!(
            extra_pair_attention(&q, &k)
                .unwrap()
                .max_abs_diff(&oracle_attend(&q, &k, &k))
                .unwrap()
                < 1e-12
        );
    }
}
