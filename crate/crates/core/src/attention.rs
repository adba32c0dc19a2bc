//! Scaled dot-product attention and its two extensions: cross-frame
//! attention over replayed first-frame keys/values, and additive
//! frame-relationship bias.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `softmax(q k^T / sqrt(d) + bias) v`. `q: [B, Lq, d]`, `k: [B, Lk, d]`,
/// `v: [B, Lk, dv]`; `bias` broadcasts against `[B, Lq, Lk]`.
/// Returns the output and the attention weights.
pub fn attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = *q.shape().last().ok_or_else(|| Error::shape("empty query"))?;
    let scale = T::one() / T::cst(d as f64).sqrt();
    let mut logits = q.matmul(k.transpose_last())?.scale(scale);
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    let a = logits.softmax();
    Ok((a.matmul(v)?, a))
}

/// Query/key/value triple for joint spatiotemporal attention, each
/// `[b, f*h*w, d]`.
#[derive(Clone, Debug)]
pub struct AttentionTensors<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AttentionTensors<T> {
    pub fn head_dim(&self) -> usize {
        *self.q.shape().last().unwrap_or(&0)
    }
}

/// Output and weights of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    pub weights: Tensor<T>,
}

/// `A = softmax(Q K^T / sqrt(d) + S_ext)`, output `A V`.
pub fn biased_attention<T: Scalar>(
    t: &AttentionTensors<T>,
    s_ext: &Tensor<T>,
) -> Result<AttentionOutput<T>> {
    check_rank3(&t.q, "q")?;
    check_rank3(&t.k, "k")?;
    check_rank3(&t.v, "v")?;
    let (b, lq, lk) = (t.q.dim(0), t.q.dim(1), t.k.dim(1));
    let bs = s_ext.shape();
    if bs.len() != 3 || (bs[0] != b && bs[0] != 1) || bs[1] != lq || bs[2] != lk {
        return Err(Error::shape(format!(
            "bias {:?} incongruent with logits [{b}, {lq}, {lk}]",
            bs
        )));
    }
    let tape = Tape::new();
    let (q, k, v) = (
        tape.leaf(t.q.clone()),
        tape.leaf(t.k.clone()),
        tape.leaf(t.v.clone()),
    );
    let bias = tape.leaf(s_ext.clone());
    let (o, a) = attend(q, k, v, Some(bias))?;
    Ok(AttentionOutput {
        output: o.value().as_ref().clone(),
        weights: a.value().as_ref().clone(),
    })
}

/// Attention of frame `i` over its own tokens concatenated with the replayed
/// first-frame keys/values. `qi, ki: [L, d]`, `vi: [L, dv]`,
/// `k1c: [L1, d]`, `v1c: [L1, dv]`; `L1 = 0` gives plain self-attention.
pub fn cross_frame_attention<T: Scalar>(
    qi: &Tensor<T>,
    ki: &Tensor<T>,
    vi: &Tensor<T>,
    k1c: &Tensor<T>,
    v1c: &Tensor<T>,
) -> Result<AttentionOutput<T>> {
    for (t, n) in [(qi, "q"), (ki, "k"), (vi, "v"), (k1c, "k1c"), (v1c, "v1c")] {
        if t.rank() != 2 {
            return Err(Error::shape(format!("{n} must be [L, d], got {:?}", t.shape())));
        }
    }
    if ki.dim(1) != k1c.dim(1) || qi.dim(1) != ki.dim(1) {
        return Err(Error::Trajectory(format!(
            "head dimension mismatch: frame {} vs replayed {}",
            ki.dim(1),
            k1c.dim(1)
        )));
    }
    if vi.dim(1) != v1c.dim(1) || k1c.dim(0) != v1c.dim(0) || ki.dim(0) != vi.dim(0) {
        return Err(Error::Trajectory(format!(
            "key/value mismatch: v {:?} vs v1c {:?}",
            vi.shape(),
            v1c.shape()
        )));
    }
    let tape = Tape::new();
    let lift = |t: &Tensor<T>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        tape.leaf(t.reshape(&s).expect("rank lift"))
    };
    let k = tape.concat(&[lift(ki), lift(k1c)], 1)?;
    let v = tape.concat(&[lift(vi), lift(v1c)], 1)?;
    let (o, a) = attend(lift(qi), k, v, None)?;
    let out = o.value();
    let w = a.value();
    Ok(AttentionOutput {
        output: out.reshape(&out.shape()[1..])?,
        weights: w.reshape(&w.shape()[1..])?,
    })
}

fn check_rank3<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::shape(format!("{name} must be rank 3, got {:?}", t.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Straight-line softmax attention for one query row set.
    fn naive(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], bias: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .enumerate()
            .map(|(i, qr)| {
                let logits: Vec<f64> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kr)| {
                        qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt() + bias[i][j]
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let n = *t.shape().last().unwrap();
        t.data().chunks(n).map(|c| c.to_vec()).collect()
    }

    #[test]
    fn zero_bias_is_plain_attention() {
        let mut r = rng::from_seed(5);
        let t = AttentionTensors {
            q: Tensor::<f64>::randn(&[1, 4, 3], 1.0, &mut r),
            k: Tensor::randn(&[1, 4, 3], 1.0, &mut r),
            v: Tensor::randn(&[1, 4, 2], 1.0, &mut r),
        };
        let out = biased_attention(&t, &Tensor::zeros(&[1, 4, 4])).unwrap();
        let want = naive(&rows(&t.q), &rows(&t.k), &rows(&t.v), &vec![vec![0.0; 4]; 4]);
        for (a, b) in rows(&out.output).iter().zip(&want) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bias_shape_mismatch_is_an_error() {
        let t = AttentionTensors {
            q: Tensor::<f64>::zeros(&[1, 4, 3]),
            k: Tensor::zeros(&[1, 4, 3]),
            v: Tensor::zeros(&[1, 4, 2]),
        };
        assert!(matches!(
            biased_attention(&t, &Tensor::zeros(&[1, 3, 4])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn empty_replay_is_self_attention() {
        let mut r = rng::from_seed(6);
        let q = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
        let k = Tensor::randn(&[4, 3], 1.0, &mut r);
        let v = Tensor::randn(&[4, 2], 1.0, &mut r);
        let e = Tensor::zeros(&[0, 3]);
        let ev = Tensor::zeros(&[0, 2]);
        let out = cross_frame_attention(&q, &k, &v, &e, &ev).unwrap();
        let want = naive(&rows(&q), &rows(&k), &rows(&v), &vec![vec![0.0; 4]; 4]);
        for (a, b) in rows(&out.output).iter().zip(&want) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(out.weights.shape(), &[4, 4]);
    }

    #[test]
    fn head_dim_mismatch_is_trajectory_error() {
        let q = Tensor::<f64>::zeros(&[4, 3]);
        let k1 = Tensor::zeros(&[4, 2]);
        let v1 = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            cross_frame_attention(&q, &q, &q, &k1, &v1),
            Err(Error::Trajectory(_))
        ));
    }
}
