//! Editing-guided propagation: predicts an `f x f` frame-relationship matrix
//! from per-frame features and expands it into an additive attention bias.
//!
//! `S = MLP(Reshape(GAP(Conv(F_in))))`; entry `S[i, j]` biases how much the
//! tokens of frame `i` attend to the tokens of frame `j`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Off-diagonal bias produced by a freshly initialised module.
pub const INIT_OFF_DIAGONAL: f64 = -10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EpmParams<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub mlp1_w: Tensor<T>,
    pub mlp1_b: Tensor<T>,
    pub mlp2_w: Tensor<T>,
    pub mlp2_b: Tensor<T>,
}

/// Bias of the final MLP layer at initialisation: 0 on the diagonal,
/// [`INIT_OFF_DIAGONAL`] elsewhere.
pub fn init_bias<T: Scalar>(frames: usize) -> Tensor<T> {
    Tensor::from_fn(&[frames * frames], |i| {
        if i / frames == i % frames {
            T::zero()
        } else {
            T::cst(INIT_OFF_DIAGONAL)
        }
    })
}

impl<T: Scalar> EpmParams<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, frames: usize, hidden: usize, rng: &mut R) -> Self {
        let conv_std = 1.0 / ((channels * 9) as f64).sqrt();
        let mlp_std = 1.0 / ((channels * frames) as f64).sqrt();
        Self {
            conv1_w: Tensor::randn(&[channels, channels, 3, 3], conv_std, rng),
            conv1_b: Tensor::zeros(&[channels]),
            conv2_w: Tensor::randn(&[channels, channels, 3, 3], conv_std, rng),
            conv2_b: Tensor::zeros(&[channels]),
            mlp1_w: Tensor::randn(&[channels * frames, hidden], mlp_std, rng),
            mlp1_b: Tensor::zeros(&[hidden]),
            mlp2_w: Tensor::zeros(&[hidden, frames * frames]),
            mlp2_b: init_bias(frames),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1_w.dim(0)
    }

    pub fn frames(&self) -> usize {
        (self.mlp2_b.len() as f64).sqrt().round() as usize
    }
}

#[derive(Clone, Copy)]
pub struct EpmVars<'t, T: Scalar> {
    pub conv1_w: Var<'t, T>,
    pub conv1_b: Var<'t, T>,
    pub conv2_w: Var<'t, T>,
    pub conv2_b: Var<'t, T>,
    pub mlp1_w: Var<'t, T>,
    pub mlp1_b: Var<'t, T>,
    pub mlp2_w: Var<'t, T>,
    pub mlp2_b: Var<'t, T>,
}

impl<'t, T: Scalar> EpmVars<'t, T> {
    pub fn lift(tape: &'t Tape<T>, p: &EpmParams<T>) -> Self {
        Self {
            conv1_w: tape.leaf(p.conv1_w.clone()),
            conv1_b: tape.leaf(p.conv1_b.clone()),
            conv2_w: tape.leaf(p.conv2_w.clone()),
            conv2_b: tape.leaf(p.conv2_b.clone()),
            mlp1_w: tape.leaf(p.mlp1_w.clone()),
            mlp1_b: tape.leaf(p.mlp1_b.clone()),
            mlp2_w: tape.leaf(p.mlp2_w.clone()),
            mlp2_b: tape.leaf(p.mlp2_b.clone()),
        }
    }
}

/// Scores from channel-first features `[(b*f), C, h, w]`; returns `[b, f, f]`.
pub fn epm_scores_var<'t, T: Scalar>(
    x: Var<'t, T>,
    frames: usize,
    p: &EpmVars<'t, T>,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || frames == 0 || s[0] % frames != 0 {
        return Err(Error::shape(format!(
            "epm input {s:?} not divisible into {frames} frames"
        )));
    }
    let (bf, c, h, w) = (s[0], s[1], s[2], s[3]);
    let b = bf / frames;
    let expected = p.mlp2_b.shape()[0];
    if expected != frames * frames {
        return Err(Error::shape(format!(
            "epm built for {} frames, input has {frames}",
            (expected as f64).sqrt()
        )));
    }
    let conv = x
        .conv2d(p.conv1_w, p.conv1_b)?
        .silu()
        .conv2d(p.conv2_w, p.conv2_b)?;
    let pooled = conv.reshape(&[bf, c, h * w])?.mean_last();
    let flat = pooled.reshape(&[b, frames * c])?;
    let hidden = flat.matmul(p.mlp1_w)?.add(bias_row(p.mlp1_b)?)?.silu();
    let out = hidden.matmul(p.mlp2_w)?.add(bias_row(p.mlp2_b)?)?;
    out.reshape(&[b, frames, frames])
}

fn bias_row<'t, T: Scalar>(b: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = b.shape()[0];
    b.reshape(&[1, n])
}

/// `S` for channel-last features `F_in: [(b*f), h, w, c]`.
pub fn epm_scores<T: Scalar>(f_in: &Tensor<T>, frames: usize, params: &EpmParams<T>) -> Result<Tensor<T>> {
    if f_in.rank() != 4 {
        return Err(Error::shape(format!("epm input must be rank 4, got {:?}", f_in.shape())));
    }
    let tape = Tape::new();
    let p = EpmVars::lift(&tape, params);
    let x = tape.leaf(f_in.permute(&[0, 3, 1, 2])?);
    let s = epm_scores_var(x, frames, &p)?;
    Ok(s.value().as_ref().clone())
}

/// Block-constant expansion `[b, f, f] -> [b, f*L, f*L]` with `L` tokens per
/// frame.
pub fn expand_bias_var<'t, T: Scalar>(s: Var<'t, T>, tokens: usize) -> Result<Var<'t, T>> {
    let sh = s.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::shape(format!("S must be [b, f, f], got {sh:?}")));
    }
    let (b, f) = (sh[0], sh[1]);
    let zeros = s.tape().leaf(Tensor::zeros(&[b, f, tokens, f, tokens]));
    zeros
        .add(s.reshape(&[b, f, 1, f, 1])?)?
        .reshape(&[b, f * tokens, f * tokens])
}

pub fn expand_bias<T: Scalar>(s: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let v = expand_bias_var(tape.leaf(s.clone()), h * w)?;
    Ok(v.value().as_ref().clone())
}

/// Masking sentinel: diagonal 0, off-diagonal negative infinity.
pub fn sentinel_scores<T: Scalar>(b: usize, f: usize) -> Tensor<T> {
    Tensor::from_fn(&[b, f, f], |i| {
        if (i / f) % f == i % f {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

/// Column-wise mean of `S` averaged over layers: `[b, f]`.
pub fn importance_sequence<T: Scalar>(layers: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Argument("importance sequence of zero layers".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape(format!("S must be [b, f, f], got {shape:?}")));
    }
    let (b, f) = (shape[0], shape[1]);
    let mut mean = Tensor::<T>::zeros(&shape);
    for s in layers {
        s.expect_same_shape(first)?;
        mean.add_assign_scaled(s, T::one() / T::cst(layers.len() as f64));
    }
    let inv = T::one() / T::cst(f as f64);
    Ok(Tensor::from_fn(&[b, f], |k| {
        let (bi, j) = (k / f, k % f);
        (0..f).map(|i| mean.at(&[bi, i, j])).sum::<T>() * inv
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randomised(c: usize, f: usize, hidden: usize, seed: u64) -> EpmParams<f64> {
        let mut r = rng::from_seed(seed);
        let mut p = EpmParams::init(c, f, hidden, &mut r);
        p.conv1_b = Tensor::randn(&[c], 0.3, &mut r);
        p.conv2_b = Tensor::randn(&[c], 0.3, &mut r);
        p.mlp1_b = Tensor::randn(&[hidden], 0.3, &mut r);
        p.mlp2_w = Tensor::randn(&[hidden, f * f], 0.5, &mut r);
        p
    }

    #[test]
    fn init_scores_are_exact() {
        let mut r = rng::from_seed(1);
        let p = EpmParams::<f64>::init(4, 3, 8, &mut r);
        let x = Tensor::randn(&[6, 2, 2, 4], 1.0, &mut r);
        let s = epm_scores(&x, 3, &p).unwrap();
        let want = [0.0, -10.0, -10.0, -10.0, 0.0, -10.0, -10.0, -10.0, 0.0];
        assert_eq!(s.shape(), &[2, 3, 3]);
        for b in 0..2 {
            assert_eq!(&s.data()[b * 9..(b + 1) * 9], &want);
        }
    }

    #[test]
    fn constant_input_is_size_independent() {
        let p = randomised(2, 2, 4, 2);
        // Zero padding breaks constancy at the border; keep only centre taps.
        let mut p0 = p.clone();
        for w in [&mut p0.conv1_w, &mut p0.conv2_w] {
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                if i % 9 != 4 {
                    *v = 0.0;
                }
            }
        }
        let small = Tensor::full(&[2, 2, 2, 2], 0.7);
        let large = Tensor::full(&[2, 5, 3, 2], 0.7);
        let a = epm_scores(&small, 2, &p0).unwrap();
        let b = epm_scores(&large, 2, &p0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    fn naive_conv(x: &[Vec<Vec<f64>>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
        let (co, ci) = (w.dim(0), w.dim(1));
        let (h, wd) = (x[0].len(), x[0][0].len());
        let mut out = vec![vec![vec![0.0; wd]; h]; co];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as i64 + ky as i64 - 1;
                                let sx = xx as i64 + kx as i64 - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += w.at(&[o, c, ky, kx]) * x[c][sy as usize][sx as usize];
                                }
                            }
                        }
                    }
                    out[o][y][xx] = acc;
                }
            }
        }
        out
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    #[test]
    fn scores_match_straight_line_oracle() {
        let (c, f, hid, h, w) = (3, 2, 5, 3, 2);
        let p = randomised(c, f, hid, 3);
        let mut r = rng::from_seed(4);
        let x = Tensor::<f64>::randn(&[f, h, w, c], 1.0, &mut r);
        let s = epm_scores(&x, f, &p).unwrap();

        let mut flat = Vec::new();
        for fi in 0..f {
            let img: Vec<Vec<Vec<f64>>> = (0..c)
                .map(|ci| (0..h).map(|y| (0..w).map(|xx| x.at(&[fi, y, xx, ci])).collect()).collect())
                .collect();
            let a = naive_conv(&img, &p.conv1_w, &p.conv1_b);
            let a: Vec<Vec<Vec<f64>>> = a
                .into_iter()
                .map(|pl| pl.into_iter().map(|row| row.into_iter().map(silu).collect()).collect())
                .collect();
            let bconv = naive_conv(&a, &p.conv2_w, &p.conv2_b);
            for plane in bconv {
                let sum: f64 = plane.iter().flatten().sum();
                flat.push(sum / (h * w) as f64);
            }
        }
        let hidden: Vec<f64> = (0..hid)
            .map(|j| {
                silu(p.mlp1_b.data()[j] + (0..f * c).map(|i| flat[i] * p.mlp1_w.at(&[i, j])).sum::<f64>())
            })
            .collect();
        for k in 0..f * f {
            let v = p.mlp2_b.data()[k] + (0..hid).map(|j| hidden[j] * p.mlp2_w.at(&[j, k])).sum::<f64>();
            assert!((s.data()[k] - v).abs() < 1e-10, "{} vs {v}", s.data()[k]);
        }
    }

    #[test]
    fn indivisible_batch_rejected() {
        let mut r = rng::from_seed(5);
        let p = EpmParams::<f64>::init(2, 3, 4, &mut r);
        assert!(matches!(
            epm_scores(&Tensor::zeros(&[4, 2, 2, 2]), 3, &p),
            Err(Error::Shape(_))
        ));
        assert!(epm_scores(&Tensor::zeros(&[4, 2, 2, 2]), 2, &p).is_err());
    }

    #[test]
    fn expansion_examples() {
        let s1 = Tensor::<f64>::new(&[1, 1, 1], vec![-3.0]).unwrap();
        let e = expand_bias(&s1, 2, 2).unwrap();
        assert_eq!(e.shape(), &[1, 4, 4]);
        assert!(e.data().iter().all(|&v| v == -3.0));

        let s2 = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(expand_bias(&s2, 1, 1).unwrap().data(), s2.data());

        let e = expand_bias(&s2, 2, 2).unwrap();
        let l = 4;
        for i in 0..2 {
            for p in 0..l {
                for j in 0..2 {
                    for q in 0..l {
                        assert_eq!(e.at(&[0, i * l + p, j * l + q]), s2.at(&[0, i, j]));
                    }
                }
            }
        }
    }

    #[test]
    fn importance_examples() {
        let s = init_bias::<f64>(4).reshape(&[1, 4, 4]).unwrap();
        let imp = importance_sequence(&[s.clone()]).unwrap();
        for &v in imp.data() {
            assert!((v - (-30.0 / 4.0)).abs() < 1e-12);
        }
        let mut raised = s.clone();
        for i in 0..4 {
            raised.set(&[0, i, 2], 5.0);
        }
        let imp = importance_sequence(&[raised]).unwrap();
        let best = (0..4).max_by(|&a, &b| imp.data()[a].total_cmp(&imp.data()[b])).unwrap();
        assert_eq!(best, 2);
        assert!(importance_sequence::<f64>(&[]).is_err());
    }

    #[test]
    fn importance_matches_double_loop() {
        let mut r = rng::from_seed(6);
        let layers: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, 3, 3], 1.0, &mut r)).collect();
        let s = importance_sequence(&layers).unwrap();
        for b in 0..2 {
            for j in 0..3 {
                let mut acc = 0.0;
                for l in &layers {
                    for i in 0..3 {
                        acc += l.at(&[b, i, j]);
                    }
                }
                assert!((s.at(&[b, j]) - acc / 9.0).abs() < 1e-12);
            }
        }
    }
}
