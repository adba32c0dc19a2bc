//! Soft motion adapter: temporal self-attention over the frame axis, added
//! back through a residual gated by a trainable scalar that starts at zero.

use rand::Rng;

use crate::attention::attend;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of one insertion site.
#[derive(Clone, Debug, PartialEq)]
pub struct SmaSite<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub alpha: T,
}

impl<T: Scalar> SmaSite<T> {
    /// Random projections, gain exactly zero.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        let mut w = || Tensor::randn(&[channels, channels], std, rng);
        Self {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            alpha: T::zero(),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.dim(0)
    }
}

/// Tape handles for one site.
#[derive(Clone, Copy)]
pub struct SmaVars<'t, T: Scalar> {
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub alpha: Var<'t, T>,
}

impl<'t, T: Scalar> SmaVars<'t, T> {
    pub fn lift(tape: &'t Tape<T>, site: &SmaSite<T>) -> Self {
        Self {
            wq: tape.leaf(site.wq.clone()),
            wk: tape.leaf(site.wk.clone()),
            wv: tape.leaf(site.wv.clone()),
            wo: tape.leaf(site.wo.clone()),
            alpha: tape.leaf(Tensor::scalar(site.alpha)),
        }
    }
}

/// `(b, c, f, h, w) -> ((b*h*w), f, c)`.
pub fn temporal_reshape<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, f, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "temporal reshape needs a 5-axis array, got {:?}",
            x.shape()
        )));
    };
    x.permute(&[0, 3, 4, 2, 1])?.into_reshape(&[b * h * w, f, c])
}

/// Inverse of [`temporal_reshape`].
pub fn temporal_unreshape<T: Scalar>(x: &Tensor<T>, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let &[n, f, c] = x.shape() else {
        return Err(Error::shape(format!("expected ((b*h*w), f, c), got {:?}", x.shape())));
    };
    if n != b * h * w {
        return Err(Error::shape(format!("leading axis {n} != {b}*{h}*{w}")));
    }
    x.reshape(&[b, h, w, f, c])?.permute(&[0, 4, 3, 1, 2])
}

/// Sinusoidal frame-position table `[f, c]`.
pub fn frame_positions<T: Scalar>(f: usize, c: usize) -> Tensor<T> {
    Tensor::from_fn(&[f, c], |i| {
        let (pos, ch) = ((i / c) as f64, i % c);
        let freq = 1.0 / 10000f64.powf((2 * (ch / 2)) as f64 / c as f64);
        T::cst(if ch % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

/// Self-attention over the frame axis of `x: [B, f, C]`, with frame
/// positions added before the projections.
pub fn temporal_layer_var<'t, T: Scalar>(x: Var<'t, T>, p: &SmaVars<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape(format!("temporal layer input {s:?}")));
    }
    let pos = x.tape().leaf(frame_positions::<T>(s[1], s[2]).reshape(&[1, s[1], s[2]])?);
    let xp = x.add(pos)?;
    let (o, _) = attend(xp.matmul(p.wq)?, xp.matmul(p.wk)?, xp.matmul(p.wv)?, None)?;
    o.matmul(p.wo)
}

/// Gated residual on bottleneck tokens `[b*f, L, C]`.
pub fn sma_tokens_var<'t, T: Scalar>(
    tokens: Var<'t, T>,
    b: usize,
    f: usize,
    p: &SmaVars<'t, T>,
) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    let (l, c) = (s[1], s[2]);
    if f == 0 || s[0] != b * f {
        return Err(Error::shape(format!("sma tokens {s:?} for b={b} f={f}")));
    }
    let seq = tokens
        .reshape(&[b, f, l, c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * l, f, c])?;
    let tl = temporal_layer_var(seq, p)?
        .reshape(&[b, l, f, c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * f, l, c])?;
    let gate = p.alpha.reshape(&[1, 1, 1])?;
    tokens.add(tl.mul(gate)?)
}

/// `TemporalLayer(F)` for `F: (b, c, f, h, w)`, same layout out.
pub fn temporal_layer<T: Scalar>(x: &Tensor<T>, site: &SmaSite<T>) -> Result<Tensor<T>> {
    let &[b, _, f, h, w] = x.shape() else {
        return Err(Error::shape(format!("sma input must be 5-axis, got {:?}", x.shape())));
    };
    if f == 0 {
        return Err(Error::shape("sma input has zero frames"));
    }
    let tape = Tape::new();
    let p = SmaVars::lift(&tape, site);
    let seq = tape.leaf(temporal_reshape(x)?);
    let tl = temporal_layer_var(seq, &p)?;
    temporal_unreshape(&tl.value(), b, h, w)
}

/// `F_out = F_in + alpha * TemporalLayer(F_in)`.
pub fn sma_forward<T: Scalar>(x: &Tensor<T>, site: &SmaSite<T>) -> Result<Tensor<T>> {
    let tl = temporal_layer(x, site)?;
    let a = site.alpha;
    x.zip_map(&tl, |xi, ti| xi + a * ti)
}
