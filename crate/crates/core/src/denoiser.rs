//! Noise-prediction network with dual (image, text) conditioning.
//!
//! Layout per frame: the noisy latent and the source latent are concatenated
//! channel-wise, encoded by two convolutions (the second after 2x pooling),
//! then processed at the bottleneck by `layers` blocks of self-attention,
//! text cross-attention and a feed-forward layer, each followed by an
//! optional temporal adapter. A skip connection and two convolutions decode
//! back to latent resolution.
//!
//! Video hooks change only the self-attention sites: replayed first-frame
//! keys/values are appended to every frame's keys/values, and with frame
//! relationship scores enabled the frames attend jointly under an additive
//! block-constant bias.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::epm::{self, EpmParams, EpmVars};
use crate::error::{Error, Result};
use crate::fsutil::sha256_hex;
use crate::guidance::GuidanceConfig;
use crate::latent::LATENT_CHANNELS;
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::schedule::{ddim_step, make_schedule, NoiseSchedule};
use crate::temporal::{self, SmaSite, SmaVars};
use crate::tensor::Tensor;
use crate::text::{TextEmbedding, TEXT_DIM};
use crate::trajectory::{EditingTrajectory, KvCapture, Replayer, TrajectoryRecorder, CFG_BRANCHES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
    /// Frame count the relationship-score MLP is built for.
    pub epm_frames: usize,
    pub epm_hidden: usize,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            layers: 2,
            time_dim: 32,
            ffn_mult: 2,
            epm_frames: 8,
            epm_hidden: 32,
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden and layers must be positive, time_dim even: {self:?}"
            )));
        }
        if self.ffn_mult == 0 || self.epm_frames == 0 || self.epm_hidden == 0 {
            return Err(Error::Config("ffn_mult, epm_frames, epm_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// How frame-relationship scores bias joint attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EpmMode {
    /// Frames attend only within themselves.
    Off,
    /// Joint attention biased by the learned scores.
    Learned,
    /// Joint attention with off-diagonal scores at negative infinity.
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoCtx {
    pub frames: usize,
    pub sma: bool,
    pub epm: EpmMode,
}

/// Optional extensions of a forward pass.
#[derive(Clone, Copy, Default)]
pub struct Hooks<'a, T: Scalar> {
    pub video: Option<VideoCtx>,
    pub record: Option<&'a KvCapture<T>>,
    pub replay: Option<&'a Replayer<'a, T>>,
    pub epm_capture: Option<&'a RefCell<Vec<Tensor<T>>>>,
}

/// One training example: latents `[f, 4, h, w]` (`f = 1` for images).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub text: TextEmbedding<T>,
    pub provenance: String,
}

/// Random quantities of one training example.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps: Tensor<T>,
    pub drop_image: bool,
    pub drop_text: bool,
}

pub const COND_DROPOUT: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    schedule: NoiseSchedule,
}

/// `x w + b`, with `b` broadcast over every leading axis of `x`.
fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    let mut shape = vec![1; y.shape().len() - 1];
    shape.push(b.shape()[0]);
    y.add(b.reshape(&shape)?)
}

/// Sinusoidal embedding of a timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        T::cst(if i < half { a.sin() } else { a.cos() })
    })
}

/// Repeats a rank-2 tensor `n` times along a new leading axis.
fn repeat_leading<T: Scalar>(t: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut shape = vec![n];
    shape.extend_from_slice(t.shape());
    let m = t.len();
    Tensor::from_fn(&shape, |i| t.data()[i % m])
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let s = &config.schedule;
        let schedule = make_schedule(s.train_steps, s.beta_min, s.beta_max)?;
        let params = Self::init_params(&config);
        Ok(Self {
            config,
            params,
            schedule,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_parts(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(config)?;
        let want: Vec<(String, Vec<usize>)> = m
            .params
            .iter()
            .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = params
            .iter()
            .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
            .collect();
        if want != got {
            let expected = m.digest();
            m.params = params;
            return Err(Error::Topology {
                expected,
                found: m.digest(),
            });
        }
        m.params = params;
        Ok(m)
    }

    fn init_params(c: &DenoiserConfig) -> ParamStore<T> {
        let mut p = ParamStore::new();
        let h = c.hidden;
        let ffn = h * c.ffn_mult;
        let seed = c.init_seed;
        let put = |p: &mut ParamStore<T>, name: &str, shape: &[usize], fan_in: usize, gain: f64| {
            let mut r = rng::stream(seed, &["param", name]);
            if gain == 0.0 {
                p.insert(name, Tensor::zeros(shape));
            } else {
                p.insert_init(name, shape, fan_in, gain, &mut r);
            }
        };
        let cin = 2 * LATENT_CHANNELS;
        put(&mut p, "time.l1_w", &[c.time_dim, h], c.time_dim, 1.0);
        put(&mut p, "time.l1_b", &[h], 1, 0.0);
        put(&mut p, "time.l2_w", &[h, h], h, 1.0);
        put(&mut p, "time.l2_b", &[h], 1, 0.0);
        put(&mut p, "time.mid_w", &[h, h], h, 1.0);
        put(&mut p, "time.film_enc_w", &[h, 2 * h], h, 0.5);
        put(&mut p, "time.film_dec_w", &[h, 2 * h], h, 0.5);
        put(&mut p, "enc.conv_in_w", &[h, cin, 3, 3], cin * 9, 1.0);
        put(&mut p, "enc.conv_in_b", &[h], 1, 0.0);
        put(&mut p, "enc.conv_down_w", &[h, h, 3, 3], h * 9, 1.0);
        put(&mut p, "enc.conv_down_b", &[h], 1, 0.0);
        for l in 0..c.layers {
            for n in ["q", "k", "v", "o"] {
                put(&mut p, &format!("mid.{l}.attn.w{n}"), &[h, h], h, 1.0);
            }
            put(&mut p, &format!("mid.{l}.xattn.wq"), &[h, h], h, 1.0);
            put(&mut p, &format!("mid.{l}.xattn.wk"), &[TEXT_DIM, h], TEXT_DIM, 1.0);
            put(&mut p, &format!("mid.{l}.xattn.wv"), &[TEXT_DIM, h], TEXT_DIM, 1.0);
            put(&mut p, &format!("mid.{l}.xattn.wo"), &[h, h], h, 1.0);
            put(&mut p, &format!("mid.{l}.ffn.w1"), &[h, ffn], h, 1.0);
            put(&mut p, &format!("mid.{l}.ffn.b1"), &[ffn], 1, 0.0);
            put(&mut p, &format!("mid.{l}.ffn.w2"), &[ffn, h], ffn, 1.0);
            put(&mut p, &format!("mid.{l}.ffn.b2"), &[h], 1, 0.0);

            let mut r = rng::stream(seed, &["sma", &l.to_string()]);
            let site = SmaSite::<T>::init(h, &mut r);
            p.insert(format!("sma.{l}.wq"), site.wq);
            p.insert(format!("sma.{l}.wk"), site.wk);
            p.insert(format!("sma.{l}.wv"), site.wv);
            p.insert(format!("sma.{l}.wo"), site.wo);
            p.insert(format!("sma.{l}.alpha"), Tensor::scalar(site.alpha));

            let mut r = rng::stream(seed, &["epm", &l.to_string()]);
            let e = EpmParams::<T>::init(h, c.epm_frames, c.epm_hidden, &mut r);
            p.insert(format!("epm.{l}.conv1_w"), e.conv1_w);
            p.insert(format!("epm.{l}.conv1_b"), e.conv1_b);
            p.insert(format!("epm.{l}.conv2_w"), e.conv2_w);
            p.insert(format!("epm.{l}.conv2_b"), e.conv2_b);
            p.insert(format!("epm.{l}.mlp1_w"), e.mlp1_w);
            p.insert(format!("epm.{l}.mlp1_b"), e.mlp1_b);
            p.insert(format!("epm.{l}.mlp2_w"), e.mlp2_w);
            p.insert(format!("epm.{l}.mlp2_b"), e.mlp2_b);
        }
        put(&mut p, "dec.conv1_w", &[h, 2 * h, 3, 3], 2 * h * 9, 1.0);
        put(&mut p, "dec.conv1_b", &[h], 1, 0.0);
        put(&mut p, "dec.conv_out_w", &[LATENT_CHANNELS, h, 3, 3], h * 9, 0.3);
        put(&mut p, "dec.conv_out_b", &[LATENT_CHANNELS], 1, 0.0);
        p
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Identifiers of the self-attention sites, in forward order.
    pub fn layer_ids(&self) -> Vec<usize> {
        (0..self.config.layers).collect()
    }

    /// SHA-256 over the architecture and every parameter's name and shape.
    pub fn digest(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "hidden={};layers={};time_dim={};ffn_mult={};epm_frames={};epm_hidden={};T={};beta=[{},{}]\n",
            c.hidden,
            c.layers,
            c.time_dim,
            c.ffn_mult,
            c.epm_frames,
            c.epm_hidden,
            c.schedule.train_steps,
            c.schedule.beta_min,
            c.schedule.beta_max
        );
        for (k, v) in self.params.iter() {
            s.push_str(&format!("{k}:{:?}\n", v.shape()));
        }
        sha256_hex(s.as_bytes())
    }

    pub fn sma_site(&self, l: usize) -> Result<SmaSite<T>> {
        Ok(SmaSite {
            wq: self.params.get(&format!("sma.{l}.wq"))?.clone(),
            wk: self.params.get(&format!("sma.{l}.wk"))?.clone(),
            wv: self.params.get(&format!("sma.{l}.wv"))?.clone(),
            wo: self.params.get(&format!("sma.{l}.wo"))?.clone(),
            alpha: self.params.get(&format!("sma.{l}.alpha"))?.data()[0],
        })
    }

    pub fn set_sma_alpha(&mut self, l: usize, alpha: T) -> Result<()> {
        self.params.get_mut(&format!("sma.{l}.alpha"))?.data_mut()[0] = alpha;
        Ok(())
    }

    pub fn sma_alphas(&self) -> Vec<f64> {
        (0..self.config.layers)
            .map(|l| self.sma_site(l).map(|s| s.alpha.as_f64()).unwrap_or(f64::NAN))
            .collect()
    }

    pub fn epm_params(&self, l: usize) -> Result<EpmParams<T>> {
        let g = |n: &str| self.params.get(&format!("epm.{l}.{n}")).cloned();
        Ok(EpmParams {
            conv1_w: g("conv1_w")?,
            conv1_b: g("conv1_b")?,
            conv2_w: g("conv2_w")?,
            conv2_b: g("conv2_b")?,
            mlp1_w: g("mlp1_w")?,
            mlp1_b: g("mlp1_b")?,
            mlp2_w: g("mlp2_w")?,
            mlp2_b: g("mlp2_b")?,
        })
    }

    fn sma_vars<'t>(&self, bd: &Bound<'t, T>, l: usize) -> Result<SmaVars<'t, T>> {
        Ok(SmaVars {
            wq: bd.var(&format!("sma.{l}.wq"))?,
            wk: bd.var(&format!("sma.{l}.wk"))?,
            wv: bd.var(&format!("sma.{l}.wv"))?,
            wo: bd.var(&format!("sma.{l}.wo"))?,
            alpha: bd.var(&format!("sma.{l}.alpha"))?,
        })
    }

    fn epm_vars<'t>(&self, bd: &Bound<'t, T>, l: usize) -> Result<EpmVars<'t, T>> {
        let g = |n: &str| bd.var(&format!("epm.{l}.{n}"));
        Ok(EpmVars {
            conv1_w: g("conv1_w")?,
            conv1_b: g("conv1_b")?,
            conv2_w: g("conv2_w")?,
            conv2_b: g("conv2_b")?,
            mlp1_w: g("mlp1_w")?,
            mlp1_b: g("mlp1_b")?,
            mlp2_w: g("mlp2_w")?,
            mlp2_b: g("mlp2_b")?,
        })
    }

    /// Predicted noise for `z: [n, 4, h, w]`. `None` conditions are the null
    /// conditions: a zero source latent and the null text embedding.
    pub fn forward(
        &self,
        z: &Tensor<T>,
        c_image: Option<&Tensor<T>>,
        c_text: Option<&TextEmbedding<T>>,
        t: usize,
        hooks: &Hooks<'_, T>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bd = self.params.bind(&tape);
        let zeros;
        let ci = match c_image {
            Some(c) => c,
            None => {
                zeros = Tensor::zeros(z.shape());
                &zeros
            }
        };
        let null;
        let ct = match c_text {
            Some(c) => c,
            None => {
                null = TextEmbedding::null();
                &null
            }
        };
        let out = self.forward_var(&bd, tape.leaf(z.clone()), tape.leaf(ci.clone()), &ct.matrix, t, hooks)?;
        let v = out.value();
        Ok(v.as_ref().clone())
    }

    pub(crate) fn forward_var<'t>(
        &self,
        bd: &Bound<'t, T>,
        z: Var<'t, T>,
        c_image: Var<'t, T>,
        text: &Tensor<T>,
        t: usize,
        hooks: &Hooks<'_, T>,
    ) -> Result<Var<'t, T>> {
        let tape = bd.tape();
        let zs = z.shape();
        if zs.len() != 4 || zs[1] != LATENT_CHANNELS {
            return Err(Error::shape(format!("latent must be [n, 4, h, w], got {zs:?}")));
        }
        if c_image.shape() != zs {
            return Err(Error::shape(format!(
                "source latent {:?} not congruent with {zs:?}",
                c_image.shape()
            )));
        }
        let (n, h, w) = (zs[0], zs[2], zs[3]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("latent spatial size {h}x{w} must be even")));
        }
        if text.rank() != 2 || text.dim(1) != TEXT_DIM {
            return Err(Error::shape(format!("text matrix {:?}", text.shape())));
        }
        self.schedule.alpha_bar(t)?;
        let frames = match hooks.video {
            Some(v) if v.frames == 0 || n % v.frames != 0 => {
                return Err(Error::shape(format!("{n} latents not divisible into {} frames", v.frames)))
            }
            Some(v) => v.frames,
            None => 1,
        };
        let b = n / frames;
        let c = self.config.hidden;

        let temb_h = tape.leaf(timestep_embedding::<T>(t, self.config.time_dim));
        let temb_h = linear(temb_h, bd.var("time.l1_w")?, bd.var("time.l1_b")?)?.silu();
        let temb = linear(temb_h, bd.var("time.l2_w")?, bd.var("time.l2_b")?)?;
        // Timestep-dependent scale and shift of a conv feature map.
        let film = |x: Var<'t, T>, w: &str| -> Result<Var<'t, T>> {
            let ss = temb_h.matmul(bd.var(w)?)?;
            let scale = ss.narrow(1, 0, c)?.reshape(&[1, c, 1, 1])?;
            let shift = ss.narrow(1, c, c)?.reshape(&[1, c, 1, 1])?;
            x.add(x.mul(scale)?)?.add(shift)
        };

        let x = tape.concat(&[z, c_image], 1)?;
        let h1 = x.conv2d(bd.var("enc.conv_in_w")?, bd.var("enc.conv_in_b")?)?;
        let h1 = film(h1, "time.film_enc_w")?
            .add(temb.reshape(&[1, c, 1, 1])?)?
            .silu();
        let (hh, ww) = (h / 2, w / 2);
        let l_tok = hh * ww;
        let d = h1
            .avg_pool2()?
            .conv2d(bd.var("enc.conv_down_w")?, bd.var("enc.conv_down_b")?)?
            .silu();
        let mut tok = d
            .reshape(&[n, c, l_tok])?
            .permute(&[0, 2, 1])?
            .add(temb.matmul(bd.var("time.mid_w")?)?.reshape(&[1, 1, c])?)?;

        let text_v = tape.leaf(text.clone());
        for l in 0..self.config.layers {
            tok = self.self_attention(bd, l, tok, b, frames, (hh, ww), hooks)?;
            tok = self.cross_attention(bd, l, tok, text_v)?;
            let p = |s: &str| bd.var(&format!("mid.{l}.ffn.{s}"));
            let f = linear(tok, p("w1")?, p("b1")?)?.silu();
            tok = tok.add(linear(f, p("w2")?, p("b2")?)?)?;
            if matches!(hooks.video, Some(VideoCtx { sma: true, .. })) {
                tok = temporal::sma_tokens_var(tok, b, frames, &self.sma_vars(bd, l)?)?;
            }
        }

        let up = tok.permute(&[0, 2, 1])?.reshape(&[n, c, hh, ww])?.upsample2();
        let cat = tape.concat(&[up, h1], 1)?;
        let d1 = cat.conv2d(bd.var("dec.conv1_w")?, bd.var("dec.conv1_b")?)?;
        let v = film(d1, "time.film_dec_w")?
            .silu()
            .conv2d(bd.var("dec.conv_out_w")?, bd.var("dec.conv_out_b")?)?;
        // The network predicts v = a*eps - s*x0; eps = s*z + a*v keeps the
        // implied clean-latent estimate a*z - s*v well conditioned at every t.
        let ab = self.schedule.alpha_bar(t)?;
        let (a, s) = (T::cst(ab.sqrt()), T::cst((1.0 - ab).sqrt()));
        z.scale(s).add(v.scale(a))
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attention<'t>(
        &self,
        bd: &Bound<'t, T>,
        l: usize,
        tok: Var<'t, T>,
        b: usize,
        frames: usize,
        (hh, ww): (usize, usize),
        hooks: &Hooks<'_, T>,
    ) -> Result<Var<'t, T>> {
        let tape = bd.tape();
        let p = |s: &str| bd.var(&format!("mid.{l}.attn.{s}"));
        let (n, lt, c) = {
            let s = tok.shape();
            (s[0], s[1], s[2])
        };
        let q = tok.matmul(p("wq")?)?;
        let k = tok.matmul(p("wk")?)?;
        let v = tok.matmul(p("wv")?)?;

        if let Some(cap) = hooks.record {
            if n != 1 {
                return Err(Error::Trajectory(format!("recording needs a single frame, got {n}")));
            }
            cap.borrow_mut().push((
                l,
                k.value().reshape(&[lt, c])?,
                v.value().reshape(&[lt, c])?,
            ));
        }
        let replay = match hooks.replay {
            Some(r) => {
                let (k1, v1) = r.kv(l)?;
                if k1.rank() != 2 || k1.dim(1) != c || v1.rank() != 2 || v1.dim(1) != c || k1.dim(0) != v1.dim(0) {
                    return Err(Error::Trajectory(format!(
                        "replayed K {:?} / V {:?} incompatible with head dimension {c}",
                        k1.shape(),
                        v1.shape()
                    )));
                }
                Some((k1, v1))
            }
            None => None,
        };

        let joint = match hooks.video {
            Some(VideoCtx { epm, .. }) if frames > 1 && epm != EpmMode::Off => Some(epm),
            _ => None,
        };
        let out = match joint {
            None => {
                let (mut keys, mut vals) = (k, v);
                if let Some((k1, v1)) = &replay {
                    keys = tape.concat(&[k, tape.leaf(repeat_leading(k1, n))], 1)?;
                    vals = tape.concat(&[v, tape.leaf(repeat_leading(v1, n))], 1)?;
                }
                crate::attention::attend(q, keys, vals, None)?.0
            }
            Some(mode) => {
                let s = match mode {
                    EpmMode::Learned => {
                        if frames != self.config.epm_frames {
                            return Err(Error::shape(format!(
                                "relationship scores are built for {} frames, video has {frames}",
                                self.config.epm_frames
                            )));
                        }
                        let fmap = tok.permute(&[0, 2, 1])?.reshape(&[n, c, hh, ww])?;
                        epm::epm_scores_var(fmap, frames, &self.epm_vars(bd, l)?)?
                    }
                    _ => tape.leaf(epm::sentinel_scores::<T>(b, frames)),
                };
                if let Some(cap) = hooks.epm_capture {
                    cap.borrow_mut().push(s.value().as_ref().clone());
                }
                let fl = frames * lt;
                let mut bias = epm::expand_bias_var(s, lt)?;
                let (qj, mut kj, mut vj) = (
                    q.reshape(&[b, fl, c])?,
                    k.reshape(&[b, fl, c])?,
                    v.reshape(&[b, fl, c])?,
                );
                if let Some((k1, v1)) = &replay {
                    let l1 = k1.dim(0);
                    kj = tape.concat(&[kj, tape.leaf(repeat_leading(k1, b))], 1)?;
                    vj = tape.concat(&[vj, tape.leaf(repeat_leading(v1, b))], 1)?;
                    bias = tape.concat(&[bias, tape.leaf(Tensor::zeros(&[b, fl, l1]))], 2)?;
                }
                crate::attention::attend(qj, kj, vj, Some(bias))?
                    .0
                    .reshape(&[n, lt, c])?
            }
        };
        tok.add(out.matmul(p("wo")?)?)
    }

    fn cross_attention<'t>(
        &self,
        bd: &Bound<'t, T>,
        l: usize,
        tok: Var<'t, T>,
        text: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let p = |s: &str| bd.var(&format!("mid.{l}.xattn.{s}"));
        let q = tok.matmul(p("wq")?)?;
        let k = text.matmul(p("wk")?)?;
        let v = text.matmul(p("wv")?)?;
        let (o, _) = crate::attention::attend(q, k, v, None)?;
        tok.add(o.matmul(p("wo")?)?)
    }

    /// Guided noise estimate:
    /// `e(0,0) + s_I (e(c_I,0) - e(0,0)) + s_T (e(c_I,c_T) - e(c_I,0))`.
    pub fn cfg_predict(
        &self,
        z: &Tensor<T>,
        c_image: &Tensor<T>,
        c_text: &TextEmbedding<T>,
        g: &GuidanceConfig,
        t: usize,
        hooks: &Hooks<'_, T>,
    ) -> Result<Tensor<T>> {
        let [e0, ei, et] = self.cfg_branches(z, c_image, c_text, t, hooks)?;
        combine_guidance(&e0, &ei, &et, g)
    }

    /// The raw predictions `[e(0,0), e(c_I,0), e(c_I,c_T)]`.
    pub fn cfg_branches(
        &self,
        z: &Tensor<T>,
        c_image: &Tensor<T>,
        c_text: &TextEmbedding<T>,
        t: usize,
        hooks: &Hooks<'_, T>,
    ) -> Result<[Tensor<T>; CFG_BRANCHES]> {
        Ok([
            self.forward(z, None, None, t, hooks)?,
            self.forward(z, Some(c_image), None, t, hooks)?,
            self.forward(z, Some(c_image), Some(c_text), t, hooks)?,
        ])
    }

    /// Deterministic guided sampling from seeded noise, conditioned on the
    /// source latents `c_image: [n, 4, h, w]`.
    ///
    /// Noise is drawn frame-major from the guidance seed, so frame 0 of a
    /// video sees the same noise as the single-image sampler. Relationship
    /// scores, when captured, come from the fully conditioned branch of the
    /// final step.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        c_image: &Tensor<T>,
        c_text: &TextEmbedding<T>,
        g: &GuidanceConfig,
        video: Option<VideoCtx>,
        mut recorder: Option<&mut TrajectoryRecorder<T>>,
        replay: Option<&Replayer<'_, T>>,
        epm_capture: Option<&RefCell<Vec<Tensor<T>>>>,
    ) -> Result<Tensor<T>> {
        g.validate()?;
        let ladder = self.schedule.ladder(g.steps)?;
        let mut r = rng::stream(g.seed, &["sample"]);
        let mut z = Tensor::<T>::randn(c_image.shape(), 1.0, &mut r);
        if let Some(rec) = recorder.as_deref_mut() {
            rec.push_latent(&z);
        }
        let capture: KvCapture<T> = RefCell::new(Vec::new());
        for (i, &t) in ladder.iter().enumerate() {
            let t_prev = ladder.get(i + 1).copied();
            let mut caps: [Vec<(usize, Tensor<T>, Tensor<T>)>; CFG_BRANCHES] = Default::default();
            let mut preds = Vec::with_capacity(CFG_BRANCHES);
            for (bi, cap) in caps.iter_mut().enumerate() {
                if let Some(rp) = replay {
                    rp.seek(i, bi);
                }
                let hooks = Hooks {
                    video,
                    record: recorder.as_ref().map(|_| &capture),
                    replay,
                    epm_capture: if i + 1 == ladder.len() && bi == 2 { epm_capture } else { None },
                };
                let (ci, ct) = match bi {
                    0 => (None, None),
                    1 => (Some(c_image), None),
                    _ => (Some(c_image), Some(c_text)),
                };
                preds.push(self.forward(&z, ci, ct, t, &hooks)?);
                *cap = std::mem::take(&mut *capture.borrow_mut());
            }
            let eps = combine_guidance(&preds[0], &preds[1], &preds[2], g)?;
            z = ddim_step(&z, &eps, t, t_prev, &self.schedule)?.prev;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.push_step(i, caps)?;
                rec.push_latent(&z);
            }
        }
        Ok(z)
    }

    /// Image edit of `c_image: [1, 4, h, w]`, optionally recording the
    /// trajectory.
    pub fn sample_edit(
        &self,
        c_image: &Tensor<T>,
        c_text: &TextEmbedding<T>,
        g: &GuidanceConfig,
        record: bool,
    ) -> Result<(Tensor<T>, Option<EditingTrajectory<T>>)> {
        if record {
            let mut rec = TrajectoryRecorder::new(self.digest(), g.clone(), self.layer_ids());
            let z = self.sample(c_image, c_text, g, None, Some(&mut rec), None, None)?;
            Ok((z, Some(rec.finish()?)))
        } else {
            Ok((self.sample(c_image, c_text, g, None, None, None, None)?, None))
        }
    }

    /// Per-example random draws for a batch.
    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: &[TrainSample<T>], dropout: f64, rng: &mut R) -> Result<Vec<NoiseDraw<T>>> {
        let drop = Bernoulli::new(dropout).map_err(|e| Error::Config(format!("dropout {dropout}: {e}")))?;
        Ok(batch
            .iter()
            .map(|s| NoiseDraw {
                t: rng.random_range(0..self.schedule.len()),
                eps: Tensor::randn(s.target.shape(), 1.0, rng),
                drop_image: drop.sample(rng),
                drop_text: drop.sample(rng),
            })
            .collect())
    }

    /// Noise-prediction MSE averaged over the batch, and its gradients.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainSample<T>],
        draws: &[NoiseDraw<T>],
        video: VideoTraining,
    ) -> Result<(T, std::collections::BTreeMap<String, Tensor<T>>)> {
        if batch.is_empty() || batch.len() != draws.len() {
            return Err(Error::Argument(format!(
                "batch of {} with {} noise draws",
                batch.len(),
                draws.len()
            )));
        }
        let tape = Tape::new();
        let bd = self.params.bind(&tape);
        let mut total: Option<Var<'_, T>> = None;
        for (s, dr) in batch.iter().zip(draws) {
            s.source.expect_same_shape(&s.target)?;
            let zt = crate::schedule::add_noise(&s.target, &dr.eps, dr.t, &self.schedule)?;
            let ci = if dr.drop_image {
                Tensor::zeros(s.source.shape())
            } else {
                s.source.clone()
            };
            let null = TextEmbedding::null();
            let text = if dr.drop_text { &null.matrix } else { &s.text.matrix };
            let frames = s.target.dim(0);
            let hooks = Hooks {
                video: (frames > 1).then(|| VideoCtx {
                    frames,
                    sma: video.sma,
                    epm: if video.epm { EpmMode::Learned } else { EpmMode::Off },
                }),
                ..Default::default()
            };
            let pred = self.forward_var(&bd, tape.leaf(zt), tape.leaf(ci), text, dr.t, &hooks)?;
            let loss = pred.mse(tape.leaf(dr.eps.clone()))?;
            total = Some(match total {
                Some(acc) => acc.add(loss)?,
                None => loss,
            });
        }
        let loss = total.expect("nonempty batch").scale(T::one() / T::cst(batch.len() as f64));
        let value = loss.value().data()[0];
        let grads = bd.grads(&tape.backward(loss)?);
        Ok((value, grads))
    }
}

/// Which video extensions participate when training on multi-frame samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VideoTraining {
    pub sma: bool,
    pub epm: bool,
}

impl Default for VideoTraining {
    fn default() -> Self {
        Self { sma: true, epm: true }
    }
}

pub fn combine_guidance<T: Scalar>(
    e_uncond: &Tensor<T>,
    e_image: &Tensor<T>,
    e_full: &Tensor<T>,
    g: &GuidanceConfig,
) -> Result<Tensor<T>> {
    // Expanded as s_T e_full + (s_I - s_T) e_image + (1 - s_I) e_uncond so
    // unit and zero scales reproduce a single branch bit for bit.
    let (st, si) = g.effective_scales();
    let (a, b, c) = (T::cst(st), T::cst(si - st), T::cst(1.0 - si));
    e_uncond.expect_same_shape(e_image)?;
    e_uncond.expect_same_shape(e_full)?;
    let data = e_full
        .data()
        .iter()
        .zip(e_image.data())
        .zip(e_uncond.data())
        .map(|((&f, &i), &u)| a * f + (b * i + c * u))
        .collect();
    Tensor::new(e_full.shape(), data)
}
