//! Forward noising process and the deterministic DDIM update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Range the predicted clean latent is clamped to inside [`ddim_step`].
pub const X0_CLAMP: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta schedule with cumulative products.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Range(format!("timestep {t} outside [0, {})", self.len())))
    }

    /// Strictly decreasing sampling ladder of `steps` timesteps, starting at
    /// `T-1`.
    pub fn ladder(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!(
                "cannot split {t} training steps into {steps} sampling steps"
            )));
        }
        Ok((0..steps).map(|i| (steps - i) * t / steps - 1).collect())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn add_noise<T: Scalar>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let (a, s) = (T::cst(ab.sqrt()), T::cst((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

#[derive(Clone, Debug)]
pub struct DdimOutput<T> {
    /// Latent at the target timestep.
    pub prev: Tensor<T>,
    /// Clamped clean-latent estimate.
    pub x0: Tensor<T>,
}

/// One deterministic (eta = 0) DDIM update from `t` to `t_prev`; `None`
/// targets the clean latent (alpha_bar = 1).
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<DdimOutput<T>> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::Ordering { t, t_prev: tp });
        }
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) => sched.alpha_bar(tp)?,
        None => 1.0,
    };
    let (sa, sn) = (T::cst(ab.sqrt()), T::cst((1.0 - ab).sqrt()));
    let lim = T::cst(X0_CLAMP);
    let x0 = z_t.zip_map(eps_hat, |z, e| ((z - sn * e) / sa).max(-lim).min(lim))?;
    let (pa, pn) = (T::cst(ab_prev.sqrt()), T::cst((1.0 - ab_prev).sqrt()));
    let prev = x0.zip_map(eps_hat, |x, e| pa * x + pn * e)?;
    Ok(DdimOutput { prev, x0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn schedule_examples() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bars()[0], 1.0 - 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // Brute-force product oracle.
        let mut prod = 1.0;
        for i in 0..100 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0);
        }
        assert!((s.alpha_bars()[99] - prod).abs() < 1e-12);

        let s2 = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s2.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(matches!(make_schedule(1, 0.1, 0.2), Err(Error::Config(_))));
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn ladder_is_strictly_decreasing() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let l = s.ladder(20).unwrap();
        assert_eq!(l.len(), 20);
        assert_eq!(l[0], 999);
        assert_eq!(*l.last().unwrap(), 49);
        assert!(l.windows(2).all(|w| w[1] < w[0]));
        assert!(s.ladder(0).is_err());
        assert!(s.ladder(1001).is_err());
    }

    #[test]
    fn add_noise_cases() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        let x0 = Tensor::<f64>::ones(&[2, 3]);
        let zero = Tensor::zeros(&[2, 3]);
        let out = add_noise(&x0, &zero, 1, &s).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25f64.sqrt()));
        let out = add_noise(&x0, &x0, 1, &s).unwrap();
        let want = 0.5 + 0.75f64.sqrt();
        assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-15));
        assert!(add_noise(&x0, &Tensor::zeros(&[3, 2]), 0, &s).is_err());
        assert!(add_noise(&x0, &zero, 2, &s).is_err());
    }

    #[test]
    fn add_noise_variance_matches_mixture_law() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut r = rng::from_seed(3);
        let n = 10_000;
        let sx = 1.7;
        let x0 = Tensor::<f64>::randn(&[n], sx, &mut r);
        let eps = Tensor::<f64>::randn(&[n], 1.0, &mut r);
        for t in [10, 300, 900] {
            let y = add_noise(&x0, &eps, t, &s).unwrap();
            let m = y.mean();
            let var = y.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let ab = s.alpha_bar(t).unwrap();
            let want = ab * sx * sx + (1.0 - ab);
            assert!((var - want).abs() / want < 0.05, "t={t}: {var} vs {want}");
        }
    }

    #[test]
    fn ddim_inverts_true_noise() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut r = rng::from_seed(4);
        let x0 = Tensor::<f64>::randn(&[4, 8, 8], 1.0, &mut r);
        let eps = Tensor::<f64>::randn(&[4, 8, 8], 1.0, &mut r);
        let zt = add_noise(&x0, &eps, 999, &s).unwrap();
        let out = ddim_step(&zt, &eps, 999, None, &s).unwrap();
        assert!(out.x0.max_abs_diff(&x0) < 1e-6);
        assert!(out.prev.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn ddim_rejects_bad_order() {
        let s = make_schedule(10, 1e-3, 0.02).unwrap();
        let z = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(
            ddim_step(&z, &z, 5, Some(5), &s),
            Err(Error::Ordering { t: 5, t_prev: 5 })
        ));
        assert!(ddim_step(&z, &z, 5, Some(7), &s).is_err());
    }

    /// With eps_hat = c z every DDIM step is a scalar multiple of z, so the
    /// whole ladder collapses to a product of per-step factors.
    fn linear_factor(s: &NoiseSchedule, ladder: &[usize], c: f64) -> f64 {
        let mut f = 1.0;
        for (i, &t) in ladder.iter().enumerate() {
            let ab = s.alpha_bar(t).unwrap();
            let abp = ladder.get(i + 1).map_or(1.0, |&tp| s.alpha_bar(tp).unwrap());
            let x0 = (1.0 - (1.0 - ab).sqrt() * c) / ab.sqrt();
            f *= abp.sqrt() * x0 + (1.0 - abp).sqrt() * c;
        }
        f
    }

    #[test]
    fn linear_denoiser_one_vs_two_steps() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let c = 0.8;
        let z = Tensor::<f64>::from_fn(&[16], |i| (i as f64 * 0.37).sin() * 0.01);
        let run = |steps: usize| {
            let ladder = s.ladder(steps).unwrap();
            let mut cur = z.clone();
            for (i, &t) in ladder.iter().enumerate() {
                let eps = cur.scale(c);
                cur = ddim_step(&cur, &eps, t, ladder.get(i + 1).copied(), &s)
                    .unwrap()
                    .prev;
            }
            (cur, linear_factor(&s, &ladder, c))
        };
        let (one, f1) = run(1);
        let (two, f2) = run(2);
        for i in 0..16 {
            assert!((one.data()[i] - f1 * z.data()[i]).abs() < 1e-12);
            assert!((two.data()[i] - f2 * z.data()[i]).abs() < 1e-12);
        }
        let bound = (f1 - f2).abs() * z.max_abs() + 1e-12;
        assert!(one.max_abs_diff(&two) <= bound);
    }
}
