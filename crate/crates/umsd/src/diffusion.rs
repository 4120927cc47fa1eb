//! Noise schedule, forward noising, and the x0-prediction reverse sampler.
//!
//! The forward process is the standard Markov noising chain
//! x_t ~ N(sqrt(alpha_t) x_{t-1}, (1 - alpha_t) I), with the usual closed
//! form x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. Sampling
//! runs the reverse loop with the denoiser predicting x0 directly and the
//! posterior q(x_{t-1} | x_t, x0_hat) supplying the step distribution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::ConditionTensor;
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScheduleKind> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::UnknownId(format!("schedule kind '{other}'"))),
        }
    }
}

/// Precomputed per-step constants. `alpha` and `alpha_bar` are indexed by
/// timestep t in 1..=T; `alpha_bar(0)` is defined as 1.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    // (c1, c2, sigma) of q(x_{t-1} | x_t, x0): mean = c1 x0 + c2 x_t.
    posterior: Vec<(f64, f64, f64)>,
}

const COSINE_S: f64 = 0.008;
const BETA_MAX: f64 = 0.999;
const LINEAR_BETA_LO: f64 = 1e-4;
const LINEAR_BETA_HI: f64 = 2e-2;

/// Builds a schedule of `t_max` steps. Cosine follows the squared-cosine
/// alpha_bar shape; linear ramps beta over [1e-4, 2e-2] scaled by 1000/T so
/// total noise stays comparable across step counts.
pub fn make_schedule(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |u: f64| {
                ((u + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            let f0 = f(0.0);
            let bar = |t: usize| f(t as f64 / t_max as f64) / f0;
            (1..=t_max)
                .map(|t| (1.0 - bar(t) / bar(t - 1)).min(BETA_MAX))
                .collect()
        }
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_max as f64;
            (1..=t_max)
                .map(|t| {
                    let frac = if t_max == 1 {
                        0.0
                    } else {
                        (t - 1) as f64 / (t_max - 1) as f64
                    };
                    (scale * (LINEAR_BETA_LO + frac * (LINEAR_BETA_HI - LINEAR_BETA_LO)))
                        .min(BETA_MAX)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alpha {
        debug_assert!(a > 0.0 && a < 1.0);
        prod *= a;
        alpha_bar.push(prod);
    }
    let mut posterior = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let a_t = alpha[t - 1];
        let ab_t = alpha_bar[t - 1];
        let ab_prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
        let beta_t = 1.0 - a_t;
        let c1 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
        let c2 = a_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t;
        posterior.push((c1, c2, var.sqrt()));
    }
    Ok(NoiseSchedule {
        t_max,
        alpha,
        alpha_bar,
        posterior,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::Dimension(format!(
                "timestep {t} out of range 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t));
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_coeffs(&self, t: usize) -> (f64, f64, f64) {
        assert!((1..=self.t_max).contains(&t));
        self.posterior[t - 1]
    }
}

fn standard_normal_like<R: Rng>(shape: (usize, usize), rng: &mut R) -> Mat {
    let mut m = Mat::zeros(shape.0, shape.1);
    for v in m.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// One forward step: a sample of N(sqrt(alpha_t) x_prev, (1 - alpha_t) I).
pub fn noise_step<R: Rng>(
    x_prev: &Mat,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Mat> {
    schedule.check_t(t)?;
    let a = schedule.alpha(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let eps = standard_normal_like(x_prev.shape(), rng);
    let mut out = x_prev.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = sa * *o + sb * e;
    }
    Ok(out)
}

/// Jumps straight to step t: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
/// Returns both the noised sequence and the noise that produced it.
pub fn noise_to<R: Rng>(
    x0: &Mat,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Mat, Mat)> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = standard_normal_like(x0.shape(), rng);
    let mut x_t = x0.clone();
    for (o, e) in x_t.data_mut().iter_mut().zip(eps.data()) {
        *o = sa * *o + sb * e;
    }
    Ok((x_t, eps))
}

/// Mean of the reverse posterior q(x_{t-1} | x_t, x0_hat).
pub fn posterior_mean(x_t: &Mat, x0_hat: &Mat, t: usize, schedule: &NoiseSchedule) -> Result<Mat> {
    schedule.check_t(t)?;
    if x_t.shape() != x0_hat.shape() {
        return Err(Error::Dimension(format!(
            "posterior shapes differ: {:?} vs {:?}",
            x_t.shape(),
            x0_hat.shape()
        )));
    }
    let (c1, c2, _) = schedule.posterior_coeffs(t);
    let mut out = x0_hat.clone();
    for (o, x) in out.data_mut().iter_mut().zip(x_t.data()) {
        *o = c1 * *o + c2 * x;
    }
    Ok(out)
}

/// One reverse step. The final step (t = 1) is deterministic: it returns the
/// posterior mean, which at t = 1 is exactly x0_hat.
pub fn posterior_step<R: Rng>(
    x_t: &Mat,
    x0_hat: &Mat,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Mat> {
    let mut out = posterior_mean(x_t, x0_hat, t, schedule)?;
    if t > 1 {
        let (_, _, sigma) = schedule.posterior_coeffs(t);
        for o in out.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *o += sigma * e;
        }
    }
    Ok(out)
}

/// A model predicting the clean sequence x0 from a noised one.
pub trait Denoiser {
    fn denoise(&self, x_t: &Mat, t: usize, condition: &ConditionTensor) -> Result<Mat>;
}

impl<F> Denoiser for F
where
    F: Fn(&Mat, usize, &ConditionTensor) -> Result<Mat>,
{
    fn denoise(&self, x_t: &Mat, t: usize, condition: &ConditionTensor) -> Result<Mat> {
        self(x_t, t, condition)
    }
}

/// Full reverse loop from pure noise: for t = T..1, predict x0_hat and step
/// the posterior. Returns the final x0 (the last prediction, since the t = 1
/// step is deterministic with c1 = 1, c2 = 0).
pub fn sample<D: Denoiser, R: Rng>(
    denoiser: &D,
    condition: &ConditionTensor,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Mat> {
    let mut x = standard_normal_like(shape, rng);
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = denoiser.denoise(&x, t, condition)?;
        if x0_hat.shape() != shape {
            return Err(Error::Dimension(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.shape(),
                shape
            )));
        }
        x = posterior_step(&x, &x0_hat, t, schedule, rng)?;
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("sampled sequence".into()));
    }
    Ok(x)
}
