//! Forward noising, the deterministic DDIM reverse step, the noise-prediction
//! loss and classifier-free guidance.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Array, Error, Result};

/// Lower bound applied to `alpha_t` inside [`ddim_step`].
pub const ALPHA_FLOOR: f64 = 1e-5;

const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal fractions `alpha_0 = 1 > alpha_1 > ... > alpha_T = 0`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine-shaped schedule over `steps` timesteps with exact endpoints.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            let c = libm::cos(x * core::f64::consts::FRAC_PI_2);
            c * c
        };
        let f0 = f(0);
        let mut alphas: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        alphas[0] = 1.0;
        alphas[steps] = 0.0;
        Self::from_alphas(alphas)
    }

    /// Validates endpoints and strict monotonicity.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs alpha_0 and alpha_T".into()));
        }
        let last = alphas.len() - 1;
        if (alphas[0] - 1.0).abs() > 1e-6 || alphas[last].abs() > 1e-6 {
            return Err(Error::InvalidArgument("schedule must start at 1 and end at 0".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if let Some(t) = alphas.windows(2).position(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidArgument(alloc::format!(
                "schedule not strictly decreasing at t={t}"
            )));
        }
        Ok(Self { alphas })
    }

    /// Number of diffusion timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.steps() })
    }

    /// Evenly spaced DDIM sub-sequence from `T - 1` down to `0`, `n` steps
    /// long. Sampling starts from pure noise at `T - 1`: at `T` the signal
    /// weight is zero and the first step would only amplify prediction
    /// error.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let top = self.steps() - 1;
        if n == 0 || n > top {
            return Err(Error::InvalidArgument(alloc::format!(
                "ddim steps must be in 1..={top}, got {n}"
            )));
        }
        Ok((0..=n).rev().map(|k| (k * top + n / 2) / n).collect())
    }
}

/// Image or latent of shape `C x H x W`; noisy `x_t` share the type.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage(pub Array);

impl LatentImage {
    pub fn new(data: Array) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::InvalidArgument("latent must have shape C x H x W".into()));
        }
        if !data.is_finite() {
            return Err(Error::InvalidArgument("latent contains non-finite values".into()));
        }
        Ok(Self(data))
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Standard normal draws reproducible from `(seed, shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub data: Array,
    pub seed: u64,
}

impl NoiseSample {
    pub fn draw(seed: u64, shape: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { data: standard_normal(&mut rng, shape), seed }
    }
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Array::from_vec(shape, data).expect("length matches shape")
}

/// `sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * eps`.
pub fn add_noise(x0: &Array, eps: &Array, t: usize, sched: &NoiseSchedule) -> Result<Array> {
    let a = sched.alpha(t)?;
    let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    x0.zip_map(eps, |x, e| sa * x + sn * e)
}

/// One deterministic DDIM step from `t` to `t_prev`, with `alpha_t` floored
/// at [`ALPHA_FLOOR`] so a trajectory may start at `t = T`.
pub fn ddim_step(
    xt: &Array,
    eps_hat: &Array,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Array> {
    let (a_t, a_prev) = step_alphas(t, t_prev, sched)?;
    ddim_update(xt, eps_hat, a_t.max(ALPHA_FLOOR), a_prev.max(ALPHA_FLOOR))
}

/// [`ddim_step`] without the floor; fails when `alpha_t` is zero.
pub fn ddim_step_exact(
    xt: &Array,
    eps_hat: &Array,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Array> {
    let (a_t, a_prev) = step_alphas(t, t_prev, sched)?;
    if a_t <= 0.0 {
        return Err(Error::Singularity { t });
    }
    ddim_update(xt, eps_hat, a_t, a_prev)
}

fn step_alphas(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(alloc::format!(
            "ddim step needs t_prev < t, got t={t} t_prev={t_prev}"
        )));
    }
    Ok((sched.alpha(t)?, sched.alpha(t_prev)?))
}

fn ddim_update(xt: &Array, eps_hat: &Array, a_t: f64, a_prev: f64) -> Result<Array> {
    let ratio = libm::sqrt(a_prev) / libm::sqrt(a_t);
    let (n_t, n_prev) = (libm::sqrt(1.0 - a_t), libm::sqrt(1.0 - a_prev));
    xt.zip_map(eps_hat, |x, e| ratio * (x - n_t * e) + n_prev * e)
}

/// Mean squared error between true and predicted noise.
pub fn training_loss(eps_true: &Array, eps_pred: &Array) -> Result<f64> {
    eps_true.check_same_shape(eps_pred)?;
    if eps_true.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps_true.data().iter().zip(eps_pred.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps_true.len() as f64)
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`, evaluated as
/// `(1 - scale) * eps_uncond + scale * eps_cond` so scales 0 and 1 return
/// the respective branch exactly.
pub fn cfg_combine(eps_uncond: &Array, eps_cond: &Array, scale: f64) -> Result<Array> {
    eps_uncond.zip_map(eps_cond, |u, c| (1.0 - scale) * u + scale * c)
}
