//! Conditional denoising diffusion over 61-dimensional grasp parameters.
//!
//! The forward process perturbs a grasp g0 with Gaussian noise through a
//! linear beta schedule:
//!
//! ```text
//! q(g_t | g_0) = N(sqrt(abar_t) * g_0, (1 - abar_t) * I),   abar_t = prod(1 - beta_i)
//! ```
//!
//! The denoiser is trained to predict the injected noise under a mean-L1
//! loss, and ancestral sampling inverts the chain with the standard
//! noise-prediction posterior mean
//!
//! ```text
//! mu_t = (g_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
//! ```
//!
//! with variance beta_t * I, and no noise added at the final step.

mod denoiser;
mod train;

pub use denoiser::{Architecture, Denoiser, DenoiserConfig, DenoiserModel, FnDenoiser};
pub use train::{
    load_checkpoint, save_checkpoint, train, training_loss, Checkpoint, ScheduleConfig,
    TrainConfig, TrainReport,
};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::ConditionVector;
use crate::nn::normal_sample;

/// Length of the grasp parameter vector.
pub const GRASP_DIM: usize = 61;
/// Global hand rotation, axis-angle.
pub const GLOBAL_ROT: std::ops::Range<usize> = 0..3;
/// Joint rotations, axis-angle, 15 joints.
pub const JOINT_ROT: std::ops::Range<usize> = 3..48;
/// Shape coefficients.
pub const SHAPE: std::ops::Range<usize> = 48..58;
/// Palm translation in meters.
pub const PALM_T: std::ops::Range<usize> = 58..61;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")]
    InvalidScheduleRange { beta_start: f64, beta_end: f64 },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("step {t} outside schedule range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("time embedding dimension must be even, got {0}")]
    OddTimeEmbedDim(usize),
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("grasp vector must have {GRASP_DIM} finite entries")]
    InvalidGrasp,
    #[error("sampling diverged to a non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("checkpoint i/o on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    CheckpointFormat(String),
}

/// The 61 hand parameters: pose (global rotation 3 + joint rotations 45,
/// axis-angle), shape (10), and palm translation (3, meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GraspParams {
    values: Vec<f64>,
}

impl GraspParams {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; GRASP_DIM],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self, DiffusionError> {
        if values.len() != GRASP_DIM || values.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::InvalidGrasp);
        }
        Ok(Self { values })
    }

    /// Standard normal draw in R^61.
    pub fn standard_normal(rng: &mut ChaCha12Rng) -> Self {
        Self {
            values: (0..GRASP_DIM).map(|_| normal_sample(rng)).collect(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn global_rotation(&self) -> &[f64] {
        &self.values[GLOBAL_ROT]
    }

    pub fn joint_rotations(&self) -> &[f64] {
        &self.values[JOINT_ROT]
    }

    pub fn shape_coeffs(&self) -> &[f64] {
        &self.values[SHAPE]
    }

    pub fn palm_translation(&self) -> [f64; 3] {
        [self.values[58], self.values[59], self.values[60]]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl TryFrom<Vec<f64>> for GraspParams {
    type Error = DiffusionError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_vec(values)
    }
}

impl From<GraspParams> for Vec<f64> {
    fn from(g: GraspParams) -> Self {
        g.values
    }
}

/// Per-step noise magnitudes: beta, alpha = 1 - beta, and the cumulative
/// product abar. Step indices are 1-based, matching the process notation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Linear schedule inclusive of both endpoints; T = 1 degenerates to a
/// single step at `beta_start`.
pub fn make_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if t_steps == 0 {
        return Err(DiffusionError::EmptySchedule);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidScheduleRange {
            beta_start,
            beta_end,
        });
    }
    let betas: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward jump: sqrt(abar_t) * g0 + sqrt(1 - abar_t) * eps.
pub fn q_sample(
    g0: &GraspParams,
    t: usize,
    eps: &GraspParams,
    sched: &NoiseSchedule,
) -> Result<GraspParams, DiffusionError> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let values = g0
        .values
        .iter()
        .zip(eps.values.iter())
        .map(|(g, e)| signal * g + noise * e)
        .collect();
    Ok(GraspParams { values })
}

/// One reverse step. Computes the noise-prediction posterior mean and, for
/// t > 1, adds sqrt(beta_t) * z; the final step returns the mean exactly.
pub fn p_sample_step(
    denoiser: &dyn Denoiser,
    g_t: &GraspParams,
    t: usize,
    cond: &ConditionVector,
    sched: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<GraspParams, DiffusionError> {
    sched.check(t)?;
    let eps_hat = denoiser.predict_noise(g_t, t, cond)?;
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let coeff = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = beta.sqrt();
    let values = g_t
        .values
        .iter()
        .zip(eps_hat.values.iter())
        .map(|(g, e)| {
            let mean = inv_sqrt_alpha * (g - coeff * e);
            if t > 1 {
                mean + sigma * normal_sample(rng)
            } else {
                mean
            }
        })
        .collect();
    Ok(GraspParams { values })
}

/// Full ancestral sampling chain from seeded Gaussian noise down to the g0
/// estimate. Deterministic in (seed, cond, weights, schedule).
pub fn sample(
    denoiser: &dyn Denoiser,
    cond: &ConditionVector,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<GraspParams, DiffusionError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut g = GraspParams::standard_normal(&mut rng);
    for t in (1..=sched.t_max()).rev() {
        g = p_sample_step(denoiser, &g, t, cond, sched, &mut rng)?;
        if !g.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
    }
    Ok(g)
}

use rand::SeedableRng;

/// Sinusoidal step embedding: interleaved (sin(t/w_k), cos(t/w_k)) pairs
/// with geometric frequencies w_k spanning [1, 10^4]. All entries in
/// [-1, 1]; t = 0 maps to [0, 1, 0, 1, ...].
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>, DiffusionError> {
    if dim % 2 != 0 || dim == 0 {
        return Err(DiffusionError::OddTimeEmbedDim(dim));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let exponent = if half == 1 {
            0.0
        } else {
            k as f64 / (half - 1) as f64
        };
        let omega = 1e4f64.powf(exponent);
        let arg = t as f64 / omega;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}
