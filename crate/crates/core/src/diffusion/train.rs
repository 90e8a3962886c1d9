//! Training loop for the noise-prediction loss, plus checkpoint I/O.

use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionVector;
use crate::nn::{Adam, NamedTensor, ParamStore};
use crate::util::sha256_hex;

use super::denoiser::{DropoutMode, NoisySample};
use super::{
    make_schedule, q_sample, Denoiser, DenoiserConfig, DenoiserModel, DiffusionError, GraspParams,
    NoiseSchedule,
};

/// Mean absolute error between the injected noise and the denoiser's
/// prediction at the corresponding noisy point.
pub fn training_loss(
    denoiser: &dyn Denoiser,
    g0: &GraspParams,
    t: usize,
    cond: &ConditionVector,
    eps: &GraspParams,
    sched: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    let g_noisy = q_sample(g0, t, eps, sched)?;
    let pred = denoiser.predict_noise(&g_noisy, t, cond)?;
    let n = eps.as_slice().len() as f64;
    Ok(eps
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .map(|(e, p)| (e - p).abs())
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every N epochs into `checkpoint_dir` (0 = never).
    pub checkpoint_every: usize,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minimizes the noise-prediction loss with Adam. Steps t are drawn
/// uniformly in [1, T] per sample; an epoch is one seeded shuffle of the
/// dataset. Zero epochs returns with the weights untouched.
pub fn train(
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    dataset: &[(GraspParams, ConditionVector)],
    cfg: &TrainConfig,
) -> Result<TrainReport, DiffusionError> {
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let mut report = TrainReport::default();
    let mut adam = Adam::new(cfg.learning_rate);
    let batch_size = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<NoisySample> = chunk
                .iter()
                .map(|&i| {
                    let (g0, cond) = &dataset[i];
                    let t = rng.gen_range(1..=sched.t_max());
                    let eps = GraspParams::standard_normal(&mut rng);
                    let g_noisy = q_sample(g0, t, &eps, sched)?;
                    Ok(NoisySample {
                        g_noisy: g_noisy.as_slice().to_vec(),
                        t,
                        cond: cond.as_slice().to_vec(),
                        eps_target: eps.as_slice().to_vec(),
                    })
                })
                .collect::<Result<_, DiffusionError>>()?;

            let dropout = DropoutMode::Fixed(
                cfg.seed ^ ((epoch as u64) << 20) ^ (batch_idx as u64),
            );
            let (loss, grads) = model.loss_and_grads(&batch, dropout)?;
            if !loss.is_finite() {
                return Err(DiffusionError::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            adam.step(model.params_mut(), &grads);
            epoch_loss += loss;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);

        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("checkpoint_epoch{:04}.json", epoch + 1));
                save_checkpoint(model, &ScheduleConfig::from_schedule(sched), &path)?;
            }
        }
    }
    Ok(report)
}

/// The linear-schedule parameters recorded alongside weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub diffusion_steps_t: usize,
    pub noise_schedule: String,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            diffusion_steps_t: 100,
            noise_schedule: "linear".to_string(),
            beta_start: 1e-4,
            beta_end: 1e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn to_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(self.diffusion_steps_t, self.beta_start, self.beta_end)
    }

    pub fn from_schedule(s: &NoiseSchedule) -> Self {
        Self {
            diffusion_steps_t: s.t_max(),
            noise_schedule: "linear".to_string(),
            beta_start: s.beta(1),
            beta_end: s.beta(s.t_max()),
        }
    }
}

/// On-disk weight archive: named tensors with shapes, the schedule, and a
/// hash of the configuration that produced them.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub config_hash: String,
    pub tensors: std::collections::BTreeMap<String, NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "partgrasp-checkpoint-v1";

fn config_hash(config: &DenoiserConfig, schedule: &ScheduleConfig) -> String {
    let blob = serde_json::to_string(&(config, schedule)).expect("config serializes");
    sha256_hex(blob.as_bytes())
}

pub fn save_checkpoint(
    model: &DenoiserModel,
    schedule: &ScheduleConfig,
    path: impl AsRef<Path>,
) -> Result<(), DiffusionError> {
    let path = path.as_ref();
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config().clone(),
        schedule: schedule.clone(),
        config_hash: config_hash(model.config(), schedule),
        tensors: model.params().to_named_tensors(),
    };
    let json = serde_json::to_string(&ckpt).expect("checkpoint serializes");
    std::fs::write(path, json).map_err(|source| DiffusionError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DenoiserModel, ScheduleConfig), DiffusionError> {
    let path = path.as_ref();
    let data = std::fs::read_to_string(path).map_err(|source| DiffusionError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt: Checkpoint =
        serde_json::from_str(&data).map_err(|e| DiffusionError::CheckpointFormat(e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(DiffusionError::CheckpointFormat(format!(
            "unknown format '{}'",
            ckpt.format
        )));
    }
    let expected = config_hash(&ckpt.config, &ckpt.schedule);
    if ckpt.config_hash != expected {
        return Err(DiffusionError::CheckpointFormat(
            "config hash mismatch".to_string(),
        ));
    }
    let params = ParamStore::from_named_tensors(&ckpt.tensors)
        .map_err(DiffusionError::CheckpointFormat)?;
    Ok((DenoiserModel::from_parts(ckpt.config, params), ckpt.schedule))
}
