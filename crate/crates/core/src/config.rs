//! Pipeline configuration: every architecture and schedule knob in one
//! serializable struct, with the published hyperparameter defaults.

use serde::{Deserialize, Serialize};

use crate::conditioning::SetAbstractionConfig;
use crate::diffusion::{DenoiserConfig, ScheduleConfig, TrainConfig};
use crate::util::sha256_hex;

/// Cross-attention dimensions between the category and part description
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossAttentionConfig {
    /// Max category-description tokens (query side).
    pub t_td: usize,
    /// Max part-description tokens (key/value side).
    pub t_pd: usize,
    /// Per-token feature width out of the text encoder.
    pub t_d: usize,
    /// Projected attention width; also the softmax scaling basis.
    pub attention_dim: usize,
}

impl Default for CrossAttentionConfig {
    fn default() -> Self {
        Self {
            t_td: 200,
            t_pd: 200,
            t_d: 768,
            attention_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prompt_version: String,
    /// Completions requested per description prompt; one is chosen by seed.
    pub descriptions_per_prompt: usize,
    /// Contact threshold lambda in meters for the consistency score.
    pub lambda_contact: f64,
    /// Segments below this point count are dropped (inclusive threshold).
    pub min_part_points: usize,
    /// Grasps sampled per part before selection.
    pub samples_per_part: usize,
    /// Seed for encoder/attention weight initialization.
    pub encoder_seed: u64,
    pub cross_attention: CrossAttentionConfig,
    pub set_abstraction: SetAbstractionConfig,
    pub diffusion: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    /// Directory for the description cache; None disables caching.
    pub cache_dir: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let set_abstraction = SetAbstractionConfig::default();
        let cross_attention = CrossAttentionConfig::default();
        let denoiser = DenoiserConfig {
            cond_dim: 2 * set_abstraction.geo_dim() + cross_attention.attention_dim,
            ..Default::default()
        };
        Self {
            prompt_version: crate::language::PROMPT_VERSION.to_string(),
            descriptions_per_prompt: 10,
            lambda_contact: 0.005,
            min_part_points: 32,
            samples_per_part: 1,
            encoder_seed: 7,
            cross_attention,
            set_abstraction,
            diffusion: ScheduleConfig::default(),
            denoiser,
            training: TrainConfig::default(),
            cache_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Condition vector length implied by the feature dimensions.
    pub fn cond_dim(&self) -> usize {
        2 * self.set_abstraction.geo_dim() + self.cross_attention.attention_dim
    }

    /// Digest over the canonical JSON form; recorded in results.
    pub fn hash(&self) -> String {
        let blob = serde_json::to_string(self).expect("config serializes");
        sha256_hex(blob.as_bytes())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, std::io::Error> {
        let data = std::fs::read_to_string(path)?;
        serde_json::from_str(&data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), std::io::Error> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_dimensions() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.cross_attention.t_td, 200);
        assert_eq!(cfg.cross_attention.t_d, 768);
        assert_eq!(cfg.cross_attention.attention_dim, 128);
        assert_eq!(cfg.set_abstraction.sampled_points, vec![1024, 256, 64, 16]);
        assert_eq!(cfg.set_abstraction.embedding_sizes, vec![64, 128, 256, 512]);
        assert_eq!(cfg.diffusion.diffusion_steps_t, 100);
        assert_eq!(cfg.diffusion.beta_start, 1e-4);
        assert_eq!(cfg.diffusion.beta_end, 1e-2);
        assert_eq!(cfg.denoiser.transformer_heads, 8);
        assert_eq!(cfg.denoiser.transformer_hidden, 64);
        assert_eq!(cfg.denoiser.transformer_dropout, 0.1);
        assert_eq!(cfg.denoiser.ffn_hidden, 128);
        assert_eq!(cfg.training.learning_rate, 1e-4);
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.cond_dim(), 1152);
        assert_eq!(cfg.denoiser.cond_dim, 1152);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.lambda_contact = 0.006;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"lambda_contact": 0.01}"#).unwrap();
        assert_eq!(cfg.lambda_contact, 0.01);
        assert_eq!(cfg.min_part_points, 32);
    }

    #[test]
    fn roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = PipelineConfig::default();
        cfg.save(&path).unwrap();
        let back = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }
}
