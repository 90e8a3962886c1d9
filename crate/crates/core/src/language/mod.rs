//! Prompt rendering, description generation, and text encoding.
//!
//! Three prompt templates drive the description stage: one asks how to
//! grasp a category of object for a task, one asks for two-scale part
//! labels of a category, and one asks for a task-agnostic description of a
//! single part. Providers answer prompts; the robustness trick requests
//! several completions and picks one with a seeded RNG, caching the whole
//! exchange on disk.

mod cache;
mod encoder;
mod providers;

pub use cache::{CacheEntry, DescriptionCache};
pub use encoder::{HashTextEncoder, TextEncoder, TokenFeatures};
pub use providers::{CannedProvider, DescriptionProvider, HttpProvider, HttpProviderConfig};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

/// Bump when any template text changes; recorded in results so cached
/// live-provider outputs stay attributable to the template that made them.
pub const PROMPT_VERSION: &str = "pv1";

#[derive(Debug, Error)]
pub enum LanguageError {
    #[error("prompt {kind:?} requires argument '{arg}'")]
    MissingArgument { kind: PromptKind, arg: &'static str },
    #[error("part description prompts are task-agnostic; got task '{0}'")]
    TaskForbidden(String),
    #[error("need at least one completion, got k = {0}")]
    InvalidK(usize),
    #[error("provider '{provider}' failed: {message}")]
    Provider { provider: String, message: String },
    #[error("cannot parse part labels: {message}; raw output:\n{raw}")]
    ParseLabels { message: String, raw: String },
    #[error("text has no tokens")]
    EmptyText,
    #[error("bad token features: {0}")]
    TokenShape(String),
    #[error("cache i/o on {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad cache entry: {0}")]
    CacheFormat(String),
}

/// The three prompts of the description stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    /// How to grasp a category of object for a given task.
    CategoryTask,
    /// Two-scale part labels for a category.
    PartLabels,
    /// Task-agnostic description of one part.
    PartDescription,
}

/// Deterministic template expansion.
///
/// `CategoryTask` requires `task`; `PartDescription` requires `part_label`
/// and rejects a task argument, keeping part descriptions reusable across
/// tasks.
pub fn render_prompt(
    kind: PromptKind,
    category: &str,
    task: Option<&str>,
    part_label: Option<&str>,
) -> Result<String, LanguageError> {
    match kind {
        PromptKind::CategoryTask => {
            let task = task.ok_or(LanguageError::MissingArgument { kind, arg: "task" })?;
            Ok(format!(
                "You are given an object of category \"{category}\" and the manipulation \
                 task \"{task}\". Describe how a person would grasp a typical object of \
                 this category to complete the task. Name the part of the object to \
                 interact with, its geometric and shape characteristics, and the role \
                 that part plays in completing the task. Answer in one paragraph."
            ))
        }
        PromptKind::PartLabels => Ok(format!(
            "List the parts of a typical object of category \"{category}\" at two \
             segmentation scales. Scale 1 holds the large, coarse parts; scale 2 holds \
             finer sub-parts. Only include parts visible from the outside. Prioritize \
             parts that are typically involved in hand-object interaction, and prefer \
             common, general part names (for example: head, body). Answer with exactly \
             two lines:\nscale 1: <comma-separated part names>\nscale 2: \
             <comma-separated part names>"
        )),
        PromptKind::PartDescription => {
            if let Some(task) = task {
                return Err(LanguageError::TaskForbidden(task.to_string()));
            }
            let part = part_label.ok_or(LanguageError::MissingArgument {
                kind,
                arg: "part_label",
            })?;
            Ok(format!(
                "Describe the \"{part}\" part of a typical object of category \
                 \"{category}\". Focus on the functionality of the part considering \
                 its geometry with respect to hand-object interaction: its shape \
                 characteristics and how a hand engages with it. Do not mention any \
                 specific manipulation task. Answer in one paragraph."
            ))
        }
    }
}

/// Fields recovered from a rendered prompt. The stub provider uses this to
/// answer without a language model; it only understands this crate's own
/// templates.
#[derive(Debug, Clone)]
pub struct PromptFields {
    pub kind: PromptKind,
    pub category: String,
    pub task: Option<String>,
    pub part_label: Option<String>,
}

pub(crate) fn prompt_fields(prompt: &str) -> Option<PromptFields> {
    let quoted: Vec<String> = extract_quoted(prompt);
    if prompt.contains("two segmentation scales") {
        return Some(PromptFields {
            kind: PromptKind::PartLabels,
            category: quoted.first()?.clone(),
            task: None,
            part_label: None,
        });
    }
    if prompt.contains("and the manipulation task") {
        return Some(PromptFields {
            kind: PromptKind::CategoryTask,
            category: quoted.first()?.clone(),
            task: Some(quoted.get(1)?.clone()),
            part_label: None,
        });
    }
    if prompt.contains("Do not mention any specific manipulation task") {
        return Some(PromptFields {
            kind: PromptKind::PartDescription,
            category: quoted.get(1)?.clone(),
            task: None,
            part_label: Some(quoted.first()?.clone()),
        });
    }
    None
}

fn extract_quoted(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('"') {
        let after = &rest[start + 1..];
        let Some(end) = after.find('"') else { break };
        out.push(after[..end].to_string());
        rest = &after[end + 1..];
    }
    out
}

/// Requests `k` completions and returns one chosen by the seeded RNG. The
/// full exchange is cached; a later call with the same (prompt, provider,
/// seed) never reaches the provider again.
pub fn generate_description(
    provider: &dyn DescriptionProvider,
    cache: Option<&DescriptionCache>,
    prompt: &str,
    k: usize,
    rng_seed: u64,
) -> Result<String, LanguageError> {
    if k == 0 {
        return Err(LanguageError::InvalidK(k));
    }
    let provider_id = provider.id();
    let key = DescriptionCache::key(prompt, &provider_id, rng_seed);
    if let Some(cache) = cache {
        if let Some(entry) = cache.get(&key)? {
            let idx = entry.chosen_index.min(entry.texts.len().saturating_sub(1));
            return Ok(entry.texts[idx].clone());
        }
    }
    let texts = provider.complete(prompt, k)?;
    if texts.len() < k {
        return Err(LanguageError::Provider {
            provider: provider_id,
            message: format!("returned {} completions, asked for {k}", texts.len()),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let chosen_index = rng.gen_range(0..k);
    if let Some(cache) = cache {
        cache.put(
            &key,
            &CacheEntry {
                prompt_hash: sha256_hex(prompt.as_bytes()),
                provider: provider_id,
                seed: rng_seed,
                k,
                chosen_index,
                texts: texts.clone(),
            },
        )?;
    }
    Ok(texts[chosen_index].clone())
}

/// Asks the provider for the category's part labels and parses them into
/// (label, scale) pairs. Duplicate labels keep their lowest scale.
pub fn generate_part_labels(
    provider: &dyn DescriptionProvider,
    category: &str,
) -> Result<Vec<(String, u32)>, LanguageError> {
    if category.trim().is_empty() {
        return Err(LanguageError::MissingArgument {
            kind: PromptKind::PartLabels,
            arg: "category",
        });
    }
    let prompt = render_prompt(PromptKind::PartLabels, category, None, None)?;
    let raw = provider
        .complete(&prompt, 1)?
        .into_iter()
        .next()
        .unwrap_or_default();
    parse_part_labels(&raw)
}

fn parse_part_labels(raw: &str) -> Result<Vec<(String, u32)>, LanguageError> {
    let mut by_scale: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lower = line.to_lowercase();
        let Some(rest) = lower.strip_prefix("scale ") else {
            return Err(LanguageError::ParseLabels {
                message: format!("unexpected line '{line}'"),
                raw: raw.to_string(),
            });
        };
        let Some((num, labels)) = rest.split_once(':') else {
            return Err(LanguageError::ParseLabels {
                message: format!("missing ':' in '{line}'"),
                raw: raw.to_string(),
            });
        };
        let scale: u32 = num.trim().parse().map_err(|_| LanguageError::ParseLabels {
            message: format!("bad scale number in '{line}'"),
            raw: raw.to_string(),
        })?;
        let items = labels
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        by_scale.insert(scale, items);
    }
    if by_scale.keys().cloned().collect::<Vec<_>>() != vec![1, 2] {
        return Err(LanguageError::ParseLabels {
            message: "expected exactly scales 1 and 2".to_string(),
            raw: raw.to_string(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (scale, labels) in by_scale {
        for label in labels {
            if seen.insert(label.clone()) {
                out.push((label, scale));
            }
        }
    }
    if out.is_empty() {
        return Err(LanguageError::ParseLabels {
            message: "no labels found".to_string(),
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

/// Everything the description stage produced for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionBundle {
    pub category_text: String,
    /// One description per valid part, keyed by label.
    pub part_texts: BTreeMap<String, String>,
    /// All candidate labels with their scales, before segmentation.
    pub part_labels: Vec<(String, u32)>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider: String,
    pub seed: u64,
}
