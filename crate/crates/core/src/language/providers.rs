//! Description providers: the deterministic offline stub and the optional
//! HTTP client.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::util::stable_hash64;

use super::{prompt_fields, LanguageError, PromptKind};

/// Source of description completions. Implementations must be safe to call
/// from several threads at once.
pub trait DescriptionProvider: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;

    /// Returns `n` completions for the prompt.
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, LanguageError>;
}

/// Offline provider with canned label sets for known categories and a
/// seeded synthetic text generator for everything else. Counts its calls so
/// tests can observe cache hits.
pub struct CannedProvider {
    labels: BTreeMap<String, (Vec<String>, Vec<String>)>,
    calls: AtomicUsize,
}

impl Default for CannedProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl CannedProvider {
    pub fn new() -> Self {
        let mut p = Self {
            labels: BTreeMap::new(),
            calls: AtomicUsize::new(0),
        };
        for (category, scale1, scale2) in CANNED_LABELS {
            p.set_labels(
                category,
                scale1.split(',').map(str::trim),
                scale2.split(',').map(str::trim),
            );
        }
        p
    }

    /// Overrides or adds the two-scale label set for a category.
    pub fn set_labels<'a>(
        &mut self,
        category: &str,
        scale1: impl IntoIterator<Item = &'a str>,
        scale2: impl IntoIterator<Item = &'a str>,
    ) {
        self.labels.insert(
            category.to_lowercase(),
            (
                scale1.into_iter().map(String::from).collect(),
                scale2.into_iter().map(String::from).collect(),
            ),
        );
    }

    /// How many times `complete` ran; cache hits keep this at zero.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn label_lines(&self, category: &str) -> String {
        let key = category.to_lowercase();
        if let Some((s1, s2)) = self.labels.get(&key) {
            return format!("scale 1: {}\nscale 2: {}", s1.join(", "), s2.join(", "));
        }
        // unseen category: pick deterministic generic parts
        let h = stable_hash64(key.as_bytes());
        let mut rng = ChaCha12Rng::seed_from_u64(h);
        let coarse = ["body", "head", "handle", "base"];
        let fine = ["rim", "edge", "grip", "tip", "neck", "cap"];
        let c1 = coarse[rng.gen_range(0..coarse.len())];
        let mut c2 = coarse[rng.gen_range(0..coarse.len())];
        while c2 == c1 {
            c2 = coarse[rng.gen_range(0..coarse.len())];
        }
        let f1 = fine[rng.gen_range(0..fine.len())];
        let mut f2 = fine[rng.gen_range(0..fine.len())];
        while f2 == f1 {
            f2 = fine[rng.gen_range(0..fine.len())];
        }
        format!("scale 1: {c1}, {c2}\nscale 2: {f1}, {f2}")
    }

    fn describe_category(&self, category: &str, task: &str, variant: usize) -> String {
        let seed = stable_hash64(format!("cat:{category}:{task}:{variant}").as_bytes());
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let grips = [
            "a full-palm wrap",
            "a precision pinch of thumb and fingers",
            "an enclosing power grip",
            "a light three-finger hold",
        ];
        let regions = [
            "the widest section",
            "the upper section",
            "the main body",
            "the protruding feature nearest the top",
        ];
        let grip = grips[rng.gen_range(0..grips.len())];
        let region = regions[rng.gen_range(0..regions.len())];
        format!(
            "To carry out \"{task}\" with a {category}, engage {region} of the object. \
             That region presents a steady, graspable geometry, so {grip} keeps the \
             {category} controlled while the motion for \"{task}\" is performed. \
             Keeping contact there preserves balance through the whole action."
        )
    }

    fn describe_part(&self, category: &str, part: &str, variant: usize) -> String {
        let seed = stable_hash64(format!("part:{category}:{part}:{variant}").as_bytes());
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let shapes = [
            "a compact, roughly convex",
            "an elongated, gently curved",
            "a flat, slightly contoured",
            "a narrow, tapered",
        ];
        let contacts = [
            "fingertips settle naturally against it",
            "the palm can press flat onto it",
            "fingers can curl around it",
            "thumb and forefinger can clamp it",
        ];
        let shape = shapes[rng.gen_range(0..shapes.len())];
        let contact = contacts[rng.gen_range(0..contacts.len())];
        format!(
            "The {part} of a {category} is {shape} region. Its surface geometry means \
             {contact}, which makes it a dependable anchor during hand-object contact. \
             Relative to the rest of the {category}, the {part} offers a distinct \
             boundary the hand can find by feel."
        )
    }
}

impl DescriptionProvider for CannedProvider {
    fn id(&self) -> String {
        "stub-v1".to_string()
    }

    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, LanguageError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fields = prompt_fields(prompt).ok_or_else(|| LanguageError::Provider {
            provider: self.id(),
            message: "stub provider cannot parse this prompt template".to_string(),
        })?;
        let out = match fields.kind {
            PromptKind::PartLabels => {
                // label sets are fixtures: every completion is identical
                vec![self.label_lines(&fields.category); n]
            }
            PromptKind::CategoryTask => {
                let task = fields.task.unwrap_or_default();
                (0..n)
                    .map(|v| self.describe_category(&fields.category, &task, v))
                    .collect()
            }
            PromptKind::PartDescription => {
                let part = fields.part_label.unwrap_or_default();
                (0..n)
                    .map(|v| self.describe_part(&fields.category, &part, v))
                    .collect()
            }
        };
        Ok(out)
    }
}

/// Two-scale part-label fixtures per object category.
const CANNED_LABELS: &[(&str, &str, &str)] = &[
    ("bottle", "body, lid", "neck, rim"),
    ("bowl", "body, bottom", "rim"),
    ("cameras", "body, lens", "buttons, display, glass"),
    ("cup", "body, base", "rim"),
    ("cylinder_bottle", "body, head", "neck, cap"),
    ("headphones", "body, band", "cap, cable, mic"),
    ("knife", "blade, handle", "edge, spine, tip, butt"),
    ("lotion_pump", "head, body", "nozzle, neck"),
    ("mug", "body, handle", "rim, base"),
    ("pen", "body, head", "clip, barrel, grip, nib"),
    ("pincer", "handle, jaws", "pivot, hinge, tip, blade"),
    ("power_drill", "body, handle", "trigger, chuck, switch"),
    ("scissors", "blade, handle", "blade edge, finger loop, pivot screw"),
    ("squeezable", "body, head", "neck, spout, grip section"),
    ("trigger_sprayer", "head, body", "nozzle, neck"),
    ("wrench", "handle, jaw", "slider, movable jaw, fixed jaw, adjustment screw"),
];

/// Retry/backoff settings for the HTTP provider.
#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    /// First backoff delay; doubles per retry.
    pub backoff: Duration,
}

impl HttpProviderConfig {
    /// Reads `LLM_ENDPOINT` and `LLM_API_KEY` from the environment.
    pub fn from_env() -> Result<Self, LanguageError> {
        let endpoint = std::env::var("LLM_ENDPOINT").map_err(|_| LanguageError::Provider {
            provider: "http".to_string(),
            message: "LLM_ENDPOINT is not set".to_string(),
        })?;
        Ok(Self {
            endpoint,
            api_key: std::env::var("LLM_API_KEY").ok(),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(250),
        })
    }
}

/// Live provider: POSTs `{"prompt": ..., "n": ...}` and expects
/// `{"texts": [...]}` back, retrying with exponential backoff.
pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

#[derive(serde::Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    n: usize,
}

#[derive(serde::Deserialize)]
struct CompleteResponse {
    texts: Vec<String>,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    fn attempt(&self, prompt: &str, n: usize) -> Result<Vec<String>, String> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(CompleteRequest { prompt, n })
            .map_err(|e| e.to_string())?;
        let body: CompleteResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.texts.len() < n {
            return Err(format!(
                "provider returned {} texts, asked for {n}",
                body.texts.len()
            ));
        }
        Ok(body.texts)
    }
}

impl DescriptionProvider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.config.endpoint)
    }

    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>, LanguageError> {
        let mut delay = self.config.backoff;
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            match self.attempt(prompt, n) {
                Ok(texts) => return Ok(texts),
                Err(e) => {
                    last_err = e;
                    if attempt < self.config.retries {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(LanguageError::Provider {
            provider: self.id(),
            message: format!(
                "failed after {} retries: {last_err}",
                self.config.retries
            ),
        })
    }
}
