//! Pipeline configuration: defaults, then a config file, then `MEMEKIT_*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memekit::finetune::FinetuneConfig;
use memekit::matcher::MatcherConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub min_instances: usize,
    pub min_text_tokens: usize,
    pub top_k: usize,
    pub val_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { min_instances: 150, min_text_tokens: 0, top_k: 50, val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateSection {
    pub prompt: String,
    pub with_context: bool,
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self { prompt: "gpt4o-5task".into(), with_context: true, max_in_flight: 4, retries: 2, backoff_ms: 1000 }
    }
}

/// Which encoder backs `embed`, `match` and `eval-retrieval`.
///
/// `name` is `hash` (pixel thumbnails), `hash-ref` (hashes the image
/// reference string) or `checkpoint:<dir>` for a fine-tuned encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub name: String,
    pub dim: usize,
    pub max_text_tokens: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { name: "hash".into(), dim: 256, max_text_tokens: Some(77) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    pub texts: Vec<String>,
    pub ks: Vec<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            texts: ["meme_caption", "image_caption", "embedded_text", "title"].map(String::from).to_vec(),
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub strategy: String,
    pub metrics: Vec<String>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { strategy: "best_match".into(), metrics: ["chrf", "rouge_l", "bleu4"].map(String::from).to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    pub port: u16,
    pub host: String,
    pub data_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    /// Never hashed or written to artifacts.
    #[serde(skip_serializing)]
    pub admin_token: Option<String>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self { port: 8080, host: "127.0.0.1".into(), data_dir: PathBuf::from("review-data"), ui_dir: None, admin_token: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub log_level: String,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub annotate: AnnotateSection,
    pub encoder: EncoderSection,
    pub matcher: MatcherConfig,
    pub retrieval: RetrievalSection,
    pub finetune: FinetuneConfig,
    /// A separate finetune file; its fields override `finetune`.
    pub finetune_config: Option<PathBuf>,
    pub metrics: MetricsSection,
    pub service: ServiceSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log_level: "info".into(),
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            annotate: AnnotateSection::default(),
            encoder: EncoderSection::default(),
            matcher: MatcherConfig::default(),
            retrieval: RetrievalSection::default(),
            finetune: FinetuneConfig::default(),
            finetune_config: None,
            metrics: MetricsSection::default(),
            service: ServiceSection::default(),
        }
    }
}

/// Environment variables and the config key each one sets.
pub const ENV_KEYS: &[(&str, &str)] = &[
    ("MEMEKIT_SEED", "seed"),
    ("MEMEKIT_LOG_LEVEL", "log_level"),
    ("MEMEKIT_CORPUS", "paths.corpus"),
    ("MEMEKIT_ANNOTATIONS", "paths.annotations"),
    ("MEMEKIT_EMBEDDINGS", "paths.embeddings"),
    ("MEMEKIT_REPORTS", "paths.reports"),
    ("MEMEKIT_CHECKPOINTS", "paths.checkpoints"),
    ("MEMEKIT_ENCODER", "encoder.name"),
    ("MEMEKIT_ENCODER_DIM", "encoder.dim"),
    ("MEMEKIT_PROMPT", "annotate.prompt"),
    ("MEMEKIT_MAX_IN_FLIGHT", "annotate.max_in_flight"),
    ("MEMEKIT_RETRIES", "annotate.retries"),
    ("MEMEKIT_BACKOFF_MS", "annotate.backoff_ms"),
    ("MEMEKIT_CONCAT_THRESHOLD", "matcher.concat_threshold"),
    ("MEMEKIT_FUSION_THRESHOLD", "matcher.fusion_threshold"),
    ("MEMEKIT_PERCEPTUAL_THRESHOLD", "matcher.perceptual_threshold"),
    ("MEMEKIT_PORT", "service.port"),
    ("MEMEKIT_HOST", "service.host"),
    ("MEMEKIT_DATA_DIR", "service.data_dir"),
    ("MEMEKIT_UI_DIR", "service.ui_dir"),
    ("MEMEKIT_ADMIN_TOKEN", "service.admin_token"),
];

fn read_table(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(table)?
    };
    if !value.is_object() {
        bail!("config {} must be a table", path.display());
    }
    Ok(value)
}

fn finetune_fields() -> Vec<String> {
    match serde_json::to_value(FinetuneConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Moves top-level finetune fields under `finetune`, so a bare finetune
/// file works as `--config`. `seed` stays at the top level as well.
fn lift_finetune_fields(value: &mut Value) {
    let fields = finetune_fields();
    let Value::Object(top) = value else { return };
    let mut lifted = Map::new();
    for f in &fields {
        if f == "seed" {
            continue;
        }
        if let Some(v) = top.remove(f) {
            lifted.insert(f.clone(), v);
        }
    }
    if lifted.is_empty() {
        return;
    }
    if let Some(seed) = top.get("seed") {
        lifted.insert("seed".into(), seed.clone());
    }
    let section = top.entry("finetune").or_insert_with(|| Value::Object(Map::new()));
    if let Value::Object(s) = section {
        s.extend(lifted);
    }
}

/// Relative paths inside a config file are relative to that file.
fn anchor_paths(value: &mut Value, base: &Path) {
    let keys = [
        "paths.corpus",
        "paths.annotations",
        "paths.embeddings",
        "paths.reports",
        "paths.checkpoints",
        "finetune_config",
        "service.data_dir",
        "service.ui_dir",
    ];
    for key in keys {
        if let Some(Value::String(s)) = pointer_mut(value, key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).display().to_string();
            }
        }
    }
}

fn pointer_mut<'a>(value: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    value.pointer_mut(&format!("/{}", key.replace('.', "/")))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_key(value: &mut Value, key: &str, v: Value) {
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else { return };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), v);
            return;
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

/// Env values are read as JSON when they parse (numbers, booleans) and as strings otherwise.
fn env_value(raw: &str) -> Value {
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_))) => v,
        _ => Value::String(raw.to_string()),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then `file`, then the environment. Flags are applied by the caller.
pub fn load(file: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default())?;
    if let Some(path) = file {
        let mut layer = read_table(path)?;
        lift_finetune_fields(&mut layer);
        anchor_paths(&mut layer, path.parent().unwrap_or(Path::new(".")));
        merge(&mut value, layer);
        if let Some(Value::String(ft)) = value.get("finetune_config").cloned() {
            let mut ft_layer = read_table(Path::new(&ft))?;
            lift_finetune_fields(&mut ft_layer);
            if let Some(section) = ft_layer.get("finetune").cloned() {
                merge(&mut value, serde_json::json!({ "finetune": section }));
            }
        }
    }
    for (var, key) in ENV_KEYS {
        if let Some(raw) = env(var).filter(|v| !v.is_empty()) {
            set_key(&mut value, key, env_value(&raw));
        }
    }
    serde_json::from_value(value).context("invalid configuration")
}
