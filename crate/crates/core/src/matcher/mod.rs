//! Two-stage identification of template/instance pairs.

mod perceptual;
mod queue;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::embeddings::{encode, normalize_rows, EmbedError, EmbeddingStore, Encoder, Modality, StoreMeta};
use crate::jsonl::{self, JsonlError};

pub use perceptual::{PerceptualScorer, PixelDifference};
pub use queue::{Verdict, VerificationQueue};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("image and text vectors differ in dimension ({image} vs {text})")]
    Dimension { image: usize, text: usize },
    #[error("{method:?} matching needs {expected:?} stores, got {found:?}")]
    StoreMismatch { method: JointMethod, expected: Modality, found: Modality },
    #[error("no templates to match against")]
    NoTemplates,
    #[error("no image known for {0:?}")]
    UnknownImage(String),
    #[error("candidate {0} is not pending review")]
    NotPending(String),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("only stage-2 candidates can be queued; {0} is not")]
    NotStage2(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMethod {
    Concat,
    Fusion,
}

impl JointMethod {
    pub fn modality(self) -> Modality {
        match self {
            JointMethod::Concat => Modality::JointConcat,
            JointMethod::Fusion => Modality::JointFusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    /// 1 − cosine similarity.
    Cosine,
}

impl Distance {
    pub fn between(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    let (x, y) = (f64::from(*x), f64::from(*y));
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub concat_threshold: f64,
    pub fusion_threshold: f64,
    pub perceptual_threshold: f64,
    pub concat_distance: Distance,
    pub fusion_distance: Distance,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            concat_threshold: 30.0,
            fusion_threshold: 1.0,
            perceptual_threshold: 1.0,
            concat_distance: Distance::Euclidean,
            fusion_distance: Distance::Cosine,
        }
    }
}

impl MatcherConfig {
    pub fn stage1(&self, method: JointMethod) -> (Distance, f64) {
        match method {
            JointMethod::Concat => (self.concat_distance, self.concat_threshold),
            JointMethod::Fusion => (self.fusion_distance, self.fusion_threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    Stage1Pass,
    Stage2Pass,
    Verified,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub candidate_id: String,
    pub instance_id: String,
    pub template_id: String,
    pub stage1_method: JointMethod,
    pub stage1_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_score: Option<f64>,
    pub status: MatchStatus,
    /// The instance was also matched to another template.
    #[serde(default)]
    pub conflicted: bool,
}

/// Stable id of an (instance, template) pair.
pub fn candidate_id(instance_id: &str, template_id: &str) -> String {
    let digest = Sha256::digest(format!("{instance_id}|{template_id}").as_bytes());
    hex::encode(&digest[..8])
}

impl MatchCandidate {
    pub fn new(instance_id: &str, template_id: &str, method: JointMethod, score: f64) -> Self {
        Self {
            candidate_id: candidate_id(instance_id, template_id),
            instance_id: instance_id.to_string(),
            template_id: template_id.to_string(),
            stage1_method: method,
            stage1_score: score,
            stage2_score: None,
            status: MatchStatus::Stage1Pass,
            conflicted: false,
        }
    }

    pub fn pair(&self) -> (&str, &str) {
        (&self.instance_id, &self.template_id)
    }
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    v.iter().map(|&x| if n > 0.0 { f64::from(x) / n } else { 0.0 }).collect()
}

/// Concatenation of the raw vectors, or the renormalised mean of the unit vectors.
pub fn joint_embedding(image: &[f32], text: &[f32], method: JointMethod) -> Result<Vec<f32>, MatchError> {
    if image.len() != text.len() {
        return Err(MatchError::Dimension { image: image.len(), text: text.len() });
    }
    Ok(match method {
        JointMethod::Concat => image.iter().chain(text).copied().collect(),
        JointMethod::Fusion => {
            let mean: Vec<f64> = unit(image).iter().zip(unit(text)).map(|(a, b)| (a + b) / 2.0).collect();
            unit(&mean.iter().map(|&x| x as f32).collect::<Vec<_>>()).into_iter().map(|x| x as f32).collect()
        }
    })
}

/// Row-wise [`joint_embedding`] of two stores sharing ids.
pub fn joint_store(images: &EmbeddingStore, texts: &EmbeddingStore, method: JointMethod) -> Result<EmbeddingStore, MatchError> {
    if images.dim() != texts.dim() {
        return Err(MatchError::Dimension { image: images.dim(), text: texts.dim() });
    }
    let rows = (0..images.len())
        .map(|i| joint_embedding(images.row(i), texts.row(i), method))
        .collect::<Result<Vec<_>, _>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    let meta = StoreMeta { encoder: images.meta.encoder.clone(), dimension: dim, modality: method.modality() };
    let mut store = EmbeddingStore::from_rows(images.ids.clone(), &rows, meta)?;
    store.normalized = method == JointMethod::Fusion;
    Ok(store)
}

/// Nearest template per instance, kept when its distance is within `threshold`.
/// Equal distances go to the smaller template id.
pub fn stage1_match(
    instances: &EmbeddingStore,
    templates: &EmbeddingStore,
    method: JointMethod,
    distance: Distance,
    threshold: f64,
) -> Result<Vec<MatchCandidate>, MatchError> {
    for s in [instances, templates] {
        if s.meta.modality != method.modality() {
            return Err(MatchError::StoreMismatch { method, expected: method.modality(), found: s.meta.modality });
        }
    }
    if templates.is_empty() {
        return Err(MatchError::NoTemplates);
    }
    let mut out = Vec::new();
    for (i, inst) in instances.rows().enumerate() {
        let mut best: Option<(f64, &str)> = None;
        for (j, tmpl) in templates.rows().enumerate() {
            let d = distance.between(inst, tmpl);
            let id = templates.ids[j].as_str();
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && id < bid),
            };
            if better {
                best = Some((d, id));
            }
        }
        let (d, template_id) = best.expect("templates non-empty");
        if d <= threshold {
            out.push(MatchCandidate::new(&instances.ids[i], template_id, method, d));
        }
    }
    Ok(out)
}

/// Image references for instances and templates.
#[derive(Debug, Clone, Default)]
pub struct ImageIndex {
    pub instances: HashMap<String, String>,
    pub templates: HashMap<String, String>,
}

impl ImageIndex {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self {
            instances: corpus.memes.iter().map(|m| (m.meme_id.clone(), m.image.clone())).collect(),
            templates: corpus.templates.iter().map(|t| (t.template_id.clone(), t.base_image.clone())).collect(),
        }
    }
}

/// Keeps candidates whose perceptual loss is within `threshold`.
pub fn stage2_perceptual(
    candidates: &[MatchCandidate],
    images: &ImageIndex,
    scorer: &dyn PerceptualScorer,
    threshold: f64,
) -> Result<Vec<MatchCandidate>, MatchError> {
    let mut out = Vec::new();
    for c in candidates {
        let a = images.instances.get(&c.instance_id).ok_or_else(|| MatchError::UnknownImage(c.instance_id.clone()))?;
        let b = images.templates.get(&c.template_id).ok_or_else(|| MatchError::UnknownImage(c.template_id.clone()))?;
        let loss = scorer.loss(a, b)?;
        if loss <= threshold {
            let mut c = c.clone();
            c.stage2_score = Some(loss);
            c.status = MatchStatus::Stage2Pass;
            out.push(c);
        }
    }
    Ok(out)
}

/// Union of two candidate lists on (instance, template).
///
/// A pair present in both keeps the smaller stage-1 score. Instances paired
/// with more than one template are marked `conflicted`. Output is sorted by pair.
pub fn merge_pairs(a: &[MatchCandidate], b: &[MatchCandidate]) -> Vec<MatchCandidate> {
    let mut merged: BTreeMap<(String, String), MatchCandidate> = BTreeMap::new();
    for c in a.iter().chain(b) {
        let key = (c.instance_id.clone(), c.template_id.clone());
        match merged.get(&key) {
            Some(old) if (old.stage1_score, old.stage1_method) <= (c.stage1_score, c.stage1_method) => {}
            _ => {
                merged.insert(key, c.clone());
            }
        }
    }
    let mut per_instance: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for (i, t) in merged.keys() {
        per_instance.entry(i).or_default().insert(t);
    }
    let conflicted: BTreeSet<String> =
        per_instance.into_iter().filter(|(_, ts)| ts.len() > 1).map(|(i, _)| i.to_string()).collect();
    merged
        .into_values()
        .map(|mut c| {
            c.conflicted = conflicted.contains(&c.instance_id);
            c
        })
        .collect()
}

/// Embeds images and texts for instances and templates.
///
/// Instances use their embedded text; templates use their name.
pub fn embed_for_matching(
    corpus: &Corpus,
    encoder: &dyn Encoder,
    method: JointMethod,
) -> Result<(EmbeddingStore, EmbeddingStore), MatchError> {
    let inst_img: Vec<_> = corpus.memes.iter().map(|m| (m.meme_id.clone(), m.image.clone())).collect();
    let inst_txt: Vec<_> = corpus.memes.iter().map(|m| (m.meme_id.clone(), m.embedded_text.clone())).collect();
    let tmpl_img: Vec<_> = corpus.templates.iter().map(|t| (t.template_id.clone(), t.base_image.clone())).collect();
    let tmpl_txt: Vec<_> = corpus.templates.iter().map(|t| (t.template_id.clone(), t.name.clone())).collect();
    let prep = |items: &[(String, String)], modality| -> Result<EmbeddingStore, MatchError> {
        let s = encode(items, modality, encoder)?;
        Ok(if method == JointMethod::Fusion { normalize_rows(&s)? } else { s })
    };
    let instances = joint_store(&prep(&inst_img, Modality::Image)?, &prep(&inst_txt, Modality::Text)?, method)?;
    let templates = joint_store(&prep(&tmpl_img, Modality::Image)?, &prep(&tmpl_txt, Modality::Text)?, method)?;
    Ok((instances, templates))
}

/// Stage 1 and stage 2 for each method, then the merged list.
pub fn run_pipeline(
    corpus: &Corpus,
    encoder: &dyn Encoder,
    scorer: &dyn PerceptualScorer,
    config: &MatcherConfig,
    methods: &[JointMethod],
) -> Result<Vec<MatchCandidate>, MatchError> {
    let images = ImageIndex::from_corpus(corpus);
    let mut merged = Vec::new();
    for &method in methods {
        let (instances, templates) = embed_for_matching(corpus, encoder, method)?;
        let (distance, threshold) = config.stage1(method);
        let s1 = stage1_match(&instances, &templates, method, distance, threshold)?;
        let s2 = stage2_perceptual(&s1, &images, scorer, config.perceptual_threshold)?;
        log::info!("{method:?}: {} stage-1, {} stage-2 candidates", s1.len(), s2.len());
        merged = merge_pairs(&merged, &s2);
    }
    Ok(merged)
}

pub fn save_candidates(path: &Path, candidates: &[MatchCandidate]) -> Result<(), MatchError> {
    Ok(jsonl::write(path, candidates)?)
}

pub fn load_candidates(path: &Path) -> Result<Vec<MatchCandidate>, MatchError> {
    Ok(jsonl::read(path)?)
}
