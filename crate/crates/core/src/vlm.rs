//! Vision-language model adapter.
//!
//! Text embeddings are always L2-normalized. Image embeddings are kept raw
//! (they are the translator's regression target) and normalized only inside
//! [`vlm_similarity`], so similarities are cosine scores in `[-1, 1]`. No
//! logit scale or temperature is applied.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::RwLock;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Part,
    Color,
    Material,
    Other,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Object => "object",
            Category::Part => "part",
            Category::Color => "color",
            Category::Material => "material",
            Category::Other => "other",
        };
        f.write_str(s)
    }
}

/// A concept label with its category and the prompt text derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ConceptText {
    pub label: String,
    pub category: Category,
    pub templated: String,
}

/// Builds the prompt for a concept label:
///
/// | category        | prompt                                 |
/// |-----------------|----------------------------------------|
/// | object, part    | `a photo of a {label}`                 |
/// | color           | `a photo of a {label} object`          |
/// | material        | `a photo of an object made of {label}` |
/// | other           | `a photo of {label}`                   |
pub fn apply_template(label: &str, category: Category) -> Result<ConceptText> {
    if label.is_empty() {
        return Err(Error::config("concept label must be non-empty"));
    }
    let templated = match category {
        Category::Object | Category::Part => format!("a photo of a {label}"),
        Category::Color => format!("a photo of a {label} object"),
        Category::Material => format!("a photo of an object made of {label}"),
        Category::Other => format!("a photo of {label}"),
    };
    Ok(ConceptText {
        label: label.to_string(),
        category,
        templated,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptEntry {
    label: String,
    category: Category,
}

/// Parses a concept set: a JSON list of `{"label": ..., "category": ...}`.
pub fn parse_concept_set(json: &str) -> std::result::Result<Vec<ConceptText>, String> {
    let entries: Vec<ConceptEntry> = serde_json::from_str(json).map_err(|e| e.to_string())?;
    entries
        .iter()
        .map(|e| apply_template(&e.label, e.category).map_err(|e| e.to_string()))
        .collect()
}

pub fn load_concept_set(path: &Path) -> Result<Vec<ConceptText>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_concept_set(&text).map_err(|msg| Error::config(format!("{}: {msg}", path.display())))
}

/// Serializes a concept set in the on-disk form (templated text omitted).
pub fn concept_set_json(concepts: &[ConceptText]) -> String {
    let entries: Vec<serde_json::Value> = concepts
        .iter()
        .map(|c| serde_json::json!({"label": c.label, "category": c.category}))
        .collect();
    serde_json::to_string_pretty(&entries).expect("plain values serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Array1<f64>,
    pub modality: Modality,
    pub normalized: bool,
}

impl Embedding {
    pub fn text(values: Array1<f64>) -> Self {
        Self {
            values: l2_normalize(&values),
            modality: Modality::Text,
            normalized: true,
        }
    }

    pub fn image(values: Array1<f64>) -> Self {
        Self {
            values,
            modality: Modality::Image,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Unit vector in the direction of `v`; the zero vector maps to itself.
pub fn l2_normalize(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// Paired text and image encoders sharing one embedding space.
pub trait VisionLanguageModel: Send + Sync {
    /// Stable identifier used as part of cache keys.
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Raw text embedding; [`embed`] normalizes it.
    fn encode_text(&self, text: &ConceptText) -> Result<Array1<f64>>;

    /// Raw image embedding.
    fn encode_image(&self, image: &Image) -> Result<Array1<f64>>;
}

pub enum EmbedInput<'a> {
    Text(&'a ConceptText),
    Image(&'a Image),
}

/// Embeds text (normalized) or an image (raw).
pub fn embed(vlm: &dyn VisionLanguageModel, input: EmbedInput<'_>) -> Result<Embedding> {
    let emb = match input {
        EmbedInput::Text(t) => Embedding::text(vlm.encode_text(t)?),
        EmbedInput::Image(img) => Embedding::image(vlm.encode_image(img)?),
    };
    if emb.dim() != vlm.dim() {
        return Err(Error::Dimension(format!(
            "{} produced a {}-dim embedding, declared {}",
            vlm.id(),
            emb.dim(),
            vlm.dim()
        )));
    }
    Ok(emb)
}

/// Cosine similarity of the two embeddings (each normalized first).
pub fn vlm_similarity(img_emb: &Embedding, txt_emb: &Embedding) -> Result<f64> {
    cosine(&img_emb.values, &txt_emb.values)
}

pub(crate) fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "similarity between {}-dim and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b) / (na * nb))
}

/// Gradient of `cos(v, t_unit)` with respect to `v`, for a unit `t_unit`.
pub(crate) fn cosine_gradient(v: &Array1<f64>, t_unit: &Array1<f64>) -> Array1<f64> {
    let n2 = v.dot(v);
    if n2 == 0.0 {
        return Array1::zeros(v.len());
    }
    let n = n2.sqrt();
    let c = v.dot(t_unit) / n;
    (t_unit - &(v * (c / n))) / n
}

/// Text embeddings keyed by `(vlm id, templated text)`, safe for concurrent
/// insertion.
#[derive(Debug, Default)]
pub struct TextEmbeddingCache {
    entries: RwLock<HashMap<(String, String), Embedding>>,
}

impl TextEmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_embed(
        &self,
        vlm: &dyn VisionLanguageModel,
        concept: &ConceptText,
    ) -> Result<Embedding> {
        let key = (vlm.id().to_string(), concept.templated.clone());
        if let Some(e) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let emb = embed(vlm, EmbedInput::Text(concept))?;
        self.entries
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| emb.clone());
        Ok(emb)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
