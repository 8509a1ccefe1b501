use serde::{Deserialize, Serialize};

use super::{AnnotationSet, MetricsError};
use crate::linguistics::{extract_concepts_from_words, tokenize, ConceptKind, PosLexicon};

/// Canonical object labels mentioned in `caption`, first occurrence order,
/// each at most once.
pub fn object_mentions(caption: &str, annotations: &AnnotationSet, pos: &PosLexicon) -> Vec<String> {
    let tokens = tokenize(caption);
    let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let mut out: Vec<String> = Vec::new();
    for c in extract_concepts_from_words(&words, 0, pos) {
        if c.kind == ConceptKind::Adjective {
            continue;
        }
        if let Some(label) = annotations.canonicalize(&c.surface) {
            if !out.contains(&label) {
                out.push(label);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionChair {
    pub image_id: String,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub c_s: f64,
    pub c_i: f64,
    pub n_captions: usize,
    pub n_mentions: usize,
    pub n_hallucinated: usize,
    pub captions: Vec<CaptionChair>,
}

/// CHAIR over `(image id, caption)` pairs. An empty input scores zero.
pub fn chair(captions: &[(String, String)], annotations: &AnnotationSet, pos: &PosLexicon) -> Result<ChairResult, MetricsError> {
    let mut per = Vec::with_capacity(captions.len());
    for (id, caption) in captions {
        let gt = &annotations.image(id)?.objects;
        let mentioned = object_mentions(caption, annotations, pos);
        let hallucinated = mentioned.iter().filter(|m| !gt.contains(m)).cloned().collect();
        per.push(CaptionChair {
            image_id: id.clone(),
            mentioned,
            hallucinated,
        });
    }
    let n_mentions: usize = per.iter().map(|c| c.mentioned.len()).sum();
    let n_hallucinated: usize = per.iter().map(|c| c.hallucinated.len()).sum();
    let bad_captions = per.iter().filter(|c| !c.hallucinated.is_empty()).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ChairResult {
        c_s: ratio(bad_captions, per.len()),
        c_i: ratio(n_hallucinated, n_mentions),
        n_captions: per.len(),
        n_mentions,
        n_hallucinated,
        captions: per,
    })
}

/// Fraction of the image's ground-truth objects mentioned in `caption`.
pub fn cover(image_id: &str, caption: &str, annotations: &AnnotationSet, pos: &PosLexicon) -> Result<f64, MetricsError> {
    let gt = &annotations.image(image_id)?.objects;
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth(image_id.to_string()));
    }
    let mentioned = object_mentions(caption, annotations, pos);
    let hit = gt.iter().filter(|g| mentioned.contains(g)).count();
    Ok(hit as f64 / gt.len() as f64)
}
