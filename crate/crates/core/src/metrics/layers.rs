use serde::{Deserialize, Serialize};

use super::{attention_entropy, AnnotationSet, MetricsError};
use crate::decoder::DecodeRun;
use crate::grounding::{binarize, iou, BinaryMask, MapSource, SpatialMap};
use crate::linguistics::{extract_concepts_from_words, ConceptKind, PosLexicon};
use crate::vlm::{StepAttention, Vocabulary};

/// Emitted tokens of one decode with their unmodulated attention rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSample {
    pub image_id: String,
    pub grid: usize,
    pub tokens: Vec<String>,
    pub attention: Vec<StepAttention>,
}

impl LayerSample {
    pub fn from_run(image_id: &str, run: &DecodeRun, vocab: &Vocabulary) -> Self {
        Self {
            image_id: image_id.to_string(),
            grid: run.state.grid(),
            tokens: run
                .state
                .generated()
                .iter()
                .map(|t| vocab.word(*t).unwrap_or("<unk>").to_string())
                .collect(),
            attention: run.state.attention_log().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysisRow {
    pub layer: usize,
    pub mean_iou: f64,
    pub mean_entropy: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub rows: Vec<LayerAnalysisRow>,
    /// Samples without any concept matched to a ground-truth box.
    pub skipped: Vec<String>,
}

impl LayerAnalysis {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_iou,mean_entropy,n_samples\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{}\n", r.layer, r.mean_iou, r.mean_entropy, r.n_samples));
        }
        out
    }
}

/// Per-layer IoU against ground-truth boxes and image-attention entropy, for
/// the tokens of concepts that name a boxed object.
///
/// Heads are averaged within a layer. Each sample contributes the mean over
/// its matched tokens; rows average over samples.
pub fn layer_analysis(
    samples: &[LayerSample],
    annotations: &AnnotationSet,
    pos: &PosLexicon,
    rel_threshold: f64,
) -> Result<LayerAnalysis, MetricsError> {
    if !annotations.images.is_empty() && annotations.images.values().all(|i| i.boxes.is_empty()) {
        return Err(MetricsError::InvalidAnnotations("no bounding boxes to analyse against".into()));
    }
    let n_layers = samples
        .iter()
        .flat_map(|s| s.attention.first())
        .map(|a| a.pre.len())
        .max()
        .unwrap_or(0);
    let mut sums = vec![(0.0, 0.0); n_layers];
    let mut used = 0;
    let mut skipped = Vec::new();
    for sample in samples {
        match sample_means(sample, annotations, pos, rel_threshold, n_layers)? {
            Some(per_layer) => {
                used += 1;
                for (acc, (i, h)) in sums.iter_mut().zip(per_layer) {
                    acc.0 += i;
                    acc.1 += h;
                }
            }
            None => skipped.push(sample.image_id.clone()),
        }
    }
    let rows = if used == 0 {
        Vec::new()
    } else {
        sums.into_iter()
            .enumerate()
            .map(|(layer, (i, h))| LayerAnalysisRow {
                layer,
                mean_iou: i / used as f64,
                mean_entropy: h / used as f64,
                n_samples: used,
            })
            .collect()
    };
    Ok(LayerAnalysis { rows, skipped })
}

fn sample_means(
    sample: &LayerSample,
    annotations: &AnnotationSet,
    pos: &PosLexicon,
    rel_threshold: f64,
    n_layers: usize,
) -> Result<Option<Vec<(f64, f64)>>, MetricsError> {
    let gt = annotations.image(&sample.image_id)?;
    let n_img = sample.grid * sample.grid;
    let words: Vec<&str> = sample
        .tokens
        .iter()
        .map(|t| if t.starts_with('<') { "." } else { t.as_str() })
        .collect();
    let mut sums = vec![(0.0, 0.0); n_layers];
    let mut matched = 0;
    for concept in extract_concepts_from_words(&words, 0, pos) {
        if concept.kind == ConceptKind::Adjective {
            continue;
        }
        let Some(b) = annotations.canonicalize(&concept.surface).and_then(|l| gt.boxes.get(&l).copied()) else {
            continue;
        };
        let step = concept.span.end - 1;
        let Some(att) = sample.attention.get(step) else { continue };
        if att.pre.len() != n_layers {
            continue;
        }
        let gt_mask = BinaryMask::from_box(sample.grid, b);
        matched += 1;
        for (l, heads) in att.pre.iter().enumerate() {
            let mut slice = vec![0.0; n_img];
            for row in heads {
                for (s, v) in slice.iter_mut().zip(&row[..n_img]) {
                    *s += v / heads.len() as f64;
                }
            }
            let map = SpatialMap::normalized(sample.grid, MapSource::Attention, slice.clone())?;
            sums[l].0 += iou(&binarize(&map, rel_threshold)?, &gt_mask)?;
            sums[l].1 += attention_entropy(&slice)?;
        }
    }
    if matched == 0 {
        return Ok(None);
    }
    Ok(Some(sums.into_iter().map(|(i, h)| (i / matched as f64, h / matched as f64)).collect()))
}
