//! Attention and Grad-CAM grounding maps and their overlap.

use serde::{Deserialize, Serialize};

use crate::linguistics::{Concept, SinkEvent};
use crate::tensor::{Tape, TensorError, Var};
use crate::vlm::{ConceptLogit, DecodeState, VisionLanguageModel, VlmError};

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("no attention logged for step {0}")]
    StepNotLogged(usize),
    #[error("empty layer set")]
    EmptyLayerSet,
    #[error("layer {layer} outside the {layers} logged layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("grid mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("relative threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("no concept masks to combine")]
    EmptyConcepts,
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
}

pub type Result<T> = std::result::Result<T, GroundingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Attention,
    Gradcam,
}

/// A `grid x grid` map, max-normalized to `[0, 1]` (or identically zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    pub grid: usize,
    pub source: MapSource,
    /// Row-major cell values.
    pub values: Vec<f64>,
}

impl SpatialMap {
    /// Max-normalizes non-negative raw values.
    pub fn normalized(grid: usize, source: MapSource, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid * grid {
            return Err(GroundingError::InvalidMap(format!(
                "{} values for a {grid}x{grid} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GroundingError::InvalidMap("values must be finite and non-negative".into()));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        Ok(Self { grid, source, values })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.grid + c]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Binary PGM (P5), one byte per cell.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{0} {0}\n255\n", self.grid).into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub grid: usize,
    pub cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid * grid {
            return Err(GroundingError::InvalidMap(format!("{} cells for a {grid}x{grid} grid", cells.len())));
        }
        Ok(Self { grid, cells })
    }

    pub fn empty(grid: usize) -> Self {
        Self {
            grid,
            cells: vec![false; grid * grid],
        }
    }

    pub fn full(grid: usize) -> Self {
        Self {
            grid,
            cells: vec![true; grid * grid],
        }
    }

    /// Cells of the half-open box `[r0, r1) x [c0, c1)`, clipped to the grid.
    pub fn from_box(grid: usize, [r0, c0, r1, c1]: [usize; 4]) -> Self {
        let mut m = Self::empty(grid);
        for r in r0..r1.min(grid) {
            for c in c0..c1.min(grid) {
                m.cells[r * grid + c] = true;
            }
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.grid + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            grid: self.grid,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        same_grid(self, other)?;
        Ok(Self {
            grid: self.grid,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a || *b).collect(),
        })
    }
}

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.grid != b.grid || a.cells.len() != b.cells.len() {
        return Err(GroundingError::ShapeMismatch(a.grid, b.grid));
    }
    Ok(())
}

/// The (layer, head) chosen for i1 and its map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPick {
    pub map: SpatialMap,
    pub layer: usize,
    pub head: usize,
    /// Mean weight per image position of the chosen row.
    pub mean_mass: f64,
}

/// Picks the head with the highest mean image-position mass at `step` among
/// `layers`, reading post-modulation rows. Ties keep the earliest pair.
pub fn attention_map(state: &DecodeState, step: usize, layers: &[usize]) -> Result<AttentionPick> {
    if layers.is_empty() {
        return Err(GroundingError::EmptyLayerSet);
    }
    let logged = state.attention_log().get(step).ok_or(GroundingError::StepNotLogged(step))?;
    let n_img = state.grid() * state.grid();
    let mut best: Option<(usize, usize, f64)> = None;
    for &l in layers {
        let heads = logged.post.get(l).ok_or(GroundingError::LayerOutOfRange {
            layer: l,
            layers: logged.post.len(),
        })?;
        for (h, row) in heads.iter().enumerate() {
            if row.len() < n_img {
                return Err(GroundingError::InvalidMap(format!("row of length {} has no image segment", row.len())));
            }
            let mean = row[..n_img].iter().sum::<f64>() / n_img as f64;
            if best.is_none_or(|(_, _, m)| mean > m) {
                best = Some((l, h, mean));
            }
        }
    }
    let (layer, head, mean_mass) = best.ok_or(GroundingError::EmptyLayerSet)?;
    let row = &logged.post[layer][head][..n_img];
    let map = SpatialMap::normalized(state.grid(), MapSource::Attention, row.to_vec())?;
    Ok(AttentionPick {
        map,
        layer,
        head,
        mean_mass,
    })
}

/// Grad-CAM of scalar `logit` with respect to `activations` (`[P², channels]`).
///
/// Runs one backward pass; the caller resets the tape between calls.
pub fn gradcam(tape: &mut Tape, logit: Var, activations: Var, grid: usize) -> Result<SpatialMap> {
    if !tape.requires_grad(activations) {
        return Err(TensorError::Detached.into());
    }
    tape.backward(logit)?;
    let a = tape.value(activations);
    let (n, k) = (a.rows(), a.cols());
    if n != grid * grid {
        return Err(GroundingError::ShapeMismatch(n, grid * grid));
    }
    let weights: Vec<f64> = match tape.grad(activations) {
        Some(g) => (0..k).map(|c| (0..n).map(|p| g.at(p, c)).sum::<f64>() / n as f64).collect(),
        None => vec![0.0; k],
    };
    let raw: Vec<f64> = (0..n)
        .map(|p| (0..k).map(|c| weights[c] * a.at(p, c)).sum::<f64>().max(0.0))
        .collect();
    SpatialMap::normalized(grid, MapSource::Gradcam, raw)
}

/// Grad-CAM for one concept of a decode, resetting gradients first.
pub fn concept_gradcam<M: VisionLanguageModel + ?Sized>(
    model: &M,
    state: &mut DecodeState,
    concept: &Concept,
    mode: ConceptLogit,
) -> Result<SpatialMap> {
    state.tape_mut().zero_grad();
    let logit = model.concept_logit(state, concept, mode)?;
    let a = state.vision_activations();
    let grid = state.grid();
    gradcam(state.tape_mut(), logit, a, grid)
}

/// Cells with value `>= rel_threshold * max`; a zero map yields an empty mask.
pub fn binarize(map: &SpatialMap, rel_threshold: f64) -> Result<BinaryMask> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(GroundingError::Threshold(rel_threshold));
    }
    let max = map.max();
    let cells = if max > 0.0 {
        map.values.iter().map(|v| *v >= rel_threshold * max).collect()
    } else {
        vec![false; map.values.len()]
    };
    BinaryMask::new(map.grid, cells)
}

pub fn union_masks(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks.split_first().ok_or(GroundingError::EmptyConcepts)?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.or(m))
}

/// Intersection over union; two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_grid(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.cells.iter().zip(&b.cells) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn area_ratio(mask: &BinaryMask) -> f64 {
    if mask.cells.is_empty() {
        return 0.0;
    }
    mask.count() as f64 / mask.cells.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reinforce,
    Diffuse,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMask {
    pub concept: Concept,
    pub map: SpatialMap,
    pub mask: BinaryMask,
}

/// Outcome of one grounding check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub trigger: SinkEvent,
    pub concepts: Vec<Concept>,
    pub layer_set: Vec<usize>,
    pub selected_layer: Option<usize>,
    pub selected_head: Option<usize>,
    pub i1_map: Option<SpatialMap>,
    pub i1_mask: Option<BinaryMask>,
    pub per_concept: Vec<ConceptMask>,
    pub i2_mask: Option<BinaryMask>,
    pub overlap: Option<f64>,
    pub decision: Decision,
    /// Why the check was skipped, when it was.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}
