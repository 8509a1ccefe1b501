use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DecodeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expiry {
    /// Active until the next grounding trigger replaces or clears it.
    NextTrigger,
    /// Applies only to the forward pass of the trigger token itself.
    OneStep,
}

/// Scale applied to image-token attention in the target layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationDirective {
    pub scale: f64,
    pub target_layers: Vec<usize>,
    pub installed_at: usize,
    pub expires: Expiry,
}

impl ModulationDirective {
    pub fn targets(&self, layer: usize) -> bool {
        self.target_layers.contains(&layer)
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0
    }
}

/// Multiplies the image-position weights of `row` by `scale` and renormalizes.
///
/// Text positions keep their relative proportions. For prior image mass `m`
/// the new mass is `s*m / (s*m + 1 - m)`.
pub fn apply_directive(row: &[f64], scale: f64, image_positions: Range<usize>) -> Result<Vec<f64>, DecodeError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DecodeError::InvalidScale(scale));
    }
    if image_positions.end > row.len() {
        return Err(DecodeError::InvalidRow(format!(
            "image positions {image_positions:?} exceed row of length {}",
            row.len()
        )));
    }
    let mut out = row.to_vec();
    for v in &mut out[image_positions] {
        *v *= scale;
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(DecodeError::InvalidRow("row has no mass".into()));
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Mass of `row` that falls on `image_positions`.
pub fn image_mass(row: &[f64], image_positions: Range<usize>) -> f64 {
    row[image_positions].iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale_is_identity() {
        let row = [0.1, 0.2, 0.3, 0.4];
        let out = apply_directive(&row, 1.0, 0..2).unwrap();
        for (a, b) in row.iter().zip(&out) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_everything_is_a_no_op() {
        let row = [0.1, 0.2, 0.3, 0.4];
        let out = apply_directive(&row, 2.5, 0..4).unwrap();
        for (a, b) in row.iter().zip(&out) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_mass() {
        // image mass 0.4, scale 2 -> 0.8 / 1.4
        let row = [0.1, 0.3, 0.2, 0.4];
        let out = apply_directive(&row, 2.0, 0..2).unwrap();
        assert!((image_mass(&out, 0..2) - 0.8 / 1.4).abs() < 1e-12);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // text proportions kept
        assert!((out[3] / out[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(matches!(apply_directive(&[1.0], 0.0, 0..1), Err(DecodeError::InvalidScale(_))));
        assert!(matches!(apply_directive(&[1.0], -1.0, 0..1), Err(DecodeError::InvalidScale(_))));
        assert!(apply_directive(&[1.0], 1.0, 0..2).is_err());
    }
}
