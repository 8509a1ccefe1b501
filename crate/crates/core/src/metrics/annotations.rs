use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Ground truth for one image. Boxes are half-open `[r0, c0, r1, c1]` in
/// patch-grid cells.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub objects: Vec<String>,
    #[serde(default)]
    pub boxes: BTreeMap<String, [usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    /// Patch-grid side the boxes refer to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    pub images: BTreeMap<String, ImageAnnotation>,
    /// Object word -> canonical label.
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    /// Object categories beyond those annotated on some image.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub categories: BTreeSet<String>,
}

impl AnnotationSet {
    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let set: Self = serde_json::from_str(text).map_err(|e| MetricsError::InvalidAnnotations(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotations serialize")
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::InvalidAnnotations(m));
        for (id, img) in &self.images {
            let unique: BTreeSet<&String> = img.objects.iter().collect();
            if unique.len() != img.objects.len() {
                return bad(format!("{id}: duplicate object labels"));
            }
            for (label, b) in &img.boxes {
                if !unique.contains(label) {
                    return bad(format!("{id}: box for unlisted object {label:?}"));
                }
                if b[0] >= b[2] || b[1] >= b[3] {
                    return bad(format!("{id}: empty box for {label:?}"));
                }
                if let Some(g) = self.grid {
                    if b[2] > g || b[3] > g {
                        return bad(format!("{id}: box for {label:?} outside the {g}x{g} grid"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Result<&ImageAnnotation, MetricsError> {
        self.images.get(id).ok_or_else(|| MetricsError::UnknownImage(id.to_string()))
    }

    /// Every label that counts as an object: categories, synonym targets and
    /// annotated objects.
    pub fn labels(&self) -> BTreeSet<&str> {
        self.synonyms
            .values()
            .chain(&self.categories)
            .map(String::as_str)
            .chain(self.images.values().flat_map(|i| i.objects.iter().map(String::as_str)))
            .collect()
    }

    /// Maps a noun or noun phrase to its object label: the full surface, then
    /// its head noun, each looked up as a synonym or as a label.
    pub fn canonicalize(&self, surface: &str) -> Option<String> {
        let labels = self.labels();
        let lookup = |w: &str| {
            self.synonyms
                .get(w)
                .cloned()
                .or_else(|| labels.contains(w).then(|| w.to_string()))
        };
        let surface = surface.trim().to_lowercase();
        lookup(&surface).or_else(|| surface.split_whitespace().last().and_then(lookup))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> AnnotationSet {
        AnnotationSet::from_json(
            r#"{"grid": 4,
                "images": {"a": {"objects": ["circle", "dog"], "boxes": {"circle": [0, 0, 2, 2]}}},
                "synonyms": {"ball": "circle", "dining table": "table"},
                "categories": ["tree"]}"#,
        )
        .unwrap()
    }

    #[test]
    fn canonical_forms() {
        let s = set();
        assert_eq!(s.canonicalize("ball").as_deref(), Some("circle"));
        assert_eq!(s.canonicalize("red ball").as_deref(), Some("circle"));
        assert_eq!(s.canonicalize("dining table").as_deref(), Some("table"));
        assert_eq!(s.canonicalize("big dog").as_deref(), Some("dog"));
        assert_eq!(s.canonicalize("tall tree").as_deref(), Some("tree"));
        assert_eq!(s.canonicalize("corner"), None);
    }

    #[test]
    fn rejects_bad_boxes() {
        let mut s = set();
        s.images.get_mut("a").unwrap().boxes.insert("dog".into(), [3, 3, 5, 4]);
        assert!(s.validate().is_err());
        let mut s = set();
        s.images.get_mut("a").unwrap().boxes.insert("cat".into(), [0, 0, 1, 1]);
        assert!(s.validate().is_err());
        let mut s = set();
        s.images.get_mut("a").unwrap().objects.push("dog".into());
        assert!(s.validate().is_err());
    }
}
