use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{shape_synonyms, Color, Scene, SceneObject, Shape};
use super::HarnessError;
use crate::linguistics::{extract_concepts_from_words, ConceptKind, PosLexicon, SinkLexicon, SinkTracker};
use crate::metrics::{AnnotationSet, ImageAnnotation};
use crate::vlm::{Image, OracleScript, Reroute, RerouteWhen};

pub const DEFAULT_PROMPT: &str = "please describe this image in detail .";
pub const ORACLE_LAYERS: usize = 6;
pub const ORACLE_HEADS: usize = 2;

/// Where a scripted caption hallucinates, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Clean,
    /// Hallucinated object right after a badly grounded sink, before step 10.
    EarlyHalluc,
    /// Same, after step 10.
    LateHalluc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub id: String,
    pub kind: ScenarioKind,
    pub scene: Scene,
    /// Scripted caption without the end token.
    pub caption: String,
    pub halluc_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub grid: usize,
    pub patch: usize,
    pub channels: usize,
    pub prompt: String,
    pub scenarios: Vec<ScenarioMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageIndex {
    size: usize,
    channels: usize,
    encoding: String,
    ids: Vec<String>,
}

/// One generated image with its ground truth and oracle script.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub meta: ScenarioMeta,
    pub image: Image,
    pub annotation: ImageAnnotation,
    pub script: OracleScript,
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn object_word(rng: &mut ChaCha8Rng, shape: Shape) -> String {
    if rng.random_bool(0.3) {
        shape.synonyms().choose(rng).expect("every shape has synonyms").to_string()
    } else {
        shape.label().to_string()
    }
}

fn words(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn clause(rng: &mut ChaCha8Rng, o: &SceneObject, grid: usize) -> Vec<String> {
    let (v, h) = o.location(grid);
    let c = o.color.word();
    let w = object_word(rng, o.shape);
    if rng.random_bool(0.5) {
        words(&[article(c), c, &w, "is", "near", "the", v, h, "corner"])
    } else {
        words(&["there", "is", article(c), c, &w, "at", "the", v])
    }
}

/// Builds the scripted caption, annotations and oracle script of scene `index`.
pub fn build_scenario(seed: u64, index: usize, grid: usize, patch: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let scene = Scene::random(&mut rng, grid);
    let kind = match index % 4 {
        1 => ScenarioKind::EarlyHalluc,
        2 => ScenarioKind::LateHalluc,
        _ => ScenarioKind::Clean,
    };
    let first = &scene.objects[0];
    let present: Vec<Shape> = scene.objects.iter().map(|o| o.shape).collect();
    let absent: Vec<Shape> = Shape::ALL.iter().copied().filter(|s| !present.contains(s)).collect();
    let halluc_shape = *absent.choose(&mut rng).expect("scenes use at most three shapes");
    let used: Vec<Color> = scene.objects.iter().map(|o| o.color).collect();
    let free_colors: Vec<Color> = Color::ALL.iter().copied().filter(|c| !used.contains(c)).collect();
    let halluc_color = free_colors.choose(&mut rng).expect("colors outnumber objects").word();

    let mut tokens: Vec<String> = Vec::new();
    let mut halluc_step = None;
    let mut misgrounded_sink = None;
    let (v0, h0) = first.location(grid);
    let c0 = first.color.word();
    let w0 = object_word(&mut rng, first.shape);
    match kind {
        ScenarioKind::Clean => tokens.extend(clause(&mut rng, first, grid)),
        ScenarioKind::EarlyHalluc => {
            tokens.extend(words(&[article(c0), c0, &w0, "is", "at", "the", v0]));
            misgrounded_sink = Some(tokens.len());
            tokens.push(",".into());
            tokens.push("a".into());
            halluc_step = Some(tokens.len());
            tokens.extend(words(&[halluc_shape.label(), "sits", "below", "it"]));
        }
        ScenarioKind::LateHalluc => {
            tokens.extend(words(&[article(c0), c0, &w0, "is", "in", "the", v0, h0, "corner", "of", "the", "image"]));
            misgrounded_sink = Some(tokens.len());
            tokens.push(".".into());
            tokens.extend(words(&[article(halluc_color), halluc_color]));
            halluc_step = Some(tokens.len());
            tokens.extend(words(&[halluc_shape.label(), "is", "near", "it"]));
        }
    }
    for o in &scene.objects[1..] {
        tokens.push([",", "and", "."].choose(&mut rng).expect("non-empty").to_string());
        tokens.extend(clause(&mut rng, o, grid));
    }
    tokens.push(".".into());

    let annotation = ImageAnnotation {
        objects: scene.objects.iter().map(|o| o.shape.label().to_string()).collect(),
        boxes: scene.objects.iter().map(|o| (o.shape.label().to_string(), o.bbox)).collect(),
    };
    let script = build_script(
        &scene,
        &annotation,
        &tokens,
        halluc_step,
        misgrounded_sink,
        first.shape.label(),
        &mut rng,
    );
    Scenario {
        meta: ScenarioMeta {
            id: image_id(index),
            kind,
            scene: scene.clone(),
            caption: tokens.join(" "),
            halluc_steps: halluc_step.into_iter().collect(),
        },
        image: scene.render(patch),
        annotation,
        script,
    }
}

fn cells_of(grid: usize, b: [usize; 4]) -> Vec<usize> {
    (b[0]..b[2]).flat_map(|r| (b[1]..b[3]).map(move |c| r * grid + c)).collect()
}

fn spread(grid: usize, cells: &[usize], mass: f64) -> Vec<f64> {
    let mut row = vec![0.0; grid * grid];
    for c in cells {
        row[*c] += mass / cells.len() as f64;
    }
    row
}

/// Box moved one cell sideways (or vertically on a one-column grid), kept in bounds.
fn shifted(grid: usize, [r0, c0, r1, c1]: [usize; 4]) -> [usize; 4] {
    if c1 < grid {
        [r0, c0 + 1, r1, c1 + 1]
    } else if c0 > 0 {
        [r0, c0 - 1, r1, c1 - 1]
    } else if r1 < grid {
        [r0 + 1, c0, r1 + 1, c1]
    } else {
        [r0 - 1, c0, r1 - 1, c1]
    }
}

fn build_script(
    scene: &Scene,
    annotation: &ImageAnnotation,
    tokens: &[String],
    halluc_step: Option<usize>,
    misgrounded_sink: Option<usize>,
    reroute_to: &str,
    rng: &mut ChaCha8Rng,
) -> OracleScript {
    let grid = scene.grid;
    let synonyms = shape_synonyms();
    let canon = AnnotationSet {
        grid: Some(grid),
        images: BTreeMap::from([("_".to_string(), annotation.clone())]),
        synonyms,
        ..AnnotationSet::default()
    };
    let pos = PosLexicon::default();
    let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let concepts: Vec<_> = extract_concepts_from_words(&refs, 0, &pos)
        .into_iter()
        .filter(|c| c.kind != ConceptKind::Adjective)
        .filter(|c| Some(c.span.end - 1) != halluc_step)
        .filter_map(|c| {
            let b = canon.canonicalize(&c.surface).and_then(|l| annotation.boxes.get(&l).copied())?;
            Some((c, b))
        })
        .collect();

    let mut attention: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut gradcam = BTreeMap::new();
    for (c, b) in &concepts {
        gradcam.insert(c.surface.clone(), spread(grid, &cells_of(grid, *b), 1.0));
        let inside = spread(grid, &cells_of(grid, *b), 0.7);
        let late: Vec<f64> = spread(grid, &cells_of(grid, shifted(grid, *b)), 0.35)
            .iter()
            .map(|v| v + 0.35 / (grid * grid) as f64)
            .collect();
        let rows = attention.entry((c.span.end - 1).to_string()).or_default();
        for l in 0..ORACLE_LAYERS {
            let row = match l {
                2 | 3 => &inside,
                4 | 5 => &late,
                _ => continue,
            };
            for h in 0..ORACLE_HEADS {
                rows.insert(format!("{l}.{h}"), row.clone());
            }
        }
    }

    let occupied: Vec<usize> = scene.objects.iter().flat_map(|o| cells_of(grid, o.bbox)).collect();
    let mut free: Vec<usize> = (0..grid * grid).filter(|c| !occupied.contains(c)).collect();
    rand::seq::SliceRandom::shuffle(free.as_mut_slice(), rng);
    free.truncate(2);
    free.sort_unstable();

    let sinks = SinkLexicon::default();
    let mut tracker = SinkTracker::new();
    for (step, w) in tokens.iter().enumerate() {
        let Some(ev) = tracker.observe(step, crate::vlm::TokenId(0), sinks.contains(w)) else {
            continue;
        };
        let mut union: Vec<usize> = concepts
            .iter()
            .filter(|(c, _)| c.span.start >= ev.segment.start && c.span.end <= ev.segment.end)
            .flat_map(|(_, b)| cells_of(grid, *b))
            .collect();
        union.sort_unstable();
        union.dedup();
        let target = if Some(step) == misgrounded_sink {
            free.clone()
        } else {
            union
        };
        if target.is_empty() {
            continue;
        }
        let row = spread(grid, &target, 0.8);
        let rows = attention.entry(step.to_string()).or_default();
        for l in [2, 3] {
            rows.insert(format!("{l}.0"), row.clone());
        }
    }

    let mut halluc_labels = vec![false; tokens.len()];
    let mut reroute = BTreeMap::new();
    if let Some(h) = halluc_step {
        halluc_labels[h] = true;
        reroute.insert(
            h.to_string(),
            Reroute {
                when: RerouteWhen::Diffuse,
                token: reroute_to.to_string(),
                halluc: false,
            },
        );
    }
    OracleScript {
        grid,
        layers: ORACLE_LAYERS,
        heads: ORACLE_HEADS,
        tokens: tokens.to_vec(),
        attention,
        gradcam,
        gt_objects: annotation.objects.clone(),
        halluc_labels,
        reroute,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Corpus(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Corpus(format!("{}: {e}", path.display())))
}

/// Writes a corpus of `size` scenes under `dir`.
pub fn write_corpus(dir: &Path, size: usize, seed: u64, grid: usize, patch: usize) -> Result<CorpusMeta, HarnessError> {
    if grid < 2 || patch == 0 {
        return Err(HarnessError::Corpus(format!("grid {grid} must be >= 2 and patch {patch} positive")));
    }
    for sub in ["images", "scripts"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| HarnessError::io(&p, e))?;
    }
    let mut annotations = AnnotationSet {
        grid: Some(grid),
        images: BTreeMap::new(),
        synonyms: shape_synonyms(),
        categories: Shape::ALL.iter().map(|s| s.label().to_string()).collect(),
    };
    let mut scenarios = Vec::with_capacity(size);
    for i in 0..size {
        let s = build_scenario(seed, i, grid, patch);
        let id = s.meta.id.clone();
        let img_path = dir.join("images").join(format!("{id}.bin"));
        fs::write(&img_path, s.image.to_le_bytes()).map_err(|e| HarnessError::io(&img_path, e))?;
        write_json(&dir.join("scripts").join(format!("{id}.json")), &s.script)?;
        annotations.images.insert(id, s.annotation);
        scenarios.push(s.meta);
    }
    let meta = CorpusMeta {
        version: 1,
        seed,
        size,
        grid,
        patch,
        channels: 3,
        prompt: DEFAULT_PROMPT.to_string(),
        scenarios,
    };
    write_json(
        &dir.join("images.json"),
        &ImageIndex {
            size: grid * patch,
            channels: 3,
            encoding: "f64le".into(),
            ids: meta.scenarios.iter().map(|s| s.id.clone()).collect(),
        },
    )?;
    write_json(&dir.join("annotations.json"), &annotations)?;
    write_json(&dir.join("corpus.json"), &meta)?;
    Ok(meta)
}

/// A corpus directory on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub meta: CorpusMeta,
    pub annotations: AnnotationSet,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let meta: CorpusMeta = read_json(&dir.join("corpus.json"))?;
        let annotations = AnnotationSet::load(&dir.join("annotations.json"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            annotations,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.meta.scenarios.iter().map(|s| s.id.clone()).collect()
    }

    pub fn image(&self, id: &str) -> Result<Image, HarnessError> {
        let path = self.dir.join("images").join(format!("{id}.bin"));
        let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(Image::from_le_bytes(self.meta.grid * self.meta.patch, self.meta.channels, &bytes)?)
    }

    pub fn script(&self, id: &str) -> Result<OracleScript, HarnessError> {
        let path = self.dir.join("scripts").join(format!("{id}.json"));
        if !path.exists() {
            return Err(HarnessError::Corpus(format!("no oracle script for {id}")));
        }
        read_json(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_positions() {
        for i in 0..40 {
            let s = build_scenario(7, i, 4, 8);
            let words: Vec<&str> = s.meta.caption.split(' ').collect();
            match s.meta.kind {
                ScenarioKind::Clean => assert!(s.meta.halluc_steps.is_empty()),
                ScenarioKind::EarlyHalluc => {
                    assert_eq!(s.meta.halluc_steps, vec![9]);
                    assert_eq!(words[7], ",");
                    assert_eq!(words[10], "sits");
                }
                ScenarioKind::LateHalluc => {
                    assert_eq!(s.meta.halluc_steps, vec![15]);
                    assert_eq!(words[12], ".");
                    assert_eq!(words[10], "the");
                }
            }
            assert_eq!(words.last(), Some(&"."));
        }
    }
}
