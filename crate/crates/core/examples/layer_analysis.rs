// Per-layer attention IoU and entropy on scripted scenes.

use sage::decoder::{run_decode, SageConfig};
use sage::harness::{build_scenario, DEFAULT_PROMPT};
use sage::linguistics::PosLexicon;
use sage::metrics::{layer_analysis, AnnotationSet, LayerSample};
use sage::vlm::{OracleModel, Vocabulary};

pub fn run_example() {
    let vocab = Vocabulary::synthetic();
    let prompt = vocab.encode(DEFAULT_PROMPT).unwrap();
    let mut ann = AnnotationSet {
        grid: Some(4),
        ..AnnotationSet::default()
    };
    let mut samples = Vec::new();
    for i in 0..12 {
        let s = build_scenario(4, i, 4, 8);
        let id = format!("scene_{i}");
        let m = OracleModel::new(s.script, vocab.clone()).unwrap();
        let run = run_decode(&m, &s.image, &prompt, &SageConfig::baseline()).unwrap();
        samples.push(LayerSample::from_run(&id, &run, &vocab));
        ann.images.insert(id, s.annotation);
    }
    ann.synonyms = sage::harness::shape_synonyms();
    let result = layer_analysis(&samples, &ann, &PosLexicon::default(), 0.5).unwrap();
    print!("{}", result.to_csv());
}

#[allow(dead_code)]
fn main() {
    run_example();
}
