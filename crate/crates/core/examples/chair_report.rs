// CHAIR, Cover, entropy and sink proximity on hand-written inputs.

use std::collections::BTreeMap;

use sage::decoder::{run_decode, SageConfig};
use sage::harness::{build_scenario, DEFAULT_PROMPT};
use sage::linguistics::PosLexicon;
use sage::metrics::{attention_entropy, chair, cover, sink_proximity, AnnotationSet, ImageAnnotation};
use sage::vlm::{OracleModel, Vocabulary};

pub fn run_example() {
    let ann = AnnotationSet {
        grid: None,
        images: BTreeMap::from([(
            "kitchen".to_string(),
            ImageAnnotation {
                objects: vec!["table".into(), "cat".into()],
                boxes: BTreeMap::new(),
            },
        )]),
        synonyms: BTreeMap::from([("box".to_string(), "table".to_string())]),
        categories: ["cat", "dog", "table", "person"].map(String::from).into(),
    };
    let pos = PosLexicon::default();
    let caption = "a cat sits on a wooden box , and a dog is near it .";
    let r = chair(&[("kitchen".into(), caption.into())], &ann, &pos).unwrap();
    println!("caption: {caption}");
    println!("mentions {:?}, hallucinated {:?}", r.captions[0].mentioned, r.captions[0].hallucinated);
    println!("C_S {:.3}  C_I {:.3}  Cover {:.3}", r.c_s, r.c_i, cover("kitchen", caption, &ann, &pos).unwrap());

    println!("entropy of uniform row over 16 cells: {:.4}", attention_entropy(&[1.0; 16]).unwrap());
    println!("entropy of peaked row: {:.4}", attention_entropy(&[8.0, 1.0, 1.0, 0.0]).unwrap());

    let vocab = Vocabulary::synthetic();
    let prompt = vocab.encode(DEFAULT_PROMPT).unwrap();
    let traces: Vec<_> = (0..8)
        .map(|i| {
            let s = build_scenario(9, i, 4, 8);
            let m = OracleModel::new(s.script, vocab.clone()).unwrap();
            run_decode(&m, &s.image, &prompt, &SageConfig::baseline()).unwrap().trace
        })
        .collect();
    for w in [1, 2, 5] {
        let p = sink_proximity(&traces, w).unwrap();
        println!("sink proximity window {w}: {}/{} = {:.3}", p.near_sink, p.hallucinated, p.fraction);
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
