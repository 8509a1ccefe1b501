//! Hand-computed metric cases.

use std::collections::BTreeMap;

use sage::decoder::{DecodeTrace, TraceEvent};
use sage::linguistics::{PosLexicon, SinkEvent};
use sage::metrics::{attention_entropy, chair, cover, sink_proximity, AnnotationSet, ImageAnnotation, MetricsError};
use sage::vlm::TokenId;

pub fn annotations() -> AnnotationSet {
    let img = |objs: &[&str]| ImageAnnotation {
        objects: objs.iter().map(|s| s.to_string()).collect(),
        boxes: BTreeMap::new(),
    };
    AnnotationSet {
        grid: None,
        images: [
            ("img1", img(&["dog", "frisbee"])),
            ("img2", img(&["cat"])),
            ("img3", img(&["car", "table", "person"])),
            ("img4", img(&[])),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
        synonyms: [("box".to_string(), "table".to_string())].into_iter().collect(),
        categories: ["dog", "cat", "car", "table", "person", "frisbee", "tree"].map(String::from).into(),
    }
}

/// A trace over `n` tokens with sinks at `sinks` and per-step labels.
pub fn trace(n: usize, sinks: &[usize], halluc: &[usize], labelled: bool) -> DecodeTrace {
    let mut t = DecodeTrace::default();
    let mut start = 0;
    for step in 0..n {
        let sink = sinks.contains(&step);
        t.push(TraceEvent::Token {
            step,
            id: if sink { 1 } else { 2 },
            text: if sink { ",".into() } else { "w".into() },
            halluc: labelled.then_some(halluc.contains(&step)),
        });
        if sink {
            t.push(TraceEvent::Sink(SinkEvent {
                step,
                token: TokenId(1),
                segment: start..step,
            }));
            start = step + 1;
        }
    }
    t
}

fn eq(name: &str, got: f64, want: f64) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

fn near(name: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

type Case = (&'static str, Box<dyn Fn() -> Result<(), String>>);

pub fn metric_cases() -> Vec<Case> {
    fn caps(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }
    let run_chair = |pairs: &[(&str, &str)]| chair(&caps(pairs), &annotations(), &PosLexicon::default()).unwrap();
    let run_cover = |id: &str, c: &str| cover(id, c, &annotations(), &PosLexicon::default());
    vec![
        ("chair three mentions one hallucinated", Box::new(move || {
            let r = run_chair(&[("img1", "a dog and a cat and a frisbee .")]);
            eq("c_i", r.c_i, 1.0 / 3.0)?;
            eq("c_s", r.c_s, 1.0)
        })),
        ("chair clean caption", Box::new(move || {
            let r = run_chair(&[("img1", "a dog sits near a frisbee .")]);
            eq("c_i", r.c_i, 0.0)?;
            eq("c_s", r.c_s, 0.0)
        })),
        ("chair half the captions hallucinate", Box::new(move || {
            let r = run_chair(&[("img1", "a dog and a cat ."), ("img2", "a cat .")]);
            eq("c_s", r.c_s, 0.5)?;
            eq("c_i", r.c_i, 1.0 / 3.0)
        })),
        ("chair repeated mention counts once", Box::new(move || {
            let r = run_chair(&[("img2", "a car , a car and a car .")]);
            eq("n_mentions", r.n_mentions as f64, 1.0)?;
            eq("c_i", r.c_i, 1.0)
        })),
        ("chair synonym maps to label", Box::new(move || {
            let r = run_chair(&[("img3", "a wooden box .")]);
            eq("n_mentions", r.n_mentions as f64, 1.0)?;
            eq("c_i", r.c_i, 0.0)
        })),
        ("chair category never annotated", Box::new(move || {
            let r = run_chair(&[("img2", "a cat and a tree .")]);
            eq("c_i", r.c_i, 0.5)?;
            eq("c_s", r.c_s, 1.0)
        })),
        ("chair no captions", Box::new(move || {
            let r = run_chair(&[]);
            eq("c_s", r.c_s, 0.0)?;
            eq("c_i", r.c_i, 0.0)
        })),
        ("chair caption without objects", Box::new(move || {
            let r = run_chair(&[("img2", "it is bright .")]);
            eq("n_mentions", r.n_mentions as f64, 0.0)?;
            eq("c_i", r.c_i, 0.0)
        })),
        ("cover one of two", Box::new(move || eq("cover", run_cover("img1", "a dog .").unwrap(), 0.5))),
        ("cover one of three", Box::new(move || eq("cover", run_cover("img3", "a car sits .").unwrap(), 1.0 / 3.0))),
        ("cover all via synonym", Box::new(move || {
            eq("cover", run_cover("img3", "a car , a box and a person .").unwrap(), 1.0)
        })),
        ("cover empty ground truth", Box::new(move || match run_cover("img4", "a dog .") {
            Err(MetricsError::EmptyGroundTruth(_)) => Ok(()),
            other => Err(format!("{other:?}")),
        })),
        ("entropy uniform over 16", Box::new(|| near("H", attention_entropy(&[1.0 / 16.0; 16]).unwrap(), 16f64.ln()))),
        ("entropy one-hot", Box::new(|| eq("H", attention_entropy(&[0.0, 0.0, 1.0, 0.0]).unwrap(), 0.0))),
        ("entropy two cells", Box::new(|| near("H", attention_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2f64.ln()))),
        ("entropy renormalizes", Box::new(|| near("H", attention_entropy(&[0.1, 0.1, 0.1, 0.1]).unwrap(), 4f64.ln()))),
        ("entropy rejects negatives", Box::new(|| match attention_entropy(&[0.5, -0.1]) {
            Err(MetricsError::NegativeEntry) => Ok(()),
            other => Err(format!("{other:?}")),
        })),
        ("proximity two of three", Box::new(|| {
            let s = sink_proximity(&[trace(12, &[2, 8], &[1, 4, 10], true)], 5).unwrap();
            eq("fraction", s.fraction, 2.0 / 3.0)
        })),
        ("proximity window edge", Box::new(|| {
            let s = sink_proximity(&[trace(12, &[2], &[7, 8], true)], 5).unwrap();
            eq("near", s.near_sink as f64, 1.0)?;
            eq("fraction", s.fraction, 0.5)
        })),
        ("proximity pooled over traces", Box::new(|| {
            let a = trace(6, &[1], &[3], true);
            let b = trace(6, &[], &[2, 4], true);
            eq("fraction", sink_proximity(&[a, b], 5).unwrap().fraction, 1.0 / 3.0)
        })),
        ("proximity needs labels", Box::new(|| match sink_proximity(&[trace(5, &[1], &[], false)], 5) {
            Err(MetricsError::NoLabels) => Ok(()),
            other => Err(format!("{other:?}")),
        })),
        ("proximity needs hallucinations", Box::new(|| match sink_proximity(&[trace(5, &[1], &[], true)], 5) {
            Err(MetricsError::NoHallucinations) => Ok(()),
            other => Err(format!("{other:?}")),
        })),
    ]
}
