// Baseline versus grounded decoding on a scripted scenario whose caption
// hallucinates after a poorly grounded sink.

use sage::decoder::{run_decode, SageConfig};
use sage::harness::{build_scenario, ScenarioKind, DEFAULT_PROMPT};
use sage::vlm::{OracleModel, Vocabulary};

pub fn run_example() {
    let scen = (0..)
        .map(|i| build_scenario(2, i, 4, 8))
        .find(|s| s.meta.kind == ScenarioKind::EarlyHalluc)
        .unwrap();
    let vocab = Vocabulary::synthetic();
    let prompt = vocab.encode(DEFAULT_PROMPT).unwrap();
    let model = OracleModel::new(scen.script.clone(), vocab).unwrap();
    println!("objects: {:?}", scen.annotation.objects);
    for (name, cfg) in [("baseline", SageConfig::baseline()), ("grounded", SageConfig::default())] {
        let run = run_decode(&model, &scen.image, &prompt, &cfg).unwrap();
        let hall = run.trace.halluc_labels().iter().filter(|h| **h == Some(true)).count();
        println!("{name:>9}: {} ({hall} hallucinated tokens)", run.trace.caption("<eos>"));
        for r in run.trace.reports() {
            println!("           step {:>2} overlap {:.2} {:?}", r.trigger.step, r.overlap.unwrap_or(f64::NAN), r.decision);
        }
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
