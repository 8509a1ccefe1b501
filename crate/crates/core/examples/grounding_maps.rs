// Attention and Grad-CAM maps for one sink step of an oracle scenario,
// printed as grids together with their masks and overlap.

use sage::decoder::SageDecoder;
use sage::grounding::{BinaryMask, SpatialMap};
use sage::harness::{build_scenario, DEFAULT_PROMPT};
use sage::vlm::{OracleModel, Vocabulary};

fn show_map(title: &str, m: &SpatialMap) {
    println!("{title}");
    for r in 0..m.grid {
        let row: Vec<String> = (0..m.grid).map(|c| format!("{:.2}", m.get(r, c))).collect();
        println!("  {}", row.join(" "));
    }
}

fn show_mask(title: &str, m: &BinaryMask) {
    println!("{title}");
    for r in 0..m.grid {
        let row: String = (0..m.grid).map(|c| if m.get(r, c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

pub fn run_example() {
    let scen = build_scenario(5, 1, 4, 8);
    println!("caption: {}", scen.meta.caption);
    let vocab = Vocabulary::synthetic();
    let model = OracleModel::new(scen.script.clone(), vocab.clone()).unwrap();
    let run = SageDecoder::default()
        .run(&model, &scen.image, &vocab.encode(DEFAULT_PROMPT).unwrap())
        .unwrap();
    let report = run.trace.reports()[0].clone();
    println!(
        "step {} concepts {:?}",
        report.trigger.step,
        report.concepts.iter().map(|c| &c.surface).collect::<Vec<_>>()
    );
    show_map(
        &format!("attention map (layer {:?}, head {:?})", report.selected_layer, report.selected_head),
        report.i1_map.as_ref().unwrap(),
    );
    show_mask("attention mask", report.i1_mask.as_ref().unwrap());
    for c in &report.per_concept {
        show_map(&format!("grad-cam {:?}", c.concept.surface), &c.map);
    }
    show_mask("grad-cam union", report.i2_mask.as_ref().unwrap());
    println!("overlap {:?} -> {:?}", report.overlap, report.decision);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
