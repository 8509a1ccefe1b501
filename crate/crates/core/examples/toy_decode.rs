// Greedy decode with the random-weight toy model, with and without
// grounded modulation.

use sage::decoder::{run_decode, SageConfig, Trigger};
use sage::vlm::{Image, ToyVlm, VisionLanguageModel, VlmConfig, Vocabulary};

pub fn run_example() {
    let model = ToyVlm::new(
        VlmConfig {
            seed: 17,
            max_new_tokens: 12,
            init_std: 0.1,
            ..VlmConfig::default()
        },
        Vocabulary::synthetic(),
    )
    .unwrap();
    let pixels = (0..32 * 32 * 3).map(|i| ((i * 7919) % 255) as f64 / 255.0).collect();
    let image = Image::new(32, 3, pixels).unwrap();
    let prompt = model.vocab().encode("please describe this image in detail .").unwrap();

    let baseline = run_decode(&model, &image, &prompt, &SageConfig::baseline()).unwrap();
    println!("baseline: {}", baseline.trace.tokens().join(" "));

    let grounded = run_decode(&model, &image, &prompt, &SageConfig::default()).unwrap();
    println!("sink-triggered: {}", grounded.trace.tokens().join(" "));

    let config = SageConfig {
        trigger: Trigger::Periodic(3),
        ..SageConfig::default()
    };
    let grounded = run_decode(&model, &image, &prompt, &config).unwrap();
    println!("periodic(3): {}", grounded.trace.tokens().join(" "));
    for r in grounded.trace.reports() {
        println!(
            "  check at step {}: {} concepts, overlap {:?}, {:?}",
            r.trigger.step,
            r.concepts.len(),
            r.overlap,
            r.decision
        );
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
