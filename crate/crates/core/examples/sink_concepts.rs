// Splits a caption at sink tokens and extracts the concepts of each segment.

use sage::linguistics::{extract_concepts_from_words, tokenize, PosLexicon, SinkLexicon, SinkTracker};
use sage::vlm::TokenId;

pub fn run_example() {
    let caption = "a red circle is near the wooden dining table, and a small dog sits below it.";
    let words = tokenize(caption);
    let sinks = SinkLexicon::default();
    let pos = PosLexicon::default();
    let mut tracker = SinkTracker::new();
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    for (k, w) in words.iter().enumerate() {
        if let Some(ev) = tracker.observe(k, TokenId(0), sinks.contains(w)) {
            let seg = &refs[ev.segment.clone()];
            let concepts = extract_concepts_from_words(seg, ev.segment.start, &pos);
            println!("sink {w:?} at {k}: segment {:?}", seg.join(" "));
            for c in concepts {
                println!("    {:?} {:?} {:?}", c.kind, c.surface, c.span);
            }
        }
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
