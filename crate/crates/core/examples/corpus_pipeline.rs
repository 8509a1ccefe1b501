// The full harness in-process: generate a corpus, decode it in both modes,
// and score the runs.

use sage::decoder::SageConfig;
use sage::harness::{cmd_decode, cmd_report, write_corpus, Backend, DecodeOptions, Mode};

pub fn run_example() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let meta = write_corpus(&corpus, 12, 3, 4, 8).unwrap();
    println!("generated {} scenes", meta.scenarios.len());
    for mode in [Mode::Baseline, Mode::Sage] {
        let mut opts = DecodeOptions::new(&corpus, Backend::Oracle, mode);
        opts.config = SageConfig::default();
        let run = dir.path().join(mode.to_string());
        cmd_decode(&opts, &run).unwrap();
        let out = dir.path().join(format!("{mode}-report"));
        cmd_report(&run, &corpus.join("annotations.json"), &out, 5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        println!("{mode:>8}: C_S {:.3} C_I {:.3} cover {:.3}", v["c_s"], v["c_i"], v["cover_mean"]);
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
