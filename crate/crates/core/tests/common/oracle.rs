//! Oracle-corpus fixtures and test-side recomputation of the grounding loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sage::decoder::{
    apply_directive, DecodeRun, DecodeTrace, DirectiveAction, Expiry, ModulationScope, SageConfig, SageDecoder,
    TraceEvent,
};
use sage::grounding::Decision;
use sage::harness::{cmd_decode, write_corpus, Backend, Corpus, DecodeOptions, Mode, RunManifest, Status};
use sage::vlm::{DecodeState, OracleModel, OracleScript, VisionLanguageModel, Vocabulary};

pub const SIZE: usize = 20;
pub const SEED: u64 = 1;
pub const GRID: usize = 4;

pub const SINKS: [&str; 14] = [".", ",", ":", ";", "!", "?", "-", "--", "...", "and", "or", "but", "so", "yet"];

pub fn corpus(dir: &Path) -> PathBuf {
    let c = dir.join("corpus");
    write_corpus(&c, SIZE, SEED, GRID, 8).unwrap();
    c
}

pub fn options(corpus: &Path, mode: Mode, config: SageConfig) -> DecodeOptions {
    let mut o = DecodeOptions::new(corpus, Backend::Oracle, mode);
    o.config = config;
    o
}

pub fn decode(corpus: &Path, out: &Path, mode: Mode, config: SageConfig) -> RunManifest {
    let (status, manifest) = cmd_decode(&options(corpus, mode, config), out).unwrap();
    assert_eq!(status, Status::Ok);
    manifest
}

pub fn read_trace(run: &Path, id: &str) -> DecodeTrace {
    let f = std::fs::File::open(run.join("traces").join(format!("{id}.jsonl"))).unwrap();
    DecodeTrace::from_jsonl(std::io::BufReader::new(f)).unwrap()
}

/// Decodes every scenario in-process, keeping the final model states.
pub fn runs(corpus: &Path, config: &SageConfig) -> Vec<(String, OracleScript, DecodeRun)> {
    let c = Corpus::load(corpus).unwrap();
    let vocab = Vocabulary::synthetic();
    let prompt = vocab.encode(&c.meta.prompt).unwrap();
    let decoder = SageDecoder::new(config.clone()).unwrap();
    c.ids()
        .into_iter()
        .map(|id| {
            let script = c.script(&id).unwrap();
            let model = OracleModel::new(script.clone(), vocab.clone()).unwrap();
            let run = decoder.run(&model, &c.image(&id).unwrap(), &prompt).unwrap();
            (id, script, run)
        })
        .collect()
}

fn rel_mask(v: &[f64]) -> Vec<bool> {
    let max = v.iter().copied().fold(0.0, f64::max);
    v.iter().map(|x| max > 0.0 && *x >= 0.5 * max).collect()
}

/// Overlap recomputed from the raw script: best middle-layer head by image
/// mass, relative-0.5 masks, IoU against the union of concept maps.
pub fn hand_overlap(script: &OracleScript, prompt_len: usize, step: usize, concepts: &[&str]) -> f64 {
    let n_img = script.grid * script.grid;
    let ctx = n_img + prompt_len + step + 1;
    let rows = script.attention.get(&step.to_string());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for l in script.layers / 3..2 * script.layers / 3 {
        for h in 0..script.heads {
            let img = rows
                .and_then(|r| r.get(&format!("{l}.{h}")))
                .cloned()
                .unwrap_or_else(|| vec![1.0 / ctx as f64; n_img]);
            let mass: f64 = img.iter().sum();
            if best.as_ref().is_none_or(|(m, _)| mass > *m) {
                best = Some((mass, img));
            }
        }
    }
    let i1 = rel_mask(&best.unwrap().1);
    let mut i2 = vec![false; n_img];
    for c in concepts {
        if let Some(map) = script.gradcam.get(*c) {
            for (u, m) in i2.iter_mut().zip(rel_mask(map)) {
                *u |= m;
            }
        }
    }
    let inter = i1.iter().zip(&i2).filter(|(a, b)| **a && **b).count();
    let union = i1.iter().zip(&i2).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Checks one trace against the decoding loop as specified: checks fire
/// exactly at sink tokens, decisions follow `o > tau`, directives follow config.
pub fn conformance(script: &OracleScript, prompt_len: usize, trace: &DecodeTrace, config: &SageConfig) -> Result<usize, String> {
    let tokens: BTreeMap<usize, &str> = trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Token { step, text, .. } => Some((*step, text.as_str())),
            _ => None,
        })
        .collect();
    let sink_steps: Vec<usize> = tokens.iter().filter(|(_, t)| SINKS.contains(t)).map(|(s, _)| *s).collect();
    let check_steps: Vec<usize> = trace.reports().iter().map(|r| r.trigger.step).collect();
    if sink_steps != check_steps {
        return Err(format!("checks at {check_steps:?}, sinks at {sink_steps:?}"));
    }
    let middle: Vec<usize> = (script.layers / 3..2 * script.layers / 3).collect();
    let mut prev_sink: Option<usize> = None;
    let mut active = false;
    for (i, e) in trace.events.iter().enumerate() {
        let TraceEvent::Grounding { step, report } = e else { continue };
        let seg_start = prev_sink.map_or(0, |s| s + 1);
        prev_sink = Some(*step);
        if report.trigger.segment != (seg_start..*step) {
            return Err(format!("step {step}: segment {:?}", report.trigger.segment));
        }
        for c in &report.concepts {
            let words: Vec<&str> = c.span.clone().map(|k| tokens[&k]).collect();
            if c.span.start < seg_start || c.span.end > *step || words.join(" ") != c.surface {
                return Err(format!("step {step}: concept {:?} does not match its span", c.surface));
            }
        }
        let expected = if report.concepts.is_empty() {
            Decision::Skip
        } else {
            let names: Vec<&str> = report.concepts.iter().map(|c| c.surface.as_str()).collect();
            let o = hand_overlap(script, prompt_len, *step, &names);
            let got = report.overlap.ok_or(format!("step {step}: no overlap recorded"))?;
            if (o - got).abs() > 1e-12 {
                return Err(format!("step {step}: overlap {got} vs hand {o}"));
            }
            if o > config.tau {
                Decision::Reinforce
            } else {
                Decision::Diffuse
            }
        };
        if report.decision != expected {
            return Err(format!("step {step}: decision {:?} vs {expected:?}", report.decision));
        }
        let follow: Vec<&TraceEvent> = trace.events[i + 1..]
            .iter()
            .take_while(|e| matches!(e, TraceEvent::Directive { step: s, .. } if s == step))
            .collect();
        let scale = match expected {
            Decision::Reinforce => Some(config.scale_reinforce),
            Decision::Diffuse => Some(config.scale_diffuse),
            Decision::Skip => None,
        };
        let expires = match config.modulation_scope {
            ModulationScope::UntilNextSink => Expiry::NextTrigger,
            ModulationScope::AtSinkOnly => Expiry::OneStep,
        };
        let mut want = Vec::new();
        if scale.is_none() && active {
            want.push(DirectiveAction::Clear);
        }
        if scale.is_some() {
            want.push(DirectiveAction::Install);
            if expires == Expiry::OneStep {
                want.push(DirectiveAction::Expire);
            }
        }
        let got: Vec<DirectiveAction> = follow
            .iter()
            .map(|e| match e {
                TraceEvent::Directive { action, .. } => *action,
                _ => unreachable!(),
            })
            .collect();
        if got != want {
            return Err(format!("step {step}: directive actions {got:?} vs {want:?}"));
        }
        for e in &follow {
            if let TraceEvent::Directive { directive: Some(d), .. } = e {
                let layers = config.layer_set.clone().unwrap_or_else(|| middle.clone());
                if Some(d.scale) != scale || d.target_layers != layers || d.installed_at != *step || d.expires != expires {
                    return Err(format!("step {step}: directive {d:?}"));
                }
            }
        }
        active = scale.is_some() && expires == Expiry::NextTrigger;
    }
    Ok(check_steps.len())
}

/// Modulation invariants on every modulated row of `state`; returns the row count.
pub fn modulation_algebra(state: &DecodeState) -> Result<usize, String> {
    let img = state.image_positions();
    let mut rows = 0;
    for (k, (log, d)) in state.attention_log().iter().zip(state.applied_directives()).enumerate() {
        let Some(d) = d else { continue };
        for (l, (pre, post)) in log.pre.iter().zip(&log.post).enumerate() {
            if !d.targets(l) || d.scale == 1.0 {
                continue;
            }
            for (h, (p, q)) in pre.iter().zip(post).enumerate() {
                let sum: f64 = q.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("step {k} l{l} h{h}: row sums to {sum}"));
                }
                let m: f64 = p[img.clone()].iter().sum();
                let s = d.scale;
                let want = s * m / (s * m + (1.0 - m));
                let got: f64 = q[img.clone()].iter().sum();
                if (got - want).abs() > 1e-9 {
                    return Err(format!("step {k} l{l} h{h}: image mass {got} vs {want}"));
                }
                let uniform = apply_directive(p, s, 0..p.len()).map_err(|e| e.to_string())?;
                if uniform.iter().zip(p).any(|(a, b)| (a - b).abs() > 1e-12) {
                    return Err(format!("step {k} l{l} h{h}: uniform scaling changed the row"));
                }
                rows += 1;
            }
        }
    }
    Ok(rows)
}

pub fn prompt_len() -> usize {
    Vocabulary::synthetic().encode(sage::harness::DEFAULT_PROMPT).unwrap().len()
}

pub fn model_geometry(script: &OracleScript) -> sage::vlm::Geometry {
    OracleModel::new(script.clone(), Vocabulary::synthetic()).unwrap().geometry()
}
