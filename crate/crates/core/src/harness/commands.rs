use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{write_corpus, Corpus, HarnessError, RunManifest, TimingSummary, DEFAULT_PROMPT};
use crate::decoder::{Component, DecodeRun, DecodeTrace, SageConfig, SageDecoder, TimingMode, TraceEvent, Trigger};
use crate::linguistics::PosLexicon;
use crate::metrics::{chair, cover, layer_analysis, sink_proximity, LayerAnalysis, LayerSample, MetricsError};
use crate::vlm::{OracleModel, ToyVlm, VisionLanguageModel, VlmConfig, Vocabulary};

pub const OUTPUT_ROOT_ENV: &str = "SAGE_OUTPUT_ROOT";

/// Default directory for command outputs.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("sage-out"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Oracle,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Sage,
}

macro_rules! str_enum {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(format!("unknown value {s:?}")),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Backend, "oracle" => Backend::Oracle, "toy" => Backend::Toy);
str_enum!(Mode, "baseline" => Mode::Baseline, "sage" => Mode::Sage);

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ok,
    NoData,
    MissingTraces(Vec<String>),
}

impl Status {
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::NoData => 2,
            Status::MissingTraces(_) => 3,
        }
    }
}

pub fn cmd_generate(out: &Path, size: usize, seed: u64, grid: usize, patch: usize) -> Result<Status, HarnessError> {
    write_corpus(out, size, seed, grid, patch)?;
    Ok(Status::Ok)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub corpus: PathBuf,
    pub backend: Backend,
    pub mode: Mode,
    pub config: SageConfig,
    pub model_seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Toy backend only; the oracle runs its script to the end.
    pub max_new_tokens: Option<usize>,
    pub prompt: String,
}

impl DecodeOptions {
    pub fn new(corpus: &Path, backend: Backend, mode: Mode) -> Self {
        Self {
            corpus: corpus.to_path_buf(),
            backend,
            mode,
            config: SageConfig::default(),
            model_seed: 0,
            checkpoint: None,
            max_new_tokens: None,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }

    pub fn from_manifest(m: &RunManifest) -> Self {
        Self {
            corpus: PathBuf::from(&m.corpus),
            backend: m.backend,
            mode: m.mode,
            config: m.config.clone(),
            model_seed: m.model_seed,
            checkpoint: m.checkpoint.as_ref().map(PathBuf::from),
            max_new_tokens: m.max_new_tokens,
            prompt: m.prompt.clone(),
        }
    }

    fn effective_config(&self) -> SageConfig {
        match self.mode {
            Mode::Baseline => SageConfig {
                trigger: Trigger::Off,
                ..self.config.clone()
            },
            Mode::Sage => self.config.clone(),
        }
    }
}

enum Models {
    Oracle(Vocabulary),
    Toy(Box<ToyVlm>),
}

impl Models {
    fn new(opts: &DecodeOptions, corpus: &Corpus) -> Result<Self, HarnessError> {
        Ok(match opts.backend {
            Backend::Oracle => Models::Oracle(Vocabulary::synthetic()),
            Backend::Toy => {
                let toy = match &opts.checkpoint {
                    Some(dir) => ToyVlm::load(dir)?,
                    None => ToyVlm::new(
                        VlmConfig {
                            image_size: corpus.meta.grid * corpus.meta.patch,
                            patch_size: corpus.meta.patch,
                            channels: corpus.meta.channels,
                            seed: opts.model_seed,
                            max_new_tokens: opts.max_new_tokens.unwrap_or(VlmConfig::default().max_new_tokens),
                            ..VlmConfig::default()
                        },
                        Vocabulary::synthetic(),
                    )?,
                };
                if toy.config().grid() != corpus.meta.grid {
                    return Err(HarnessError::Backend {
                        backend: "toy".into(),
                        reason: format!("model grid {} vs corpus grid {}", toy.config().grid(), corpus.meta.grid),
                    });
                }
                Models::Toy(Box::new(toy))
            }
        })
    }

    fn get(&self, corpus: &Corpus, id: &str) -> Result<Box<dyn VisionLanguageModel + '_>, HarnessError> {
        match self {
            Models::Toy(t) => Ok(Box::new(t.as_ref())),
            Models::Oracle(vocab) => {
                let script = corpus.script(id).map_err(|e| HarnessError::Backend {
                    backend: "oracle".into(),
                    reason: e.to_string(),
                })?;
                if script.grid != corpus.meta.grid {
                    return Err(HarnessError::Backend {
                        backend: "oracle".into(),
                        reason: format!("script grid {} vs corpus grid {}", script.grid, corpus.meta.grid),
                    });
                }
                Ok(Box::new(OracleModel::new(script, vocab.clone())?))
            }
        }
    }
}

/// Decodes every corpus image in id order, handing each run to `sink`.
fn decode_each(
    corpus: &Corpus,
    opts: &DecodeOptions,
    config: &SageConfig,
    mut sink: impl FnMut(&str, Result<DecodeRun, crate::decoder::PartialDecode>) -> Result<(), HarnessError>,
) -> Result<(), HarnessError> {
    let models = Models::new(opts, corpus)?;
    let decoder = SageDecoder::new(config.clone())?;
    for id in corpus.ids() {
        let model = models.get(corpus, &id)?;
        let prompt = model
            .vocab()
            .encode(&opts.prompt)
            .map_err(|w| HarnessError::Corpus(format!("prompt word {w:?} is not in the vocabulary")))?;
        let image = corpus.image(&id)?;
        sink(&id, decoder.run(model.as_ref(), &image, &prompt))?;
    }
    Ok(())
}

/// Decodes a corpus into `out/traces/<id>.jsonl` and writes `out/manifest.json`.
pub fn cmd_decode(opts: &DecodeOptions, out: &Path) -> Result<(Status, RunManifest), HarnessError> {
    let corpus = Corpus::load(&opts.corpus)?;
    let config = opts.effective_config();
    config.validate()?;
    let traces_dir = out.join("traces");
    fs::create_dir_all(&traces_dir).map_err(|e| HarnessError::io(&traces_dir, e))?;

    let mut component_totals: BTreeMap<String, i64> = BTreeMap::new();
    let started = Instant::now();
    decode_each(&corpus, opts, &config, |id, run| {
        let path = traces_dir.join(format!("{id}.jsonl"));
        let (trace, err) = match run {
            Ok(r) => (r.trace, None),
            Err(p) => (p.trace.clone(), Some(p)),
        };
        for e in &trace.events {
            if let TraceEvent::Timing { component, micros, .. } = e {
                let key = serde_json::to_value(component).expect("component serializes");
                *component_totals.entry(key.as_str().unwrap_or_default().to_string()).or_default() += *micros as i64;
            }
        }
        fs::write(&path, trace.to_jsonl()).map_err(|e| HarnessError::io(&path, e))?;
        match err {
            Some(p) => Err(p.into()),
            None => Ok(()),
        }
    })?;
    let sage_micros = started.elapsed().as_micros() as u64;

    let timing = if config.timing == TimingMode::Wall {
        let base = SageConfig {
            trigger: Trigger::Off,
            timing: TimingMode::Off,
            ..config.clone()
        };
        let t0 = Instant::now();
        decode_each(&corpus, opts, &base, |_, run| run.map(drop).map_err(Into::into))?;
        let baseline_micros = t0.elapsed().as_micros() as u64;
        let added = sage_micros as i64 - baseline_micros as i64;
        for c in [Component::ConceptExtraction, Component::AttentionIou, Component::Gradcam, Component::Modulation] {
            let key = serde_json::to_value(c).expect("component serializes");
            component_totals.entry(key.as_str().unwrap_or_default().to_string()).or_default();
        }
        let accounted: i64 = component_totals.values().sum();
        component_totals.insert("other".into(), added - accounted);
        Some(TimingSummary {
            baseline_micros,
            sage_micros,
            overhead_pct: if baseline_micros == 0 {
                0.0
            } else {
                100.0 * added as f64 / baseline_micros as f64
            },
            components: component_totals,
        })
    } else {
        None
    };

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        corpus: opts.corpus.to_string_lossy().into_owned(),
        corpus_seed: corpus.meta.seed,
        backend: opts.backend,
        mode: opts.mode,
        config: opts.config.clone(),
        prompt: opts.prompt.clone(),
        model_seed: opts.model_seed,
        checkpoint: opts.checkpoint.as_ref().map(|p| p.to_string_lossy().into_owned()),
        max_new_tokens: opts.max_new_tokens,
        traces_dir: "traces".into(),
        images: corpus.ids(),
        timing,
    };
    manifest.save(&out.join("manifest.json"))?;
    let status = if corpus.ids().is_empty() { Status::NoData } else { Status::Ok };
    Ok((status, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportSummary {
    n_images: usize,
    missing: Vec<String>,
    c_s: f64,
    c_i: f64,
    n_mentions: usize,
    n_hallucinated: usize,
    cover_mean: f64,
    sink_proximity: Option<crate::metrics::ProximityStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sink_proximity_error: Option<String>,
    timing: Option<TimingSummary>,
}

/// Scores the traces of a decode run against `annotations`, writing
/// `report.csv` and `report.json` into `out`.
pub fn cmd_report(run_dir: &Path, annotations: &Path, out: &Path, window: usize) -> Result<Status, HarnessError> {
    let ann = crate::metrics::AnnotationSet::load(annotations)?;
    let pos = PosLexicon::default();
    let eos = Vocabulary::synthetic().word(Vocabulary::synthetic().eos()).unwrap_or_default().to_string();
    let mut missing = Vec::new();
    let mut traces = Vec::new();
    let mut captions = Vec::new();
    for id in ann.images.keys() {
        let path = run_dir.join("traces").join(format!("{id}.jsonl"));
        if !path.exists() {
            missing.push(id.clone());
            continue;
        }
        let file = fs::File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
        let trace = DecodeTrace::from_jsonl(std::io::BufReader::new(file))?;
        captions.push((id.clone(), trace.caption(&eos)));
        traces.push(trace);
    }
    let result = chair(&captions, &ann, &pos)?;
    let mut csv = String::from("image_id,n_mentions,n_hallucinated,hallucinated,cover\n");
    let mut covers = Vec::new();
    for ((id, caption), row) in captions.iter().zip(&result.captions) {
        let cv = match cover(id, caption, &ann, &pos) {
            Ok(v) => Some(v),
            Err(MetricsError::EmptyGroundTruth(_)) => None,
            Err(e) => return Err(e.into()),
        };
        covers.extend(cv);
        csv.push_str(&format!(
            "{id},{},{},{},{}\n",
            row.mentioned.len(),
            row.hallucinated.len(),
            row.hallucinated.join(";"),
            cv.map(|v| format!("{v:.6}")).unwrap_or_default()
        ));
    }
    let (proximity, proximity_error) = match sink_proximity(&traces, window) {
        Ok(p) => (Some(p), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let manifest_path = run_dir.join("manifest.json");
    let timing = if manifest_path.exists() {
        RunManifest::load(&manifest_path)?.timing
    } else {
        None
    };
    let summary = ReportSummary {
        n_images: captions.len(),
        missing: missing.clone(),
        c_s: result.c_s,
        c_i: result.c_i,
        n_mentions: result.n_mentions,
        n_hallucinated: result.n_hallucinated,
        cover_mean: if covers.is_empty() {
            0.0
        } else {
            covers.iter().sum::<f64>() / covers.len() as f64
        },
        sink_proximity: proximity,
        sink_proximity_error: proximity_error,
        timing,
    };
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, csv).map_err(|e| HarnessError::io(&csv_path, e))?;
    let json_path = out.join("report.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| HarnessError::io(&json_path, e))?;
    Ok(if captions.is_empty() {
        Status::NoData
    } else if !missing.is_empty() {
        Status::MissingTraces(missing)
    } else {
        Status::Ok
    })
}

/// Decodes the corpus and writes per-layer grounding statistics to `out_csv`.
pub fn cmd_layer_analysis(
    opts: &DecodeOptions,
    out_csv: &Path,
    rel_threshold: f64,
) -> Result<(Status, LayerAnalysis), HarnessError> {
    let corpus = Corpus::load(&opts.corpus)?;
    let config = opts.effective_config();
    config.validate()?;
    let vocab = Vocabulary::synthetic();
    let mut samples = Vec::new();
    decode_each(&corpus, opts, &config, |id, run| {
        let run = run?;
        samples.push(LayerSample::from_run(id, &run, &vocab));
        Ok(())
    })?;
    let analysis = layer_analysis(&samples, &corpus.annotations, &PosLexicon::default(), rel_threshold)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(out_csv, analysis.to_csv()).map_err(|e| HarnessError::io(out_csv, e))?;
    let status = if analysis.rows.is_empty() { Status::NoData } else { Status::Ok };
    Ok((status, analysis))
}
