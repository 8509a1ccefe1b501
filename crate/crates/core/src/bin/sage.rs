use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sage::decoder::{ModulationScope, ReliabilityMode, SageConfig, TimingMode, Trigger};
use sage::harness::{
    cmd_decode, cmd_generate, cmd_layer_analysis, cmd_report, output_root, Backend, DecodeOptions, HarnessError,
    Mode, RunManifest, Status, DEFAULT_PROMPT,
};
use sage::metrics::DEFAULT_WINDOW;

#[derive(Parser)]
#[command(
    name = "sage",
    version,
    about = "Sink-aware grounded decoding toolkit",
    after_help = "Outputs default to $SAGE_OUTPUT_ROOT (or ./sage-out)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus with annotations and oracle scripts.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
    },
    /// Decode every corpus image and write JSONL traces plus a run manifest.
    Decode {
        #[arg(long, required_unless_present = "from_manifest")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-run exactly what a previous manifest records.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score traces: CHAIR, Cover, sink proximity, timing.
    Report {
        /// Output directory of a decode run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, conflicts_with = "corpus")]
        annotations: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
    },
    /// Per-layer attention IoU and entropy against ground-truth boxes.
    LayerAnalysis {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "oracle")]
    backend: Backend,
    #[arg(long)]
    mode: Option<Mode>,
    /// Model seed for the toy backend.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    prompt: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON or TOML config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    scale_reinforce: Option<f64>,
    #[arg(long)]
    scale_diffuse: Option<f64>,
    /// sink | periodic:N | off
    #[arg(long)]
    trigger: Option<Trigger>,
    /// gradcam | attention-area
    #[arg(long, value_parser = parse_reliability)]
    reliability: Option<ReliabilityMode>,
    /// until-next-sink | at-sink-only
    #[arg(long, value_parser = parse_scope)]
    scope: Option<ModulationScope>,
    /// Layer range `a..b` (end exclusive) or list `a,b,c`.
    #[arg(long, value_parser = parse_layers)]
    layers: Option<LayerList>,
    #[arg(long)]
    rel_threshold: Option<f64>,
    /// off | wall
    #[arg(long, value_parser = parse_timing)]
    timing: Option<TimingMode>,
    /// Never diffuse: sets scale_diffuse to 1.
    #[arg(long, conflicts_with = "diffuse_only")]
    reinforce_only: bool,
    /// Never reinforce: sets scale_reinforce to 1.
    #[arg(long)]
    diffuse_only: bool,
}

fn parse_reliability(s: &str) -> Result<ReliabilityMode, String> {
    match s {
        "gradcam" | "gradcam-iou" => Ok(ReliabilityMode::GradcamIou),
        "attention-area" => Ok(ReliabilityMode::AttentionArea),
        _ => Err(format!("unknown reliability mode {s:?}")),
    }
}

fn parse_scope(s: &str) -> Result<ModulationScope, String> {
    match s {
        "until-next-sink" => Ok(ModulationScope::UntilNextSink),
        "at-sink-only" => Ok(ModulationScope::AtSinkOnly),
        _ => Err(format!("unknown scope {s:?}")),
    }
}

fn parse_timing(s: &str) -> Result<TimingMode, String> {
    match s {
        "off" => Ok(TimingMode::Off),
        "wall" => Ok(TimingMode::Wall),
        _ => Err(format!("unknown timing mode {s:?}")),
    }
}

#[derive(Clone)]
struct LayerList(Vec<usize>);

fn parse_layers(s: &str) -> Result<LayerList, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let layers = match s.split_once("..") {
        Some((a, b)) => (num(a)?..num(b)?).collect(),
        None => s.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
    };
    if layers.is_empty() {
        return Err("empty layer set".into());
    }
    Ok(LayerList(layers))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<SageConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => SageConfig::from_path(p)?,
            None => SageConfig::default(),
        };
        c.tau = self.tau.unwrap_or(c.tau);
        c.scale_reinforce = self.scale_reinforce.unwrap_or(c.scale_reinforce);
        c.scale_diffuse = self.scale_diffuse.unwrap_or(c.scale_diffuse);
        c.trigger = self.trigger.unwrap_or(c.trigger);
        c.reliability_mode = self.reliability.unwrap_or(c.reliability_mode);
        c.modulation_scope = self.scope.unwrap_or(c.modulation_scope);
        c.rel_threshold = self.rel_threshold.unwrap_or(c.rel_threshold);
        c.timing = self.timing.unwrap_or(c.timing);
        if let Some(LayerList(l)) = &self.layers {
            c.layer_set = Some(l.clone());
        }
        if self.reinforce_only {
            c.scale_diffuse = 1.0;
        }
        if self.diffuse_only {
            c.scale_reinforce = 1.0;
        }
        c.validate()?;
        Ok(c)
    }
}

impl RunArgs {
    fn options(&self, corpus: PathBuf, default_mode: Mode) -> Result<DecodeOptions, HarnessError> {
        Ok(DecodeOptions {
            corpus,
            backend: self.backend,
            mode: self.mode.unwrap_or(default_mode),
            config: self.config.resolve()?,
            model_seed: self.seed,
            checkpoint: self.checkpoint.clone(),
            max_new_tokens: self.max_new_tokens,
            prompt: self.prompt.clone(),
        })
    }
}

fn run(cli: Cli) -> Result<Status, HarnessError> {
    let root = output_root();
    match cli.command {
        Command::Generate {
            out,
            size,
            seed,
            grid,
            patch,
        } => {
            let out = out.unwrap_or_else(|| root.join("corpus"));
            let status = cmd_generate(&out, size, seed, grid, patch)?;
            println!("wrote {size} scenes to {}", out.display());
            Ok(status)
        }
        Command::Decode {
            corpus,
            out,
            from_manifest,
            run,
        } => {
            let opts = match (&from_manifest, corpus) {
                (Some(m), _) => DecodeOptions::from_manifest(&RunManifest::load(m)?),
                (None, Some(c)) => run.options(c, Mode::Sage)?,
                (None, None) => unreachable!("clap requires --corpus or --from-manifest"),
            };
            let out = out.unwrap_or_else(|| root.join("run"));
            let (status, manifest) = cmd_decode(&opts, &out)?;
            println!("decoded {} images into {}", manifest.images.len(), out.join(&manifest.traces_dir).display());
            if let Some(t) = &manifest.timing {
                println!("overhead {:.1}% over baseline", t.overhead_pct);
            }
            Ok(status)
        }
        Command::Report {
            run,
            annotations,
            corpus,
            out,
            window,
        } => {
            let ann = annotations
                .or_else(|| corpus.map(|c| c.join("annotations.json")))
                .ok_or_else(|| HarnessError::Corpus("pass --annotations or --corpus".into()))?;
            let out = out.unwrap_or_else(|| root.join("report"));
            let status = cmd_report(&run, &ann, &out, window)?;
            match &status {
                Status::Ok => println!("report written to {}", out.display()),
                Status::NoData => eprintln!("no data: no traces matched the annotations"),
                Status::MissingTraces(ids) => eprintln!("missing traces: {}", ids.join(", ")),
            }
            Ok(status)
        }
        Command::LayerAnalysis { corpus, out, run } => {
            let opts = run.options(corpus, Mode::Baseline)?;
            let out = out.unwrap_or_else(|| root.join("layers.csv"));
            let (status, analysis) = cmd_layer_analysis(&opts, &out, opts.config.rel_threshold)?;
            if status == Status::NoData {
                eprintln!("no data: no concept matched a ground-truth box");
            } else {
                println!(
                    "{} layers, {} samples skipped, written to {}",
                    analysis.rows.len(),
                    analysis.skipped.len(),
                    out.display()
                );
            }
            Ok(status)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
