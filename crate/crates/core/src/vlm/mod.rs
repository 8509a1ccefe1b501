//! Vision-language models exposing the hooks grounded decoding needs.
//!
//! Two backends implement [`VisionLanguageModel`]:
//! - [`ToyVlm`], a seeded random-weight ViT encoder + causal decoder that runs
//!   entirely on a [`Tape`] so logits can be differentiated with respect to
//!   the final-layer vision activations;
//! - [`OracleModel`], which replays an [`OracleScript`] exactly and reacts to
//!   modulation according to scripted branches.

mod image;
mod oracle;
mod toy;
mod vocab;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::decoder::ModulationDirective;
use crate::linguistics::Concept;
use crate::tensor::{Tape, TensorError, Var};

pub use image::Image;
pub use oracle::{OracleModel, OracleScript, Reroute, RerouteWhen};
pub use toy::{ToyVlm, VlmConfig};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, IMAGE};

#[derive(Debug, thiserror::Error)]
pub enum VlmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image is {got_size}x{got_size}x{got_channels}, model expects {size}x{size}x{channels}")]
    ImageSize {
        size: usize,
        channels: usize,
        got_size: usize,
        got_channels: usize,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("decode already produced the maximum of {0} new tokens")]
    MaxNewTokens(usize),
    #[error("decode state mismatch: {0}")]
    StateMismatch(String),
    #[error("concept span {start}..{end} outside generated range 0..{len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid oracle script: {0}")]
    Script(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VlmError>;

/// Shape of the attention surface a model exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Patches per image side; the image segment has `grid * grid` tokens.
    pub grid: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Geometry {
    pub fn image_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// `[floor(L/3), floor(2L/3))`, widened to one layer when that is empty.
    pub fn middle_layers(&self) -> Vec<usize> {
        let lo = self.layers / 3;
        let hi = (2 * self.layers) / 3;
        if hi > lo {
            (lo..hi).collect()
        } else {
            vec![lo.min(self.layers.saturating_sub(1))]
        }
    }
}

/// How a multi-token concept is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLogit {
    #[default]
    Sum,
    FirstToken,
}

/// Attention rows of the newest token at one step, indexed `[layer][head][position]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepAttention {
    pub pre: Vec<Vec<Vec<f64>>>,
    pub post: Vec<Vec<Vec<f64>>>,
}

/// Per-layer cache of keys and values; the last entry of each stack is the
/// current full matrix, earlier entries allow the newest row to be recomputed.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Everything one decode owns: its tape, cache, emitted tokens and logs.
#[derive(Debug)]
pub struct DecodeState {
    pub(crate) tape: Tape,
    pub(crate) vision_activations: Var,
    pub(crate) grid: usize,
    pub(crate) prompt: Vec<TokenId>,
    pub(crate) generated: Vec<TokenId>,
    pub(crate) logits: Vec<Var>,
    pub(crate) pending: Option<Var>,
    pub(crate) attention_log: Vec<StepAttention>,
    pub(crate) applied: Vec<Option<ModulationDirective>>,
    pub(crate) hallucination: Vec<Option<bool>>,
    pub(crate) cache: Vec<LayerCache>,
    pub(crate) params: Vec<Var>,
    pub(crate) max_new_tokens: usize,
}

impl DecodeState {
    pub(crate) fn new(tape: Tape, vision_activations: Var, grid: usize, prompt: Vec<TokenId>, max_new_tokens: usize) -> Self {
        Self {
            tape,
            vision_activations,
            grid,
            prompt,
            generated: Vec::new(),
            logits: Vec::new(),
            pending: None,
            attention_log: Vec::new(),
            applied: Vec::new(),
            hallucination: Vec::new(),
            cache: Vec::new(),
            params: Vec::new(),
            max_new_tokens,
        }
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    /// Number of tokens emitted so far.
    pub fn step(&self) -> usize {
        self.generated.len()
    }

    pub fn attention_log(&self) -> &[StepAttention] {
        &self.attention_log
    }

    /// Directive in effect for each step's forward pass, after any re-run.
    pub fn applied_directives(&self) -> &[Option<ModulationDirective>] {
        &self.applied
    }

    pub fn hallucination_labels(&self) -> &[Option<bool>] {
        &self.hallucination
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Final-layer vision features `[P², channels]`, differentiable.
    pub fn vision_activations(&self) -> Var {
        self.vision_activations
    }

    /// Logits that selected the token emitted at `step`.
    pub fn step_logits(&self, step: usize) -> Option<Var> {
        self.logits.get(step).copied()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn image_positions(&self) -> Range<usize> {
        0..self.grid * self.grid
    }

    /// Length of the attention row of the token emitted at `step`.
    pub fn context_len_at(&self, step: usize) -> usize {
        self.grid * self.grid + self.prompt.len() + step + 1
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    /// Sum (or first-token value) of the emitted-token logits over `concept`'s span.
    pub(crate) fn emitted_logit(&mut self, concept: &Concept, mode: ConceptLogit) -> Result<Var> {
        let span = concept.span.clone();
        if span.start >= span.end || span.end > self.generated.len() {
            return Err(VlmError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: self.generated.len(),
            });
        }
        let steps: Vec<usize> = match mode {
            ConceptLogit::Sum => span.collect(),
            ConceptLogit::FirstToken => vec![span.start],
        };
        let mut total: Option<Var> = None;
        for k in steps {
            let logits = self.logits[k];
            let picked = self.tape.pick(logits, self.generated[k].index())?;
            total = Some(match total {
                None => picked,
                Some(t) => self.tape.add(t, picked)?,
            });
        }
        Ok(total.expect("non-empty span"))
    }
}

/// Greedy argmax; ties go to the lowest token id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// Output of one [`VisionLanguageModel::decode_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub step: usize,
    pub token: TokenId,
    pub logits: Var,
}

/// The hook surface a grounded decoder drives.
pub trait VisionLanguageModel {
    fn geometry(&self) -> Geometry;

    fn vocab(&self) -> &Vocabulary;

    /// Encodes the image and consumes the prompt; no token is emitted yet.
    fn start(&self, image: &Image, prompt: &[TokenId]) -> Result<DecodeState>;

    /// Emits the greedy next token, then runs the emitted token forward with
    /// `directive` applied, logging its attention rows before and after
    /// modulation.
    fn decode_step(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<StepOutput>;

    /// Recomputes the forward pass of the newest token under `directive`,
    /// replacing its cache entries, logged post-modulation rows, and the
    /// logits for the next step.
    fn reapply(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<()>;

    /// Scalar `y_c` for a concept, on the state's tape and reaching
    /// [`DecodeState::vision_activations`].
    fn concept_logit(&self, state: &mut DecodeState, concept: &Concept, mode: ConceptLogit) -> Result<Var>;
}

impl<M: VisionLanguageModel + ?Sized> VisionLanguageModel for &M {
    fn geometry(&self) -> Geometry {
        (**self).geometry()
    }

    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn start(&self, image: &Image, prompt: &[TokenId]) -> Result<DecodeState> {
        (**self).start(image, prompt)
    }

    fn decode_step(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<StepOutput> {
        (**self).decode_step(state, directive)
    }

    fn reapply(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<()> {
        (**self).reapply(state, directive)
    }

    fn concept_logit(&self, state: &mut DecodeState, concept: &Concept, mode: ConceptLogit) -> Result<Var> {
        (**self).concept_logit(state, concept, mode)
    }
}
