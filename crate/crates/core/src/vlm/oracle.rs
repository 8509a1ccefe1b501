use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    argmax, ConceptLogit, DecodeState, Geometry, Image, Result, StepAttention, StepOutput, TokenId,
    VisionLanguageModel, VlmError, Vocabulary,
};
use crate::decoder::{apply_directive, ModulationDirective};
use crate::linguistics::Concept;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerouteWhen {
    /// Taken when the directive active for this step has scale < 1.
    Diffuse,
    /// Taken when the directive active for this step has scale > 1.
    Reinforce,
}

impl RerouteWhen {
    fn matches(self, directive: Option<&ModulationDirective>) -> bool {
        match (self, directive.map(|d| d.scale)) {
            (RerouteWhen::Diffuse, Some(s)) => s < 1.0,
            (RerouteWhen::Reinforce, Some(s)) => s > 1.0,
            (_, None) => false,
        }
    }
}

/// Alternative emission for one scripted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reroute {
    pub when: RerouteWhen,
    pub token: String,
    pub halluc: bool,
}

/// Scripted decode: tokens, attention rows over image positions, Grad-CAM
/// targets per concept and hallucination labels.
///
/// Attention rows give weights on the `grid²` image positions; whatever mass
/// they leave is spread uniformly over the visible text positions. Steps or
/// heads without a scripted row attend uniformly to the whole context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScript {
    pub grid: usize,
    pub layers: usize,
    pub heads: usize,
    pub tokens: Vec<String>,
    /// step -> "layer.head" -> image-position weights.
    #[serde(default)]
    pub attention: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// concept surface -> target map over image positions.
    #[serde(default)]
    pub gradcam: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub gt_objects: Vec<String>,
    #[serde(default)]
    pub halluc_labels: Vec<bool>,
    /// step -> alternative token taken under a matching directive.
    #[serde(default)]
    pub reroute: BTreeMap<String, Reroute>,
}

impl OracleScript {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VlmError::Script(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            grid: self.grid,
            layers: self.layers,
            heads: self.heads,
        }
    }
}

fn parse_step(key: &str) -> Result<usize> {
    key.parse()
        .map_err(|_| VlmError::Script(format!("step key {key:?} is not an integer")))
}

/// Deterministic test double replaying an [`OracleScript`].
///
/// Its vision activations are `[P², concepts]`, one column per scripted
/// Grad-CAM target, and a concept's logit is the sum of its column. Grad-CAM
/// over that pair reproduces the scripted map exactly.
#[derive(Debug, Clone)]
pub struct OracleModel {
    script: OracleScript,
    vocab: Vocabulary,
    tokens: Vec<TokenId>,
    rows: HashMap<(usize, usize, usize), Vec<f64>>,
    reroute: BTreeMap<usize, (RerouteWhen, TokenId, bool)>,
    concept_columns: Vec<String>,
}

impl OracleModel {
    pub fn new(script: OracleScript, vocab: Vocabulary) -> Result<Self> {
        let bad = |m: String| Err(VlmError::Script(m));
        if script.grid == 0 || script.layers == 0 || script.heads == 0 {
            return bad("grid, layers and heads must be positive".into());
        }
        let n_img = script.grid * script.grid;
        let lookup = |w: &str| vocab.id(w).ok_or_else(|| VlmError::UnknownToken(w.to_string()));
        let tokens = script.tokens.iter().map(|w| lookup(w)).collect::<Result<Vec<_>>>()?;
        if !script.halluc_labels.is_empty() && script.halluc_labels.len() != tokens.len() {
            return bad(format!(
                "{} hallucination labels for {} tokens",
                script.halluc_labels.len(),
                tokens.len()
            ));
        }
        let mut rows = HashMap::new();
        for (step_key, heads) in &script.attention {
            let step = parse_step(step_key)?;
            if step > tokens.len() {
                return bad(format!("attention scripted for step {step} beyond the caption"));
            }
            for (lh, row) in heads {
                let (l, h) = lh
                    .split_once('.')
                    .and_then(|(l, h)| Some((l.parse::<usize>().ok()?, h.parse::<usize>().ok()?)))
                    .ok_or_else(|| VlmError::Script(format!("head key {lh:?} is not \"layer.head\"")))?;
                if l >= script.layers || h >= script.heads {
                    return bad(format!("head {lh} outside {} layers x {} heads", script.layers, script.heads));
                }
                if row.len() != n_img || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return bad(format!("row {step}/{lh} must hold {n_img} non-negative weights"));
                }
                if row.iter().sum::<f64>() > 1.0 + 1e-9 {
                    return bad(format!("row {step}/{lh} has image mass above 1"));
                }
                rows.insert((step, l, h), row.clone());
            }
        }
        for (c, map) in &script.gradcam {
            if map.len() != n_img || map.iter().any(|v| !v.is_finite()) {
                return bad(format!("gradcam map for {c:?} must hold {n_img} finite values"));
            }
        }
        let mut reroute = BTreeMap::new();
        for (step_key, r) in &script.reroute {
            let step = parse_step(step_key)?;
            if step >= tokens.len() {
                return bad(format!("reroute at step {step} beyond the caption"));
            }
            reroute.insert(step, (r.when, lookup(&r.token)?, r.halluc));
        }
        let concept_columns = script.gradcam.keys().cloned().collect();
        Ok(Self {
            script,
            vocab,
            tokens,
            rows,
            reroute,
            concept_columns,
        })
    }

    pub fn script(&self) -> &OracleScript {
        &self.script
    }

    /// Token emitted at `step` given the directive active while producing it.
    fn choose(&self, step: usize, directive: Option<&ModulationDirective>) -> TokenId {
        match self.tokens.get(step) {
            None => self.vocab.eos(),
            Some(tok) => match self.reroute.get(&step) {
                Some((when, alt, _)) if when.matches(directive) => *alt,
                _ => *tok,
            },
        }
    }

    fn label(&self, step: usize, emitted: TokenId) -> Option<bool> {
        if self.script.halluc_labels.is_empty() {
            return None;
        }
        match self.tokens.get(step) {
            None => Some(false),
            Some(tok) => match self.reroute.get(&step) {
                Some((_, alt, halluc)) if emitted == *alt && emitted != *tok => Some(*halluc),
                _ => Some(self.script.halluc_labels[step]),
            },
        }
    }

    fn one_hot(&self, tape: &mut Tape, token: TokenId) -> Result<Var> {
        let mut logits = vec![0.0; self.vocab.len()];
        logits[token.index()] = 1.0;
        Ok(tape.constant(Tensor::new(vec![logits.len()], logits)?))
    }

    /// Scripted row for the token emitted at `step` over a context of `ctx`.
    pub fn scripted_row(&self, step: usize, layer: usize, head: usize, ctx: usize) -> Vec<f64> {
        let n_img = self.script.grid * self.script.grid;
        match self.rows.get(&(step, layer, head)) {
            Some(img) => {
                let text = ctx - n_img;
                let rest = (1.0 - img.iter().sum::<f64>()).max(0.0) / text as f64;
                img.iter().copied().chain(std::iter::repeat_n(rest, text)).collect()
            }
            None => vec![1.0 / ctx as f64; ctx],
        }
    }

    fn forward_newest(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<()> {
        let step = state.generated.len() - 1;
        let ctx = state.context_len_at(step);
        let mut attention = StepAttention::default();
        for l in 0..self.script.layers {
            let pre: Vec<Vec<f64>> = (0..self.script.heads)
                .map(|h| self.scripted_row(step, l, h, ctx))
                .collect();
            let post = match directive.filter(|d| d.targets(l) && !d.is_identity()) {
                Some(d) => pre
                    .iter()
                    .map(|row| apply_directive(row, d.scale, state.image_positions()))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| VlmError::StateMismatch(e.to_string()))?,
                None => pre.clone(),
            };
            attention.pre.push(pre);
            attention.post.push(post);
        }
        let next = self.choose(step + 1, directive);
        let pending = self.one_hot(&mut state.tape, next)?;
        state.pending = Some(pending);
        state.attention_log.push(attention);
        state.applied.push(directive.cloned());
        Ok(())
    }
}

impl VisionLanguageModel for OracleModel {
    fn geometry(&self) -> Geometry {
        self.script.geometry()
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn start(&self, _image: &Image, prompt: &[TokenId]) -> Result<DecodeState> {
        let n_img = self.script.grid * self.script.grid;
        let cols = self.concept_columns.len().max(1);
        let mut data = vec![0.0; n_img * cols];
        for (j, name) in self.concept_columns.iter().enumerate() {
            for (p, v) in self.script.gradcam[name].iter().enumerate() {
                data[p * cols + j] = *v;
            }
        }
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![n_img, cols], data)?);
        let first = self.choose(0, None);
        let pending = self.one_hot(&mut tape, first)?;
        // room for the whole script plus the end token
        let mut state = DecodeState::new(tape, a, self.script.grid, prompt.to_vec(), self.tokens.len() + 1);
        state.pending = Some(pending);
        Ok(state)
    }

    fn decode_step(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<StepOutput> {
        if state.generated.len() >= state.max_new_tokens {
            return Err(VlmError::MaxNewTokens(state.max_new_tokens));
        }
        if state.attention_log.len() != state.generated.len() {
            return Err(VlmError::StateMismatch("attention log out of step with tokens".into()));
        }
        let logits = state
            .pending
            .take()
            .ok_or_else(|| VlmError::StateMismatch("no pending logits".into()))?;
        let token = argmax(state.tape.value(logits).data());
        let step = state.generated.len();
        state.logits.push(logits);
        state.generated.push(token);
        state.hallucination.push(self.label(step, token));
        self.forward_newest(state, directive)?;
        Ok(StepOutput { step, token, logits })
    }

    fn reapply(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<()> {
        if state.generated.is_empty() || state.attention_log.len() != state.generated.len() {
            return Err(VlmError::StateMismatch("no emitted token to re-run".into()));
        }
        state.attention_log.pop();
        state.applied.pop();
        self.forward_newest(state, directive)
    }

    fn concept_logit(&self, state: &mut DecodeState, concept: &Concept, _mode: ConceptLogit) -> Result<Var> {
        let span = &concept.span;
        if span.start >= span.end || span.end > state.generated.len() {
            return Err(VlmError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: state.generated.len(),
            });
        }
        let a = state.vision_activations;
        let tape = &mut state.tape;
        Ok(match self.concept_columns.iter().position(|c| *c == concept.surface) {
            Some(j) => {
                let col = tape.slice_cols(a, j, j + 1)?;
                tape.sum(col)?
            }
            None => {
                let total = tape.sum(a)?;
                tape.scale(total, 0.0)?
            }
        })
    }
}
