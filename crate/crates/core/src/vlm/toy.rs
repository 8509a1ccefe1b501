use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    argmax, ConceptLogit, DecodeState, Geometry, Image, LayerCache, Result, StepAttention, StepOutput, TokenId,
    VisionLanguageModel, VlmError, Vocabulary,
};
use crate::decoder::ModulationDirective;
use crate::linguistics::Concept;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vision_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    /// Size of the learned position table; bounds image + prompt + output.
    pub max_positions: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            vision_layers: 2,
            decoder_layers: 4,
            heads: 2,
            embed_dim: 16,
            mlp_dim: 32,
            init_std: 0.02,
            seed: 0,
            max_new_tokens: 24,
            max_positions: 128,
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(VlmError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} must be divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.decoder_layers == 0 || self.channels == 0 || self.mlp_dim == 0 {
            return fail("decoder_layers, channels and mlp_dim must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.grid() * self.grid() >= self.max_positions {
            return fail(format!("max_positions {} leaves no room for text", self.max_positions));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    w2: usize,
}

/// Names, shapes and positions of every parameter tensor.
#[derive(Debug, Clone)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    patch_proj: usize,
    vision_pos: usize,
    vision: Vec<BlockIx>,
    proj: usize,
    tok_embed: usize,
    pos_embed: usize,
    decoder: Vec<BlockIx>,
    lnf_g: usize,
    lnf_b: usize,
    unembed: usize,
}

impl Layout {
    fn new(cfg: &VlmConfig, vocab_len: usize) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut reg = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let d = cfg.embed_dim;
        let block = |prefix: String, reg: &mut dyn FnMut(String, Vec<usize>) -> usize| BlockIx {
            ln1_g: reg(format!("{prefix}.ln1.gain"), vec![d]),
            ln1_b: reg(format!("{prefix}.ln1.bias"), vec![d]),
            wq: reg(format!("{prefix}.attn.wq"), vec![d, d]),
            wk: reg(format!("{prefix}.attn.wk"), vec![d, d]),
            wv: reg(format!("{prefix}.attn.wv"), vec![d, d]),
            wo: reg(format!("{prefix}.attn.wo"), vec![d, d]),
            ln2_g: reg(format!("{prefix}.ln2.gain"), vec![d]),
            ln2_b: reg(format!("{prefix}.ln2.bias"), vec![d]),
            w1: reg(format!("{prefix}.mlp.w1"), vec![d, cfg.mlp_dim]),
            w2: reg(format!("{prefix}.mlp.w2"), vec![cfg.mlp_dim, d]),
        };
        let p = cfg.patch_size;
        let patch_proj = reg("vision.patch_proj".into(), vec![p * p * cfg.channels, d]);
        let vision_pos = reg("vision.pos".into(), vec![cfg.grid() * cfg.grid(), d]);
        let vision = (0..cfg.vision_layers)
            .map(|i| block(format!("vision.{i}"), &mut reg))
            .collect();
        let proj = reg("projector".into(), vec![d, d]);
        let tok_embed = reg("decoder.tok_embed".into(), vec![vocab_len, d]);
        let pos_embed = reg("decoder.pos_embed".into(), vec![cfg.max_positions, d]);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| block(format!("decoder.{i}"), &mut reg))
            .collect();
        let lnf_g = reg("decoder.ln_f.gain".into(), vec![d]);
        let lnf_b = reg("decoder.ln_f.bias".into(), vec![d]);
        let unembed = reg("decoder.unembed".into(), vec![d, vocab_len]);
        Self {
            names,
            shapes,
            patch_proj,
            vision_pos,
            vision,
            proj,
            tok_embed,
            pos_embed,
            decoder,
            lnf_g,
            lnf_b,
            unembed,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements into the binary blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: VlmConfig,
    vocab: Vec<String>,
    tensors: Vec<CheckpointEntry>,
}

/// Seeded random-weight ViT encoder + pre-LN causal decoder.
#[derive(Debug, Clone)]
pub struct ToyVlm {
    config: VlmConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<Tensor>,
}

impl ToyVlm {
    pub fn new(config: VlmConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| VlmError::Config(e.to_string()))?;
        let params = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    /// Named parameter tensors in checkpoint order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layout.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Writes `weights.bin` (little-endian f64) and `weights.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.parameters() {
            tensors.push(CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| VlmError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("weights.json"), json)?;
        fs::write(dir.join("weights.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = fs::read_to_string(dir.join("weights.json"))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&json).map_err(|e| VlmError::Checkpoint(e.to_string()))?;
        let blob = fs::read(dir.join("weights.bin"))?;
        if blob.len() % 8 != 0 {
            return Err(VlmError::Checkpoint("weights.bin length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let vocab = Vocabulary::new(manifest.vocab.iter().skip(3).cloned());
        if vocab.words() != manifest.vocab.as_slice() {
            return Err(VlmError::Checkpoint("vocabulary must start with the reserved tokens".into()));
        }
        let mut model = Self::new(manifest.config, vocab)?;
        if manifest.tensors.len() != model.layout.names.len() {
            return Err(VlmError::Checkpoint(format!(
                "expected {} tensors, manifest lists {}",
                model.layout.names.len(),
                manifest.tensors.len()
            )));
        }
        for (i, entry) in manifest.tensors.iter().enumerate() {
            if entry.name != model.layout.names[i] || entry.shape != model.layout.shapes[i] {
                return Err(VlmError::Checkpoint(format!(
                    "tensor {i}: expected {} {:?}, found {} {:?}",
                    model.layout.names[i], model.layout.shapes[i], entry.name, entry.shape
                )));
            }
            let n: usize = entry.shape.iter().product();
            let data = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| VlmError::Checkpoint(format!("tensor {} runs past the blob", entry.name)))?;
            model.params[i] = Tensor::new(entry.shape.clone(), data.to_vec())?;
        }
        Ok(model)
    }

    /// Final-layer vision features `[P², embed_dim]` for `image`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let cfg = &self.config;
        if image.size() != cfg.image_size || image.channels() != cfg.channels {
            return Err(VlmError::ImageSize {
                size: cfg.image_size,
                channels: cfg.channels,
                got_size: image.size(),
                got_channels: image.channels(),
            });
        }
        let mut tape = Tape::new();
        let w = self.params_on(&mut tape);
        let n = cfg.grid() * cfg.grid();
        let p = cfg.patch_size;
        let patches = tape.constant(Tensor::new(vec![n, p * p * cfg.channels], image.patches(p))?);
        let x = tape.matmul(patches, w[self.layout.patch_proj])?;
        let mut x = tape.add(x, w[self.layout.vision_pos])?;
        for b in &self.layout.vision {
            x = self.block_full(&mut tape, &w, b, x, None)?.0;
        }
        Ok(tape.value(x).clone())
    }

    fn params_on(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn attention_heads(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Vec<(Var, Var)>> {
        let dh = self.config.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv)?;
            let probs = tape.softmax_rows(scores, mask)?;
            out.push((probs, vh));
        }
        Ok(out)
    }

    fn mlp_residual(&self, tape: &mut Tape, w: &[Var], b: &BlockIx, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, w[b.ln2_g], w[b.ln2_b], LN_EPS)?;
        let h = tape.matmul(h, w[b.w1])?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w[b.w2])?;
        Ok(tape.add(x, h)?)
    }

    /// Full-sequence block; returns the output and this layer's keys and values.
    fn block_full(
        &self,
        tape: &mut Tape,
        w: &[Var],
        b: &BlockIx,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var, Var)> {
        let h = tape.layer_norm(x, w[b.ln1_g], w[b.ln1_b], LN_EPS)?;
        let q = tape.matmul(h, w[b.wq])?;
        let k = tape.matmul(h, w[b.wk])?;
        let v = tape.matmul(h, w[b.wv])?;
        let heads = self.attention_heads(tape, q, k, v, mask)?;
        let mut outs = Vec::with_capacity(heads.len());
        for (p, vh) in heads {
            outs.push(tape.matmul(p, vh)?);
        }
        let o = tape.concat_cols(&outs)?;
        let o = tape.matmul(o, w[b.wo])?;
        let x = tape.add(x, o)?;
        Ok((self.mlp_residual(tape, w, b, x)?, k, v))
    }

    fn logits_of(&self, tape: &mut Tape, w: &[Var], last: Var) -> Result<Var> {
        let h = tape.layer_norm(last, w[self.layout.lnf_g], w[self.layout.lnf_b], LN_EPS)?;
        let logits = tape.matmul(h, w[self.layout.unembed])?;
        Ok(tape.reshape(logits, vec![self.vocab.len()])?)
    }

    /// Builds a decode state around precomputed vision activations, which
    /// become a differentiable leaf of the new tape.
    pub fn start_from_activations(&self, activations: Tensor, prompt: &[TokenId]) -> Result<DecodeState> {
        let cfg = &self.config;
        let n_img = cfg.grid() * cfg.grid();
        if activations.shape() != [n_img, cfg.embed_dim] {
            return Err(VlmError::StateMismatch(format!(
                "vision activations have shape {:?}, expected [{n_img}, {}]",
                activations.shape(),
                cfg.embed_dim
            )));
        }
        if prompt.is_empty() {
            return Err(VlmError::Config("prompt must contain at least one token".into()));
        }
        if let Some(t) = prompt.iter().find(|t| t.index() >= self.vocab.len()) {
            return Err(VlmError::UnknownToken(t.to_string()));
        }
        let n_txt = prompt.len();
        if n_img + n_txt + cfg.max_new_tokens > cfg.max_positions {
            return Err(VlmError::Config(format!(
                "{n_img} image + {n_txt} prompt + {} new tokens exceed max_positions {}",
                cfg.max_new_tokens, cfg.max_positions
            )));
        }
        let mut tape = Tape::new();
        let w = self.params_on(&mut tape);
        let a = tape.leaf(activations);
        let img = tape.matmul(a, w[self.layout.proj])?;
        let img_pos = tape.slice_rows(w[self.layout.pos_embed], 0, n_img)?;
        let img = tape.add(img, img_pos)?;
        let ids: Vec<usize> = prompt.iter().map(|t| t.index()).collect();
        let txt = tape.embedding_lookup(w[self.layout.tok_embed], &ids)?;
        let txt_pos = tape.slice_rows(w[self.layout.pos_embed], n_img, n_img + n_txt)?;
        let txt = tape.add(txt, txt_pos)?;
        let mut x = tape.concat_rows(&[img, txt])?;

        let n = n_img + n_txt;
        let mask: Vec<bool> = (0..n)
            .flat_map(|i| (0..n).map(move |j| j < n_img || (i >= n_img && j <= i)))
            .collect();
        let mut cache = Vec::with_capacity(cfg.decoder_layers);
        for b in &self.layout.decoder {
            let (out, k, v) = self.block_full(&mut tape, &w, b, x, Some(&mask))?;
            cache.push(LayerCache {
                keys: vec![k],
                values: vec![v],
            });
            x = out;
        }
        let last = tape.slice_rows(x, n - 1, n)?;
        let logits = self.logits_of(&mut tape, &w, last)?;

        let mut state = DecodeState::new(tape, a, cfg.grid(), prompt.to_vec(), cfg.max_new_tokens);
        state.cache = cache;
        state.params = w;
        state.pending = Some(logits);
        Ok(state)
    }

    /// Runs the newest emitted token through the decoder under `directive`.
    fn forward_newest(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<()> {
        let step = state.generated.len() - 1;
        let token = state.generated[step];
        let ctx = state.context_len_at(step);
        let n_img = state.grid * state.grid;
        for (l, c) in state.cache.iter().enumerate() {
            let rows = state.tape.value(*c.keys.last().expect("prefilled cache")).rows();
            if rows != ctx - 1 {
                return Err(VlmError::StateMismatch(format!(
                    "layer {l} cache holds {rows} positions, expected {}",
                    ctx - 1
                )));
            }
        }
        let w = state.params.clone();
        let tape = &mut state.tape;
        let e = tape.embedding_lookup(w[self.layout.tok_embed], &[token.index()])?;
        let p = tape.slice_rows(w[self.layout.pos_embed], ctx - 1, ctx)?;
        let mut x = tape.add(e, p)?;
        let mut attention = StepAttention::default();
        for (l, b) in self.layout.decoder.iter().enumerate() {
            let h = tape.layer_norm(x, w[b.ln1_g], w[b.ln1_b], LN_EPS)?;
            let q = tape.matmul(h, w[b.wq])?;
            let k = tape.matmul(h, w[b.wk])?;
            let v = tape.matmul(h, w[b.wv])?;
            let cache = &mut state.cache[l];
            let k_all = tape.concat_rows(&[*cache.keys.last().expect("cache"), k])?;
            let v_all = tape.concat_rows(&[*cache.values.last().expect("cache"), v])?;
            cache.keys.push(k_all);
            cache.values.push(v_all);
            let heads = self.attention_heads(tape, q, k_all, v_all, None)?;
            let scale = directive.filter(|d| d.targets(l)).map(|d| d.scale);
            let mut pre = Vec::with_capacity(heads.len());
            let mut post = Vec::with_capacity(heads.len());
            let mut outs = Vec::with_capacity(heads.len());
            for (probs, vh) in heads {
                pre.push(tape.value(probs).data().to_vec());
                let probs = match scale {
                    Some(s) if s != 1.0 => {
                        let factors: Vec<f64> = (0..ctx).map(|j| if j < n_img { s } else { 1.0 }).collect();
                        let f = tape.constant(Tensor::new(vec![1, ctx], factors)?);
                        let scaled = tape.mul(probs, f)?;
                        tape.normalize_rows(scaled)?
                    }
                    _ => probs,
                };
                post.push(tape.value(probs).data().to_vec());
                outs.push(tape.matmul(probs, vh)?);
            }
            attention.pre.push(pre);
            attention.post.push(post);
            let o = tape.concat_cols(&outs)?;
            let o = tape.matmul(o, w[b.wo])?;
            let x1 = tape.add(x, o)?;
            x = self.mlp_residual(tape, &w, b, x1)?;
        }
        let logits = self.logits_of(&mut state.tape, &w, x)?;
        state.pending = Some(logits);
        state.attention_log.push(attention);
        state.applied.push(directive.cloned());
        Ok(())
    }

    /// Teacher-forced re-run from given vision activations: emits `tokens`
    /// with `directives[k]` applied at step `k`, producing a state whose
    /// logits can be compared against a free-running decode.
    pub fn replay(
        &self,
        activations: Tensor,
        prompt: &[TokenId],
        tokens: &[TokenId],
        directives: &[Option<ModulationDirective>],
    ) -> Result<DecodeState> {
        if directives.len() != tokens.len() {
            return Err(VlmError::StateMismatch(format!(
                "{} tokens but {} directive slots",
                tokens.len(),
                directives.len()
            )));
        }
        let mut state = self.start_from_activations(activations, prompt)?;
        for (tok, d) in tokens.iter().zip(directives) {
            let pending = state.pending.take().expect("pending logits after start");
            state.logits.push(pending);
            state.generated.push(*tok);
            state.hallucination.push(None);
            self.forward_newest(&mut state, d.as_ref())?;
        }
        Ok(state)
    }
}

impl VisionLanguageModel for ToyVlm {
    fn geometry(&self) -> Geometry {
        Geometry {
            grid: self.config.grid(),
            layers: self.config.decoder_layers,
            heads: self.config.heads,
        }
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn start(&self, image: &Image, prompt: &[TokenId]) -> Result<DecodeState> {
        let activations = self.encode_image(image)?;
        self.start_from_activations(activations, prompt)
    }

    fn decode_step(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<StepOutput> {
        if state.generated.len() >= state.max_new_tokens {
            return Err(VlmError::MaxNewTokens(state.max_new_tokens));
        }
        let logits = state
            .pending
            .take()
            .ok_or_else(|| VlmError::StateMismatch("no pending logits".into()))?;
        let token = argmax(state.tape.value(logits).data());
        let step = state.generated.len();
        state.logits.push(logits);
        state.generated.push(token);
        state.hallucination.push(None);
        self.forward_newest(state, directive)?;
        Ok(StepOutput { step, token, logits })
    }

    fn reapply(&self, state: &mut DecodeState, directive: Option<&ModulationDirective>) -> Result<()> {
        if state.generated.is_empty() || state.attention_log.len() != state.generated.len() {
            return Err(VlmError::StateMismatch("no emitted token to re-run".into()));
        }
        for c in &mut state.cache {
            c.keys.pop();
            c.values.pop();
        }
        state.attention_log.pop();
        state.applied.pop();
        self.forward_newest(state, directive)
    }

    fn concept_logit(&self, state: &mut DecodeState, concept: &Concept, mode: ConceptLogit) -> Result<Var> {
        state.emitted_logit(concept, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Expiry;

    fn small() -> ToyVlm {
        let cfg = VlmConfig {
            max_new_tokens: 6,
            init_std: 0.3,
            ..VlmConfig::default()
        };
        ToyVlm::new(cfg, Vocabulary::synthetic()).unwrap()
    }

    fn image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(32, 3, (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn prompt(m: &ToyVlm) -> Vec<TokenId> {
        m.vocab().encode("please describe this image in detail .").unwrap()
    }

    #[test]
    fn sixteen_image_tokens_for_32px_patch_8() {
        let m = small();
        let a = m.encode_image(&image(1)).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        assert_eq!(a, m.encode_image(&image(1)).unwrap());
    }

    #[test]
    fn rejects_bad_configs_and_images() {
        let bad = VlmConfig {
            embed_dim: 15,
            ..VlmConfig::default()
        };
        assert!(ToyVlm::new(bad, Vocabulary::synthetic()).is_err());
        let bad = VlmConfig {
            image_size: 30,
            ..VlmConfig::default()
        };
        assert!(ToyVlm::new(bad, Vocabulary::synthetic()).is_err());
        let m = small();
        assert!(matches!(m.encode_image(&Image::blank(16, 3)), Err(VlmError::ImageSize { .. })));
    }

    #[test]
    fn rows_are_distributions_and_causal() {
        let m = small();
        let mut s = m.start(&image(2), &prompt(&m)).unwrap();
        for _ in 0..4 {
            m.decode_step(&mut s, None).unwrap();
        }
        for (k, step) in s.attention_log().iter().enumerate() {
            for layer in &step.post {
                for row in layer {
                    assert_eq!(row.len(), s.context_len_at(k));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            assert_eq!(step.pre, step.post);
        }
    }

    #[test]
    fn max_new_tokens_enforced() {
        let m = small();
        let mut s = m.start(&image(3), &prompt(&m)).unwrap();
        for _ in 0..6 {
            m.decode_step(&mut s, None).unwrap();
        }
        assert!(matches!(m.decode_step(&mut s, None), Err(VlmError::MaxNewTokens(6))));
    }

    #[test]
    fn reapply_replaces_newest_forward() {
        let m = small();
        let mut s = m.start(&image(4), &prompt(&m)).unwrap();
        m.decode_step(&mut s, None).unwrap();
        let before = s.attention_log()[0].clone();
        let d = ModulationDirective {
            scale: 1.8,
            target_layers: vec![1],
            installed_at: 0,
            expires: Expiry::NextTrigger,
        };
        m.reapply(&mut s, Some(&d)).unwrap();
        assert_eq!(s.attention_log().len(), 1);
        let after = &s.attention_log()[0];
        assert_eq!(after.pre[0], before.pre[0]);
        assert_ne!(after.post[1], before.post[1]);
        assert_eq!(s.applied_directives()[0].as_ref(), Some(&d));
        m.decode_step(&mut s, None).unwrap();
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ToyVlm::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        std::fs::write(dir.path().join("weights.bin"), [0u8; 16]).unwrap();
        assert!(ToyVlm::load(dir.path()).is_err());
    }

    #[test]
    fn replay_matches_free_run() {
        let m = small();
        let img = image(5);
        let mut s = m.start(&img, &prompt(&m)).unwrap();
        for _ in 0..3 {
            m.decode_step(&mut s, None).unwrap();
        }
        let a = s.tape().value(s.vision_activations()).clone();
        let r = m
            .replay(a, &prompt(&m), s.generated(), s.applied_directives())
            .unwrap();
        for k in 0..3 {
            let x = s.tape().value(s.step_logits(k).unwrap());
            let y = r.tape().value(r.step_logits(k).unwrap());
            assert_eq!(x, y);
        }
    }
}
