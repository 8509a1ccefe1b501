//! Central finite-difference oracles for the tape and the toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sage::decoder::{Expiry, ModulationDirective};
use sage::grounding::{concept_gradcam, MapSource, SpatialMap};
use sage::linguistics::{Concept, ConceptKind};
use sage::tensor::{Tape, Tensor, TensorError, Var};
use sage::vlm::{ConceptLogit, Image, ToyVlm, VisionLanguageModel, VlmConfig, Vocabulary};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..1.5)).collect()).unwrap()
}

/// Entries at least 1e-2 away from zero, so relu stays differentiable under the probe.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

/// Weighted sum of `f(inputs)` and its gradients w.r.t. every input.
fn evaluate(f: &OpFn, inputs: &[Tensor], weights: &Option<Tensor>, grads: bool) -> (f64, Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let out_val = tape.value(out).clone();
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::new(out_val.shape().to_vec(), vec![1.0; out_val.numel()]).unwrap(),
    };
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    let s = tape.sum(prod).unwrap();
    let value = tape.value(s).data()[0];
    let gs = if grads {
        tape.backward(s).unwrap();
        vars.iter()
            .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape().to_vec())))
            .collect()
    } else {
        Vec::new()
    };
    (value, out_val, gs)
}

/// Compares analytic and central-difference gradients of one op; returns
/// the number of coordinates checked.
fn check(name: &str, f: OpFn, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let (_, out, _) = evaluate(&f, &inputs, &None, false);
    let weights = Some(random(rng, out.shape()));
    let (_, _, grads) = evaluate(&f, &inputs, &weights, true);
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let probe = |delta: f64| {
                let mut moved = inputs.clone();
                let mut data = moved[i].data().to_vec();
                data[j] += delta;
                moved[i] = Tensor::new(input.shape().to_vec(), data).unwrap();
                evaluate(&f, &moved, &weights, false).0
            };
            let numeric = (probe(EPS) - probe(-EPS)) / (2.0 * EPS);
            let analytic = grads[i].data()[j];
            let e = rel_err(analytic, numeric);
            if e > TOL {
                return Err(format!(
                    "{name}: input {i} coord {j}: analytic {analytic:e} vs numeric {numeric:e} (rel {e:e})"
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Every differentiable tape op against finite differences for one seed.
pub fn ops_match(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let mut total = 0;
    let mut run = |name: &str, f: OpFn, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng| -> Result<(), String> {
        total += check(name, f, inputs, rng)?;
        Ok(())
    };
    let a = random(&mut rng, &[m, k]);
    let b = random(&mut rng, &[k, n]);
    run("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![a.clone(), b], &mut rng)?;
    let a2 = random(&mut rng, &[m, k]);
    run("add", Box::new(|t, v| t.add(v[0], v[1])), vec![a.clone(), a2.clone()], &mut rng)?;
    run("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![a.clone(), a2], &mut rng)?;
    let s: f64 = rng.random_range(-2.0..2.0);
    run("scale", Box::new(move |t, v| t.scale(v[0], s)), vec![a.clone()], &mut rng)?;
    run("softmax_rows", Box::new(|t, v| t.softmax_rows(v[0], None)), vec![random(&mut rng, &[m, k + 1])], &mut rng)?;
    let cols = k + 1;
    let mask: Vec<bool> = (0..m * cols).map(|i| i % cols == 0 || rng.random_bool(0.6)).collect();
    run(
        "softmax_rows masked",
        Box::new(move |t, v| t.softmax_rows(v[0], Some(&mask))),
        vec![random(&mut rng, &[m, cols])],
        &mut rng,
    )?;
    run("normalize_rows", Box::new(|t, v| t.normalize_rows(v[0])), vec![positive(&mut rng, &[m, k])], &mut rng)?;
    let d = k + 1;
    run(
        "layer_norm",
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        vec![random(&mut rng, &[m, d]), random(&mut rng, &[d]), random(&mut rng, &[d])],
        &mut rng,
    )?;
    run("gelu", Box::new(|t, v| t.gelu(v[0])), vec![random(&mut rng, &[m, k])], &mut rng)?;
    run("relu", Box::new(|t, v| t.relu(v[0])), vec![off_zero(&mut rng, &[m, k])], &mut rng)?;
    let vocab = rng.random_range(2..6);
    let ids: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..vocab)).collect();
    run(
        "embedding_lookup",
        Box::new(move |t, v| t.embedding_lookup(v[0], &ids)),
        vec![random(&mut rng, &[vocab, k])],
        &mut rng,
    )?;
    run("reshape", Box::new(move |t, v| t.reshape(v[0], vec![k, m])), vec![a.clone()], &mut rng)?;
    run("transpose", Box::new(|t, v| t.transpose(v[0])), vec![a.clone()], &mut rng)?;
    run("global_mean", Box::new(|t, v| t.global_mean(v[0])), vec![a.clone()], &mut rng)?;
    run("sum", Box::new(|t, v| t.sum(v[0])), vec![a.clone()], &mut rng)?;
    let flat = rng.random_range(0..m * k);
    run("pick", Box::new(move |t, v| t.pick(v[0], flat)), vec![a.clone()], &mut rng)?;
    run(
        "concat_rows",
        Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        vec![a.clone(), random(&mut rng, &[n, k])],
        &mut rng,
    )?;
    run(
        "concat_cols",
        Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        vec![a.clone(), random(&mut rng, &[m, n])],
        &mut rng,
    )?;
    let r0 = rng.random_range(0..m);
    let r1 = rng.random_range(r0 + 1..=m);
    run("slice_rows", Box::new(move |t, v| t.slice_rows(v[0], r0, r1)), vec![a.clone()], &mut rng)?;
    let c0 = rng.random_range(0..k);
    let c1 = rng.random_range(c0 + 1..=k);
    run("slice_cols", Box::new(move |t, v| t.slice_cols(v[0], c0, c1)), vec![a], &mut rng)?;
    Ok(total)
}

/// A short toy decode with a random concept span over its four emitted
/// tokens and a modulation directive active from step 1.
pub struct ToyCase {
    pub model: ToyVlm,
    pub activations: Tensor,
    pub prompt: Vec<sage::vlm::TokenId>,
    pub tokens: Vec<sage::vlm::TokenId>,
    pub directives: Vec<Option<ModulationDirective>>,
    pub concept: Concept,
}

pub fn toy_case(seed: u64) -> ToyCase {
    let vocab = Vocabulary::synthetic();
    let model = ToyVlm::new(
        VlmConfig {
            seed,
            max_new_tokens: 4,
            init_std: 0.3,
            ..VlmConfig::default()
        },
        vocab.clone(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let size = model.config().image_size;
    let image = Image::new(size, 3, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let activations = model.encode_image(&image).unwrap();
    let prompt = vocab.encode("please describe this image in detail .").unwrap();
    let directive = ModulationDirective {
        scale: rng.random_range(0.5..2.0),
        target_layers: model.geometry().middle_layers(),
        installed_at: 1,
        expires: Expiry::NextTrigger,
    };
    let mut state = model.start_from_activations(activations.clone(), &prompt).unwrap();
    let mut directives = Vec::new();
    for step in 0..4 {
        let d = (step >= 1).then(|| directive.clone());
        model.decode_step(&mut state, d.as_ref()).unwrap();
        directives.push(d);
    }
    let start = rng.random_range(0..4);
    let end = rng.random_range(start + 1..=4);
    ToyCase {
        model,
        activations,
        prompt,
        tokens: state.generated().to_vec(),
        directives,
        concept: Concept {
            surface: "probe".into(),
            span: start..end,
            kind: ConceptKind::NounPhrase,
        },
    }
}

impl ToyCase {
    fn logit_at(&self, activations: Tensor) -> f64 {
        let mut st = self.model.replay(activations, &self.prompt, &self.tokens, &self.directives).unwrap();
        let y = self.model.concept_logit(&mut st, &self.concept, ConceptLogit::Sum).unwrap();
        st.tape().value(y).data()[0]
    }

    fn moved(&self, j: usize, delta: f64) -> Tensor {
        let mut dir = vec![0.0; self.activations.numel()];
        dir[j] = 1.0;
        self.along(&dir, delta)
    }

    fn along(&self, dir: &[f64], delta: f64) -> Tensor {
        let data = self.activations.data().iter().zip(dir).map(|(a, d)| a + delta * d).collect();
        Tensor::new(self.activations.shape().to_vec(), data).unwrap()
    }

    /// Analytic gradient of the concept logit w.r.t. the vision activations.
    pub fn analytic(&self) -> Tensor {
        let mut st = self.model.replay(self.activations.clone(), &self.prompt, &self.tokens, &self.directives).unwrap();
        let y = self.model.concept_logit(&mut st, &self.concept, ConceptLogit::Sum).unwrap();
        let a = st.vision_activations();
        st.tape_mut().backward(y).unwrap();
        st.tape().grad(a).unwrap().clone()
    }

    pub fn numeric(&self, j: usize, eps: f64) -> f64 {
        (self.logit_at(self.moved(j, eps)) - self.logit_at(self.moved(j, -eps))) / (2.0 * eps)
    }

    /// Central difference along an arbitrary direction.
    pub fn directional(&self, dir: &[f64], eps: f64) -> f64 {
        (self.logit_at(self.along(dir, eps)) - self.logit_at(self.along(dir, -eps))) / (2.0 * eps)
    }

    /// Grad-CAM through the library path, on a free-running decode state.
    pub fn gradcam(&self) -> SpatialMap {
        let mut st = self.model.replay(self.activations.clone(), &self.prompt, &self.tokens, &self.directives).unwrap();
        concept_gradcam(&self.model, &mut st, &self.concept, ConceptLogit::Sum).unwrap()
    }

    /// Grad-CAM with channel weights from finite differences: the spatial
    /// mean of column `c`'s gradient is the derivative along `1/n` on that column.
    pub fn brute_gradcam(&self) -> SpatialMap {
        let a = &self.activations;
        let (n, k) = (a.rows(), a.cols());
        let w: Vec<f64> = (0..k)
            .map(|c| {
                let dir: Vec<f64> = (0..n * k).map(|j| if j % k == c { 1.0 / n as f64 } else { 0.0 }).collect();
                self.directional(&dir, 1e-5)
            })
            .collect();
        let raw = (0..n).map(|p| (0..k).map(|c| w[c] * a.at(p, c)).sum::<f64>().max(0.0)).collect();
        let grid = self.model.config().grid();
        SpatialMap::normalized(grid, MapSource::Gradcam, raw).unwrap()
    }
}

/// Toy concept-logit backward against finite differences on a sample of
/// coordinates (all of them when `coords` is `None`) plus one random direction.
pub fn toy_matches(seed: u64, coords: Option<usize>) -> Result<usize, String> {
    let case = toy_case(seed);
    let g = case.analytic();
    let n = g.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
    let numeric = case.directional(&dir, EPS);
    let e = rel_err(analytic, numeric);
    if e > TOL {
        return Err(format!("toy seed {seed} direction: analytic {analytic:e} vs numeric {numeric:e} (rel {e:e})"));
    }
    let picks: Vec<usize> = match coords {
        Some(c) => (0..c).map(|_| rng.random_range(0..n)).collect(),
        None => (0..n).collect(),
    };
    for &j in &picks {
        let numeric = case.numeric(j, EPS);
        let e = rel_err(g.data()[j], numeric);
        if e > TOL {
            return Err(format!(
                "toy seed {seed} coord {j}: analytic {:e} vs numeric {numeric:e} (rel {e:e})",
                g.data()[j]
            ));
        }
    }
    Ok(picks.len() + 1)
}
