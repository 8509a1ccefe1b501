use std::time::Instant;

use super::{
    Component, DecodeError, DecodeTrace, DirectiveAction, Expiry, ModulationDirective, ModulationScope,
    ReliabilityMode, SageConfig, TimingMode, TraceEvent, Trigger,
};
use crate::grounding::{
    area_ratio, attention_map, binarize, concept_gradcam, iou, union_masks, ConceptMask, Decision, GroundingError,
    GroundingReport,
};
use crate::linguistics::{extract_concepts, is_sink, PosLexicon, SinkEvent, SinkLexicon, SinkTracker};
use crate::vlm::{DecodeState, Image, TokenId, VisionLanguageModel};

/// A finished decode: its trace and the model state it left behind.
#[derive(Debug)]
pub struct DecodeRun {
    pub trace: DecodeTrace,
    pub state: DecodeState,
}

/// A decode aborted by a model failure, with everything recorded before it.
#[derive(Debug, thiserror::Error)]
#[error("decode aborted after {} trace events: {error}", trace.events.len())]
pub struct PartialDecode {
    pub trace: DecodeTrace,
    #[source]
    pub error: DecodeError,
}

struct Clock {
    mode: TimingMode,
    events: Vec<TraceEvent>,
}

impl Clock {
    fn time<T>(&mut self, step: usize, component: Component, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if self.mode == TimingMode::Wall {
            self.events.push(TraceEvent::Timing {
                step,
                component,
                micros: start.elapsed().as_micros() as u64,
            });
        }
        out
    }
}

/// Grounded decoding controller.
#[derive(Debug, Clone, Default)]
pub struct SageDecoder {
    pub config: SageConfig,
    pub sinks: SinkLexicon,
    pub pos: PosLexicon,
}

impl SageDecoder {
    pub fn new(config: SageConfig) -> Result<Self, DecodeError> {
        config.validate()?;
        Ok(Self {
            config,
            ..Self::default()
        })
    }

    pub fn with_lexicons(mut self, sinks: SinkLexicon, pos: PosLexicon) -> Self {
        self.sinks = sinks;
        self.pos = pos;
        self
    }

    fn layers<M: VisionLanguageModel + ?Sized>(&self, model: &M) -> Vec<usize> {
        self.config.layer_set.clone().unwrap_or_else(|| model.geometry().middle_layers())
    }

    /// One grounding check at `trigger`. Failures become a `skip` report.
    pub fn grounding_check<M: VisionLanguageModel + ?Sized>(
        &self,
        model: &M,
        state: &mut DecodeState,
        trigger: &SinkEvent,
    ) -> GroundingReport {
        let mut clock = Clock {
            mode: TimingMode::Off,
            events: Vec::new(),
        };
        self.check_timed(model, state, trigger, &mut clock)
    }

    fn check_timed<M: VisionLanguageModel + ?Sized>(
        &self,
        model: &M,
        state: &mut DecodeState,
        trigger: &SinkEvent,
        clock: &mut Clock,
    ) -> GroundingReport {
        let layer_set = self.layers(model);
        let mut report = GroundingReport {
            trigger: trigger.clone(),
            concepts: Vec::new(),
            layer_set: layer_set.clone(),
            selected_layer: None,
            selected_head: None,
            i1_map: None,
            i1_mask: None,
            per_concept: Vec::new(),
            i2_mask: None,
            overlap: None,
            decision: Decision::Skip,
            reason: None,
        };
        let step = trigger.step;
        let concepts = clock.time(step, Component::ConceptExtraction, || {
            extract_concepts(trigger.segment.clone(), state.generated(), model.vocab(), &self.pos)
        });
        match concepts {
            Ok(c) if c.is_empty() => {
                report.reason = Some("no concepts in segment".into());
                return report;
            }
            Ok(c) => report.concepts = c,
            Err(e) => {
                report.reason = Some(e.to_string());
                return report;
            }
        }
        if let Err(e) = self.fill(model, state, &mut report, clock) {
            report.decision = Decision::Skip;
            report.overlap = None;
            report.reason = Some(e.to_string());
        }
        report
    }

    fn fill<M: VisionLanguageModel + ?Sized>(
        &self,
        model: &M,
        state: &mut DecodeState,
        report: &mut GroundingReport,
        clock: &mut Clock,
    ) -> Result<(), GroundingError> {
        let step = report.trigger.step;
        let cfg = &self.config;
        let (pick, i1_mask) = clock.time(step, Component::AttentionIou, || {
            let pick = attention_map(state, step, &report.layer_set)?;
            let mask = binarize(&pick.map, cfg.rel_threshold)?;
            Ok::<_, GroundingError>((pick, mask))
        })?;
        report.selected_layer = Some(pick.layer);
        report.selected_head = Some(pick.head);
        let overlap = match cfg.reliability_mode {
            ReliabilityMode::AttentionArea => area_ratio(&i1_mask),
            ReliabilityMode::GradcamIou => {
                let per_concept = clock.time(step, Component::Gradcam, || {
                    report
                        .concepts
                        .iter()
                        .map(|c| {
                            let map = concept_gradcam(model, state, c, cfg.concept_logit)?;
                            let mask = binarize(&map, cfg.rel_threshold)?;
                            Ok(ConceptMask {
                                concept: c.clone(),
                                map,
                                mask,
                            })
                        })
                        .collect::<Result<Vec<_>, GroundingError>>()
                })?;
                let masks: Vec<_> = per_concept.iter().map(|m| m.mask.clone()).collect();
                let (i2, o) = clock.time(step, Component::AttentionIou, || {
                    let i2 = union_masks(&masks)?;
                    let o = iou(&i1_mask, &i2)?;
                    Ok::<_, GroundingError>((i2, o))
                })?;
                report.per_concept = per_concept;
                report.i2_mask = Some(i2);
                o
            }
        };
        report.i1_map = Some(pick.map);
        report.i1_mask = Some(i1_mask);
        report.overlap = Some(overlap);
        report.decision = if overlap > cfg.tau {
            Decision::Reinforce
        } else {
            Decision::Diffuse
        };
        Ok(())
    }

    /// Greedy decode with grounding checks and attention modulation.
    pub fn run<M: VisionLanguageModel + ?Sized>(
        &self,
        model: &M,
        image: &Image,
        prompt: &[TokenId],
    ) -> Result<DecodeRun, PartialDecode> {
        let mut trace = DecodeTrace::default();
        let state = match model.start(image, prompt) {
            Ok(s) => s,
            Err(e) => return Err(PartialDecode { trace, error: e.into() }),
        };
        match self.drive(model, state, &mut trace) {
            Ok(state) => Ok(DecodeRun { trace, state }),
            Err(error) => Err(PartialDecode { trace, error }),
        }
    }

    fn drive<M: VisionLanguageModel + ?Sized>(
        &self,
        model: &M,
        mut state: DecodeState,
        trace: &mut DecodeTrace,
    ) -> Result<DecodeState, DecodeError> {
        let cfg = &self.config;
        let vocab = model.vocab();
        let eos = vocab.eos();
        let layers = self.layers(model);
        let mut tracker = SinkTracker::new();
        let mut directive: Option<ModulationDirective> = None;
        let mut segment_start = 0;
        while state.step() < state.max_new_tokens() {
            let out = model.decode_step(&mut state, directive.as_ref())?;
            let k = out.step;
            trace.push(TraceEvent::Token {
                step: k,
                id: out.token.0,
                text: vocab.word(out.token).unwrap_or("<unk>").to_string(),
                halluc: state.hallucination_labels().get(k).copied().flatten(),
            });
            if out.token == eos {
                break;
            }
            let sink = is_sink(out.token, vocab, &self.sinks)?;
            let sink_event = tracker.observe(k, out.token, sink);
            if let Some(ev) = &sink_event {
                trace.push(TraceEvent::Sink(ev.clone()));
            }
            let trigger = match cfg.trigger {
                Trigger::Off => None,
                Trigger::Sink => sink_event,
                Trigger::Periodic(n) if k > 0 && k % n == 0 => Some(SinkEvent {
                    step: k,
                    token: out.token,
                    segment: segment_start..k,
                }),
                Trigger::Periodic(_) => None,
            };
            let Some(trigger) = trigger else { continue };
            segment_start = k + 1;

            let mut clock = Clock {
                mode: cfg.timing,
                events: Vec::new(),
            };
            let report = self.check_timed(model, &mut state, &trigger, &mut clock);
            let next = match report.decision {
                Decision::Skip => None,
                Decision::Reinforce | Decision::Diffuse => Some(ModulationDirective {
                    scale: if report.decision == Decision::Reinforce {
                        cfg.scale_reinforce
                    } else {
                        cfg.scale_diffuse
                    },
                    target_layers: layers.clone(),
                    installed_at: k,
                    expires: match cfg.modulation_scope {
                        ModulationScope::UntilNextSink => Expiry::NextTrigger,
                        ModulationScope::AtSinkOnly => Expiry::OneStep,
                    },
                }),
            };
            trace.push(TraceEvent::Grounding {
                step: k,
                report: Box::new(report),
            });
            if next.is_none() && directive.is_some() {
                trace.push(TraceEvent::Directive {
                    step: k,
                    action: DirectiveAction::Clear,
                    directive: None,
                });
            }
            if let Some(d) = &next {
                trace.push(TraceEvent::Directive {
                    step: k,
                    action: DirectiveAction::Install,
                    directive: Some(d.clone()),
                });
            }
            if next != directive {
                clock.time(k, Component::Modulation, || model.reapply(&mut state, next.as_ref()))?;
            }
            directive = next;
            if let Some(d) = directive.take_if(|d| d.expires == Expiry::OneStep) {
                trace.push(TraceEvent::Directive {
                    step: k,
                    action: DirectiveAction::Expire,
                    directive: Some(d),
                });
            }
            for e in clock.events {
                trace.push(e);
            }
        }
        Ok(state)
    }
}

/// Runs `model` under `config` with the default lexicons.
pub fn run_decode<M: VisionLanguageModel + ?Sized>(
    model: &M,
    image: &Image,
    prompt: &[TokenId],
    config: &SageConfig,
) -> Result<DecodeRun, PartialDecode> {
    let decoder = SageDecoder::new(config.clone()).map_err(|error| PartialDecode {
        trace: DecodeTrace::default(),
        error,
    })?;
    decoder.run(model, image, prompt)
}
