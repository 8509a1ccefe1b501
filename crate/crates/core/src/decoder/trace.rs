use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DecodeError, ModulationDirective};
use crate::grounding::GroundingReport;
use crate::linguistics::SinkEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveAction {
    Install,
    Expire,
    Clear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    ConceptExtraction,
    AttentionIou,
    Gradcam,
    Modulation,
}

/// One JSONL line of a decode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Token {
        step: usize,
        id: u32,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        halluc: Option<bool>,
    },
    Sink(SinkEvent),
    Grounding {
        step: usize,
        report: Box<GroundingReport>,
    },
    Directive {
        step: usize,
        action: DirectiveAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        directive: Option<ModulationDirective>,
    },
    Timing {
        step: usize,
        component: Component,
        micros: u64,
    },
}

impl TraceEvent {
    pub fn step(&self) -> usize {
        match self {
            TraceEvent::Token { step, .. }
            | TraceEvent::Grounding { step, .. }
            | TraceEvent::Directive { step, .. }
            | TraceEvent::Timing { step, .. } => *step,
            TraceEvent::Sink(e) => e.step,
        }
    }
}

/// Ordered record of one decode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub events: Vec<TraceEvent>,
}

impl DecodeTrace {
    pub fn push(&mut self, event: TraceEvent) {
        debug_assert!(self.events.last().is_none_or(|e| e.step() <= event.step()));
        self.events.push(event);
    }

    /// Emitted token strings in order.
    pub fn tokens(&self) -> Vec<&str> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Token { text, .. } => Some(text.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Token { id, .. } => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// Per-token hallucination labels, when the model provided them.
    pub fn halluc_labels(&self) -> Vec<Option<bool>> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Token { halluc, .. } => Some(*halluc),
                _ => None,
            })
            .collect()
    }

    pub fn sinks(&self) -> Vec<&SinkEvent> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Sink(event) => Some(event),
                _ => None,
            })
            .collect()
    }

    pub fn reports(&self) -> Vec<&GroundingReport> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Grounding { report, .. } => Some(report.as_ref()),
                _ => None,
            })
            .collect()
    }

    /// Caption text without the end token.
    pub fn caption(&self, eos: &str) -> String {
        let words: Vec<&str> = self.tokens().into_iter().filter(|t| *t != eos).collect();
        crate::linguistics::detokenize(&words)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DecodeError> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self, DecodeError> {
        let mut trace = Self::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|e| DecodeError::Trace(format!("line {}: {e}", n + 1)))?;
            trace.events.push(e);
        }
        Ok(trace)
    }
}
