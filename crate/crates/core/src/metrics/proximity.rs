use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::decoder::DecodeTrace;

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityStats {
    pub window: usize,
    pub hallucinated: usize,
    pub near_sink: usize,
    pub fraction: f64,
}

/// Share of hallucinated tokens emitted within `window` steps after the most
/// recent sink, pooled over `traces`.
pub fn sink_proximity(traces: &[DecodeTrace], window: usize) -> Result<ProximityStats, MetricsError> {
    let mut labelled = false;
    let (mut hallucinated, mut near_sink) = (0, 0);
    for trace in traces {
        let sinks: Vec<usize> = trace.sinks().iter().map(|s| s.step).collect();
        for (step, label) in trace.halluc_labels().into_iter().enumerate() {
            let Some(h) = label else { continue };
            labelled = true;
            if !h {
                continue;
            }
            hallucinated += 1;
            if let Some(s) = sinks.iter().rev().find(|s| **s < step) {
                if step - s <= window {
                    near_sink += 1;
                }
            }
        }
    }
    if !labelled {
        return Err(MetricsError::NoLabels);
    }
    if hallucinated == 0 {
        return Err(MetricsError::NoHallucinations);
    }
    Ok(ProximityStats {
        window,
        hallucinated,
        near_sink,
        fraction: near_sink as f64 / hallucinated as f64,
    })
}
