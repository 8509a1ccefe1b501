use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DecodeError;
use crate::vlm::ConceptLogit;

/// When grounding checks fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Trigger {
    Sink,
    /// Every `N` steps, at steps `N, 2N, ...`.
    Periodic(usize),
    Off,
}

impl FromStr for Trigger {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sink" => Ok(Trigger::Sink),
            "off" => Ok(Trigger::Off),
            _ => s
                .strip_prefix("periodic:")
                .and_then(|n| n.parse().ok())
                .map(Trigger::Periodic)
                .ok_or_else(|| DecodeError::Config(format!("trigger {s:?}: expected sink, off or periodic:N"))),
        }
    }
}

impl TryFrom<String> for Trigger {
    type Error = DecodeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Trigger> for String {
    fn from(t: Trigger) -> Self {
        t.to_string()
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Sink => f.write_str("sink"),
            Trigger::Periodic(n) => write!(f, "periodic:{n}"),
            Trigger::Off => f.write_str("off"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityMode {
    #[default]
    GradcamIou,
    /// Area of the binarized attention map alone.
    AttentionArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationScope {
    #[default]
    UntilNextSink,
    AtSinkOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// No timing events; traces are byte-reproducible.
    #[default]
    Off,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SageConfig {
    pub tau: f64,
    pub scale_reinforce: f64,
    pub scale_diffuse: f64,
    pub trigger: Trigger,
    pub reliability_mode: ReliabilityMode,
    pub modulation_scope: ModulationScope,
    /// Layers searched for i1 and modulated; `None` means the model's middle layers.
    pub layer_set: Option<Vec<usize>>,
    pub rel_threshold: f64,
    pub concept_logit: ConceptLogit,
    pub timing: TimingMode,
}

impl Default for SageConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            scale_reinforce: 1.8,
            scale_diffuse: 0.6,
            trigger: Trigger::Sink,
            reliability_mode: ReliabilityMode::GradcamIou,
            modulation_scope: ModulationScope::UntilNextSink,
            layer_set: None,
            rel_threshold: 0.5,
            concept_logit: ConceptLogit::Sum,
            timing: TimingMode::Off,
        }
    }
}

impl SageConfig {
    /// Plain greedy decoding.
    pub fn baseline() -> Self {
        Self {
            trigger: Trigger::Off,
            ..Self::default()
        }
    }

    /// Scale 1 is accepted on either side so single-branch ablations and
    /// no-op runs can be expressed.
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.scale_reinforce >= 1.0 && self.scale_reinforce.is_finite()) {
            return bad(format!("scale_reinforce {} must be >= 1", self.scale_reinforce));
        }
        if !(self.scale_diffuse > 0.0 && self.scale_diffuse <= 1.0) {
            return bad(format!("scale_diffuse {} outside (0, 1]", self.scale_diffuse));
        }
        if !(self.rel_threshold > 0.0 && self.rel_threshold < 1.0) {
            return bad(format!("rel_threshold {} outside (0, 1)", self.rel_threshold));
        }
        if self.trigger == Trigger::Periodic(0) {
            return bad("periodic trigger needs a positive period".into());
        }
        if self.layer_set.as_ref().is_some_and(|l| l.is_empty()) {
            return bad("layer_set is empty".into());
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_path(path: &Path) -> Result<Self, DecodeError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| DecodeError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| DecodeError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigger_strings() {
        assert_eq!("periodic:10".parse::<Trigger>().unwrap(), Trigger::Periodic(10));
        assert_eq!(Trigger::Periodic(3).to_string(), "periodic:3");
        assert!("every".parse::<Trigger>().is_err());
        let j = serde_json::to_string(&Trigger::Sink).unwrap();
        assert_eq!(j, "\"sink\"");
    }

    #[test]
    fn defaults_validate() {
        SageConfig::default().validate().unwrap();
        SageConfig::baseline().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range() {
        let cases = [
            SageConfig { tau: 1.5, ..Default::default() },
            SageConfig { scale_reinforce: 0.9, ..Default::default() },
            SageConfig { scale_diffuse: 0.0, ..Default::default() },
            SageConfig { scale_diffuse: 1.2, ..Default::default() },
            SageConfig { rel_threshold: 1.0, ..Default::default() },
            SageConfig { trigger: Trigger::Periodic(0), ..Default::default() },
            SageConfig { layer_set: Some(vec![]), ..Default::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn ablation_grids_validate() {
        for r in [1.2, 1.4, 1.6, 1.8, 2.0] {
            for d in [0.3, 0.4, 0.5, 0.6, 0.7, 0.8] {
                SageConfig { scale_reinforce: r, scale_diffuse: d, ..Default::default() }.validate().unwrap();
            }
        }
    }

    #[test]
    fn toml_and_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "tau = 0.4\ntrigger = \"periodic:10\"\nreliability_mode = \"attention_area\"\n").unwrap();
        let c = SageConfig::from_path(&t).unwrap();
        assert_eq!(c.tau, 0.4);
        assert_eq!(c.trigger, Trigger::Periodic(10));
        assert_eq!(c.reliability_mode, ReliabilityMode::AttentionArea);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(SageConfig::from_path(&j).unwrap(), c);
        std::fs::write(&j, "{\"tau\": 2}").unwrap();
        assert!(SageConfig::from_path(&j).is_err());
    }
}
