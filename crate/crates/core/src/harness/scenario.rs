//! Scenario descriptions: topology, load settings and the event timeline.

use crate::control::ControlGains;
use crate::converter::ConverterParams;
use crate::network::{default_topology, NetworkModel, TopologyConfig};
use crate::SimError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DEFAULT_HORIZON: f64 = 9.0;
pub const DEFAULT_DT: f64 = 20e-6;
pub const DEFAULT_SAMPLE: f64 = 0.01;
pub const DEFAULT_ROCOF_WINDOW: f64 = 0.1;
/// Instant the converter breakers close in the standard timeline.
pub const T_CONNECT: f64 = 0.8;
/// Instant the grid breaker opens in the standard timeline.
pub const T_ISLAND: f64 = 5.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Breaker { id: String, closed: bool },
    MgLoad { s_va: f64 },
    LocalLoad { gfc: usize, s_va: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerChoice {
    Droop,
    Ref11,
    Pinn,
}

impl std::str::FromStr for ControllerChoice {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim() {
            "droop" => Ok(Self::Droop),
            "ref11" => Ok(Self::Ref11),
            "pinn" => Ok(Self::Pinn),
            other => Err(SimError::Config(format!("unknown controller {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    /// Topology file; the built-in feeder when absent.
    pub topology: Option<PathBuf>,
    pub horizon: f64,
    pub dt: f64,
    pub sample_interval: f64,
    pub rocof_window: f64,
    /// Total microgrid load, VA.
    pub mg_load_va: f64,
    /// Local load per converter, VA; topology values when absent.
    pub local_load_va: Option<Vec<f64>>,
    #[serde(rename = "event")]
    pub events: Vec<Event>,
    pub controller: Option<ControllerChoice>,
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub converter: ConverterParams,
    pub gains: Option<ControlGains>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::standard("default", 5.94e6)
    }
}

impl ScenarioSpec {
    /// Grid-connected start, converters join at 0.8 s, islanding at 5.5 s.
    pub fn standard(name: &str, mg_load_va: f64) -> Self {
        let mut events: Vec<Event> = ["CB2", "CB3", "CB4", "CB5"]
            .iter()
            .map(|id| Event {
                time: T_CONNECT,
                action: Action::Breaker {
                    id: id.to_string(),
                    closed: true,
                },
            })
            .collect();
        events.push(Event {
            time: T_ISLAND,
            action: Action::Breaker {
                id: "CB1".into(),
                closed: false,
            },
        });
        Self {
            name: name.into(),
            topology: None,
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            sample_interval: DEFAULT_SAMPLE,
            rocof_window: DEFAULT_ROCOF_WINDOW,
            mg_load_va,
            local_load_va: None,
            events,
            controller: None,
            model: None,
            seed: 0,
            converter: ConverterParams::default(),
            gains: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Self = toml::from_str(text).map_err(|e| SimError::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario file; relative topology and model paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut s = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.topology, &mut s.model].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: &str| Err(SimError::Config(format!("scenario {:?}: {m}", self.name)));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return err("horizon must be positive");
        }
        if !(self.dt > 0.0 && self.sample_interval >= self.dt && self.rocof_window >= 2.0 * self.sample_interval) {
            return err("need 0 < dt <= sample_interval and a ROCOF window of at least two samples");
        }
        if !(self.mg_load_va >= 0.0 && self.mg_load_va.is_finite()) {
            return err("mg_load_va must be non-negative");
        }
        let mut last = 0.0;
        for e in &self.events {
            if !(e.time >= 0.0 && e.time <= self.horizon) {
                return err("event time outside the horizon");
            }
            if e.time < last {
                return err("events must be sorted by time");
            }
            last = e.time;
        }
        self.converter.validate()
    }

    pub fn network(&self) -> Result<NetworkModel, SimError> {
        match &self.topology {
            Some(p) => TopologyConfig::load(p)?.build(),
            None => default_topology().build(),
        }
    }

    /// Instant of the last breaker opening, the reference for post-event
    /// metrics; the standard islanding instant when nothing opens.
    pub fn disturbance_time(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| matches!(e.action, Action::Breaker { closed: false, .. }))
            .map(|e| e.time)
            .reduce(f64::max)
            .unwrap_or(T_ISLAND)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_timeline() {
        let s = ScenarioSpec::standard("x", 5.94e6);
        s.validate().unwrap();
        assert_eq!(s.events.len(), 5);
        assert_eq!(s.events[4].time, 5.5);
        let back = ScenarioSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn toml_events() {
        let s = ScenarioSpec::from_toml(
            r#"
name = "t"
mg_load_va = 3e6
horizon = 2.0
[[event]]
time = 0.5
action = "breaker"
id = "CB2"
closed = true
[[event]]
time = 1.0
action = "mg_load"
s_va = 4e6
"#,
        )
        .unwrap();
        assert_eq!(s.events[1].action, Action::MgLoad { s_va: 4e6 });
    }

    #[test]
    fn rejects_unsorted_and_late_events() {
        let mut s = ScenarioSpec::standard("x", 1e6);
        s.events.swap(0, 4);
        assert!(matches!(s.validate(), Err(SimError::Config(_))));
        let mut s = ScenarioSpec::standard("x", 1e6);
        s.horizon = 5.0;
        assert!(s.validate().is_err());
    }
}
