//! Text topology description and the built-in feeder.

use super::{Branch, Breaker, GfcAttachment, GridSource, Load, LoadKind, NetworkModel};
use crate::SimError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default = "default_v")]
    pub v_ll_rms: f64,
    #[serde(default = "default_f")]
    pub f_nom: f64,
    pub buses: Vec<String>,
    pub grid: GridConfig,
    #[serde(default, rename = "branch")]
    pub branches: Vec<BranchConfig>,
    #[serde(default, rename = "load")]
    pub loads: Vec<LoadConfig>,
    #[serde(default, rename = "gfc")]
    pub gfcs: Vec<GfcConfig>,
}

fn default_v() -> f64 {
    1000.0
}

fn default_f() -> f64 {
    50.0
}

fn default_pf() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bus: String,
    #[serde(default = "default_v")]
    pub v_ll_rms: f64,
    #[serde(default = "default_f")]
    pub f: f64,
    #[serde(default)]
    pub phase: f64,
    pub r: f64,
    pub l: f64,
    pub breaker: Option<String>,
    #[serde(default = "yes")]
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub from: String,
    pub to: String,
    pub r: f64,
    pub l: f64,
    pub breaker: Option<String>,
    #[serde(default = "yes")]
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadGroup {
    Mg,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub name: Option<String>,
    pub bus: String,
    /// Apparent power for fixed loads, relative share for microgrid loads.
    pub s_va: f64,
    #[serde(default = "default_pf")]
    pub pf: f64,
    pub group: LoadGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfcConfig {
    pub bus: String,
    pub grid_bus: String,
    pub local_load_va: f64,
    #[serde(default = "default_pf")]
    pub local_pf: f64,
    pub breaker: Option<String>,
}

impl TopologyConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(format!("topology: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn build(&self) -> Result<NetworkModel, SimError> {
        let buses = self.buses.clone();
        let idx = |name: &str| -> Result<usize, SimError> {
            buses
                .iter()
                .position(|b| b == name)
                .ok_or_else(|| SimError::Config(format!("unknown bus {name}")))
        };
        let source_node = buses.len();
        let mut branches = Vec::new();
        let mut breakers = Vec::new();

        branches.push(Branch {
            from: source_node,
            to: idx(&self.grid.bus)?,
            r: self.grid.r,
            l: self.grid.l,
        });
        if let Some(id) = &self.grid.breaker {
            breakers.push(Breaker {
                id: id.clone(),
                branch: 0,
                closed: self.grid.closed,
            });
        }
        for b in &self.branches {
            branches.push(Branch {
                from: idx(&b.from)?,
                to: idx(&b.to)?,
                r: b.r,
                l: b.l,
            });
            if let Some(id) = &b.breaker {
                breakers.push(Breaker {
                    id: id.clone(),
                    branch: branches.len() - 1,
                    closed: b.closed,
                });
            }
        }

        let mut loads = Vec::new();
        for (k, l) in self.loads.iter().enumerate() {
            let kind = match l.group {
                LoadGroup::Mg => LoadKind::Mg,
                LoadGroup::Fixed => LoadKind::Fixed,
            };
            loads.push(Load {
                name: l.name.clone().unwrap_or_else(|| format!("load{k}")),
                bus: idx(&l.bus)?,
                s_va: l.s_va,
                pf: l.pf,
                connected: true,
                kind,
                weight: l.s_va,
            });
        }

        let mut gfcs = Vec::new();
        for (k, g) in self.gfcs.iter().enumerate() {
            let bus = idx(&g.bus)?;
            gfcs.push(GfcAttachment {
                bus,
                grid_bus: idx(&g.grid_bus)?,
                breaker: g.breaker.clone(),
            });
            loads.push(Load {
                name: format!("local{}", k + 1),
                bus,
                s_va: g.local_load_va,
                pf: g.local_pf,
                connected: true,
                kind: LoadKind::Local(k),
                weight: 0.0,
            });
        }

        let model = NetworkModel {
            buses,
            branches,
            loads,
            breakers,
            grid: GridSource {
                branch: 0,
                v_ll_rms: self.grid.v_ll_rms,
                f: self.grid.f,
                phase: self.grid.phase,
            },
            gfcs,
            v_ll_rms: self.v_ll_rms,
            f_nom: self.f_nom,
            source_node,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Line constants of the built-in feeder. The backbone is electrically short
/// next to the converter couplings so reactive power splits evenly once
/// islanded; with long lines the circulating current reaches the AC limit
/// before the DC source saturates.
pub const SEGMENT_R: f64 = 0.001;
pub const SEGMENT_L: f64 = 2e-6;
pub const COUPLING_R: f64 = 0.003;
pub const COUPLING_L: f64 = 30e-6;

/// Thirteen-bus radial feeder with four converters on lateral ends.
///
/// Microgrid load shares follow the spot loads of the classic 13-bus test
/// feeder; the absolute level is set per scenario.
pub fn default_topology() -> TopologyConfig {
    let names = [
        "650", "632", "633", "634", "645", "646", "671", "692", "675", "684", "611", "652", "680", "G1", "G2",
        "G3", "G4",
    ];
    let seg = |a: &str, b: &str| BranchConfig {
        from: a.into(),
        to: b.into(),
        r: SEGMENT_R,
        l: SEGMENT_L,
        breaker: None,
        closed: true,
    };
    let mut branches = vec![
        seg("650", "632"),
        seg("632", "633"),
        seg("633", "634"),
        seg("632", "645"),
        seg("645", "646"),
        seg("632", "671"),
        seg("671", "692"),
        seg("692", "675"),
        seg("671", "684"),
        seg("684", "611"),
        seg("684", "652"),
        seg("671", "680"),
    ];
    let attach = [("G1", "675", "CB2"), ("G2", "634", "CB3"), ("G3", "646", "CB4"), ("G4", "652", "CB5")];
    for (g, bus, cb) in attach {
        branches.push(BranchConfig {
            from: g.into(),
            to: bus.into(),
            r: COUPLING_R,
            l: COUPLING_L,
            breaker: Some(cb.into()),
            closed: false,
        });
    }
    let shares = [
        ("632", 200.0),
        ("634", 400.0),
        ("645", 170.0),
        ("646", 230.0),
        ("652", 128.0),
        ("671", 1155.0),
        ("675", 843.0),
        ("692", 170.0),
        ("611", 170.0),
    ];
    let loads = shares
        .iter()
        .map(|(bus, w)| LoadConfig {
            name: Some(format!("mg{bus}")),
            bus: (*bus).into(),
            s_va: *w,
            pf: 0.97,
            group: LoadGroup::Mg,
        })
        .collect();
    let gfcs = attach
        .iter()
        .map(|(g, bus, cb)| GfcConfig {
            bus: (*g).into(),
            grid_bus: (*bus).into(),
            local_load_va: 375e3,
            local_pf: 1.0,
            breaker: Some((*cb).into()),
        })
        .collect();
    TopologyConfig {
        v_ll_rms: 1000.0,
        f_nom: 50.0,
        buses: names.iter().map(|s| s.to_string()).collect(),
        grid: GridConfig {
            bus: "650".into(),
            v_ll_rms: 1000.0,
            f: 50.0,
            phase: 0.0,
            r: 0.002,
            l: 20e-6,
            breaker: Some("CB1".into()),
            closed: true,
        },
        branches,
        loads,
        gfcs,
    }
}
