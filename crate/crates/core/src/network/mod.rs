//! Multi-bus microgrid: topology description, nodal solver and the fixed-step
//! simulation engine.

pub mod engine;
pub mod solver;
pub mod topology;

pub use engine::{run_scenario, ControllerKind, GfcSample, RunRecord, SampleRow, Simulator, SystemState};
pub use solver::CompiledNetwork;
pub use topology::{default_topology, TopologyConfig};

use crate::SimError;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadKind {
    /// Part of the aggregate microgrid load; scaled by scenario load level.
    Mg,
    /// Local load of the converter with this index.
    Local(usize),
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub name: String,
    pub bus: usize,
    pub s_va: f64,
    pub pf: f64,
    pub connected: bool,
    pub kind: LoadKind,
    /// Share of the microgrid load for `LoadKind::Mg`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breaker {
    pub id: String,
    pub branch: usize,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSource {
    /// Index of the branch joining the ideal source to the feeder.
    pub branch: usize,
    pub v_ll_rms: f64,
    pub f: f64,
    pub phase: f64,
}

impl GridSource {
    pub fn v_peak(&self) -> f64 {
        self.v_ll_rms * (2.0f64 / 3.0).sqrt()
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfcAttachment {
    pub bus: usize,
    /// Bus whose voltage serves as the grid-side measurement.
    pub grid_bus: usize,
    /// Breaker joining the converter to the feeder, if any.
    pub breaker: Option<String>,
}

/// Node roles seen by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Ground,
    /// Bus with unknown voltage.
    Bus(usize),
    /// Converter capacitor node, voltage imposed by the converter state.
    Gfc(usize),
    /// Internal EMF node of the grid source.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub buses: Vec<String>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
    pub breakers: Vec<Breaker>,
    pub grid: GridSource,
    pub gfcs: Vec<GfcAttachment>,
    pub v_ll_rms: f64,
    pub f_nom: f64,
    /// Index of the extra node standing for the source EMF (`buses.len()`).
    pub source_node: usize,
}

/// Series RL drawing `s` at power factor `pf` from a balanced nominal supply.
pub fn load_admittance(s: f64, pf: f64, v_ll_rms: f64, f: f64) -> Result<(f64, f64), SimError> {
    if !(s.is_finite() && s > 0.0) {
        return Err(SimError::InvalidLoad(format!("apparent power must be positive, got {s}")));
    }
    if !(pf > 0.0 && pf <= 1.0) {
        return Err(SimError::InvalidLoad(format!("power factor must be in (0, 1], got {pf}")));
    }
    let z = v_ll_rms * v_ll_rms / s;
    let r = z * pf;
    let x = z * (1.0 - pf * pf).max(0.0).sqrt();
    Ok((r, x / (2.0 * PI * f)))
}

impl NetworkModel {
    pub fn bus_index(&self, name: &str) -> Option<usize> {
        self.buses.iter().position(|b| b == name)
    }

    pub fn breaker_index(&self, id: &str) -> Option<usize> {
        self.breakers.iter().position(|b| b.id == id)
    }

    pub fn branch_closed(&self, branch: usize) -> bool {
        self.breakers.iter().filter(|b| b.branch == branch).all(|b| b.closed)
    }

    pub fn apply_breaker(&mut self, id: &str, closed: bool) -> Result<bool, SimError> {
        let k = self.breaker_index(id).ok_or_else(|| SimError::UnknownBreaker(id.to_string()))?;
        let changed = self.breakers[k].closed != closed;
        self.breakers[k].closed = closed;
        Ok(changed)
    }

    /// Rescales the microgrid loads so their apparent powers sum to `total`.
    pub fn set_mg_load(&mut self, total: f64) -> Result<(), SimError> {
        let wsum: f64 = self.loads.iter().filter(|l| l.kind == LoadKind::Mg).map(|l| l.weight).sum();
        if wsum <= 0.0 {
            return if total == 0.0 {
                Ok(())
            } else {
                Err(SimError::Config("topology has no microgrid loads to scale".into()))
            };
        }
        if !(total.is_finite() && total >= 0.0) {
            return Err(SimError::InvalidLoad(format!("microgrid load must be non-negative, got {total}")));
        }
        for l in self.loads.iter_mut().filter(|l| l.kind == LoadKind::Mg) {
            l.s_va = total * l.weight / wsum;
        }
        Ok(())
    }

    pub fn mg_load(&self) -> f64 {
        self.loads.iter().filter(|l| l.kind == LoadKind::Mg).map(|l| l.s_va).sum()
    }

    pub fn set_local_load(&mut self, gfc: usize, s: f64) -> Result<(), SimError> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(SimError::InvalidLoad(format!("local load must be non-negative, got {s}")));
        }
        let mut found = false;
        for l in self.loads.iter_mut().filter(|l| l.kind == LoadKind::Local(gfc)) {
            l.s_va = s;
            found = true;
        }
        if found {
            Ok(())
        } else {
            Err(SimError::Config(format!("converter {gfc} has no local load")))
        }
    }

    /// Resolves a bus index to its solver role.
    pub fn node_ref(&self, bus: usize) -> NodeRef {
        if bus == self.source_node {
            return NodeRef::Source;
        }
        match self.gfcs.iter().position(|g| g.bus == bus) {
            Some(k) => NodeRef::Gfc(k),
            None => NodeRef::Bus(bus),
        }
    }

    /// Series R and L of a load at its current setting, `None` if it draws nothing.
    pub fn load_rl(&self, load: &Load) -> Result<Option<(f64, f64)>, SimError> {
        if !load.connected || load.s_va == 0.0 {
            return Ok(None);
        }
        load_admittance(load.s_va, load.pf, self.v_ll_rms, self.f_nom).map(Some)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.buses.len() + 1;
        for (k, b) in self.branches.iter().enumerate() {
            if b.from >= n || b.to >= n || b.from == b.to {
                return Err(SimError::Config(format!("branch {k} has invalid endpoints")));
            }
            if !(b.l > 0.0 && b.r >= 0.0) {
                return Err(SimError::Config(format!("branch {k} needs L > 0 and R >= 0")));
            }
        }
        let mut ids: Vec<&str> = self.breakers.iter().map(|b| b.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::Config("breaker ids must be unique".into()));
        }
        for b in &self.breakers {
            if b.branch >= self.branches.len() {
                return Err(SimError::Config(format!("breaker {} refers to a missing branch", b.id)));
            }
        }
        for (k, g) in self.gfcs.iter().enumerate() {
            if !self.loads.iter().any(|l| l.kind == LoadKind::Local(k)) {
                return Err(SimError::Config(format!("converter {k} has no local load")));
            }
            if let Some(id) = &g.breaker {
                if self.breaker_index(id).is_none() {
                    return Err(SimError::UnknownBreaker(id.clone()));
                }
            }
        }
        for l in &self.loads {
            if l.bus >= self.buses.len() {
                return Err(SimError::Config(format!("load {} on a missing bus", l.name)));
            }
            if l.s_va < 0.0 || !(l.pf > 0.0 && l.pf <= 1.0) {
                return Err(SimError::InvalidLoad(l.name.clone()));
            }
        }
        Ok(())
    }
}
