//! Nodal solver in the stationary frame.
//!
//! Inductor currents of branches and RL loads are states. Bus voltages are
//! algebraic: a bus with a resistive load uses its KCL row directly, a bus fed
//! only by inductors uses the time derivative of its KCL row. The resulting
//! matrix depends only on the switching configuration and is inverted once per
//! configuration.

use super::{NetworkModel, NodeRef};
use crate::frames::AlphaBeta0;
use crate::SimError;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

#[derive(Debug, Clone, Copy)]
struct Element {
    state: usize,
    a: NodeRef,
    b: NodeRef,
    r: f64,
    l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Algebraic,
    Differential,
    Empty,
}

/// Network equations for one switching configuration.
#[derive(Debug, Clone)]
pub struct CompiledNetwork {
    n_states: usize,
    n_gfc: usize,
    unknown: Vec<Option<usize>>,
    rows: Vec<Row>,
    elements: Vec<Element>,
    /// Resistive loads: node and conductance.
    conductances: Vec<(NodeRef, f64)>,
    minv: DMatrix<f64>,
    live: Vec<bool>,
}

/// Per-evaluation outputs.
#[derive(Debug, Clone, Default)]
pub struct NetworkEval {
    pub di: Vec<[f64; 3]>,
    /// Aggregate current drawn from each converter node.
    pub i_gfc: Vec<AlphaBeta0>,
    pub v_bus: Vec<[f64; 3]>,
}

impl NetworkEval {
    pub fn new(n_states: usize, n_gfc: usize, n_bus: usize) -> Self {
        Self {
            di: vec![[0.0; 3]; n_states],
            i_gfc: vec![AlphaBeta0::ZERO; n_gfc],
            v_bus: vec![[0.0; 3]; n_bus],
        }
    }
}

/// Number of current states: one per branch, then one per load.
pub fn state_count(model: &NetworkModel) -> usize {
    model.branches.len() + model.loads.len()
}

fn sign(e: &Element, n: NodeRef) -> f64 {
    if e.a == n {
        1.0
    } else if e.b == n {
        -1.0
    } else {
        0.0
    }
}

impl CompiledNetwork {
    pub fn compile(model: &NetworkModel) -> Result<Self, SimError> {
        let n_bus = model.buses.len();
        let mut elements = Vec::new();
        let mut conductances = Vec::new();
        let mut live = vec![false; state_count(model)];
        for (k, br) in model.branches.iter().enumerate() {
            if model.branch_closed(k) {
                elements.push(Element {
                    state: k,
                    a: model.node_ref(br.from),
                    b: model.node_ref(br.to),
                    r: br.r,
                    l: br.l,
                });
                live[k] = true;
            }
        }
        for (j, ld) in model.loads.iter().enumerate() {
            if let Some((r, l)) = model.load_rl(ld)? {
                let node = model.node_ref(ld.bus);
                if l > 0.0 {
                    let state = model.branches.len() + j;
                    elements.push(Element {
                        state,
                        a: node,
                        b: NodeRef::Ground,
                        r,
                        l,
                    });
                    live[state] = true;
                } else {
                    conductances.push((node, 1.0 / r));
                }
            }
        }

        check_sources(model, &elements, &conductances)?;

        let mut unknown = vec![None; n_bus];
        let mut nu = 0;
        for (b, u) in unknown.iter_mut().enumerate() {
            if let NodeRef::Bus(_) = model.node_ref(b) {
                *u = Some(nu);
                nu += 1;
            }
        }
        let mut rows = vec![Row::Empty; nu];
        let mut m = DMatrix::<f64>::zeros(nu, nu);
        for (b, u) in unknown.iter().enumerate() {
            let Some(n) = *u else { continue };
            let node = NodeRef::Bus(b);
            let g: f64 = conductances.iter().filter(|(x, _)| *x == node).map(|(_, g)| g).sum();
            let incident: Vec<&Element> = elements.iter().filter(|e| e.a == node || e.b == node).collect();
            if g > 0.0 {
                rows[n] = Row::Algebraic;
                m[(n, n)] = g;
            } else if !incident.is_empty() {
                rows[n] = Row::Differential;
                for e in incident {
                    let s = sign(e, node);
                    for (end, u_end) in [(e.a, 1.0), (e.b, -1.0)] {
                        if let NodeRef::Bus(x) = end {
                            let col = unknown[x].expect("bus node has an unknown");
                            m[(n, col)] += s * u_end / e.l;
                        }
                    }
                }
            } else {
                rows[n] = Row::Empty;
                m[(n, n)] = 1.0;
            }
        }
        let minv = m
            .try_inverse()
            .ok_or_else(|| SimError::SingularNetwork("bus voltage equations are singular".into()))?;
        Ok(Self {
            n_states: state_count(model),
            n_gfc: model.gfcs.len(),
            unknown,
            rows,
            elements,
            conductances,
            minv,
            live,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn is_live(&self, state: usize) -> bool {
        self.live[state]
    }

    fn known(&self, node: NodeRef, gfc_v: &[AlphaBeta0], src: AlphaBeta0, c: usize) -> f64 {
        match node {
            NodeRef::Ground | NodeRef::Bus(_) => 0.0,
            NodeRef::Gfc(k) => gfc_v[k].to_array()[c],
            NodeRef::Source => src.to_array()[c],
        }
    }

    fn voltage(&self, node: NodeRef, vu: &[f64], gfc_v: &[AlphaBeta0], src: AlphaBeta0, c: usize) -> f64 {
        match node {
            NodeRef::Bus(b) => vu[self.unknown[b].expect("bus node has an unknown")],
            _ => self.known(node, gfc_v, src, c),
        }
    }

    /// Evaluates bus voltages, inductor current derivatives and converter
    /// output currents for the given states and imposed node voltages.
    pub fn eval(&self, currents: &[[f64; 3]], gfc_v: &[AlphaBeta0], src: AlphaBeta0, out: &mut NetworkEval) {
        let nu = self.rows.len();
        for d in out.di.iter_mut() {
            *d = [0.0; 3];
        }
        for g in out.i_gfc.iter_mut() {
            *g = AlphaBeta0::ZERO;
        }
        let mut gfc_i = vec![[0.0f64; 3]; self.n_gfc];
        let mut rhs = vec![0.0; nu];
        let mut vu = vec![0.0; nu];
        for c in 0..3 {
            rhs.iter_mut().for_each(|x| *x = 0.0);
            for e in &self.elements {
                let i = currents[e.state][c];
                let ke = self.known(e.a, gfc_v, src, c) - self.known(e.b, gfc_v, src, c);
                for (end, s) in [(e.a, 1.0), (e.b, -1.0)] {
                    if let NodeRef::Bus(b) = end {
                        let n = self.unknown[b].expect("bus node has an unknown");
                        match self.rows[n] {
                            Row::Algebraic => rhs[n] -= s * i,
                            Row::Differential => rhs[n] += s * (e.r * i - ke) / e.l,
                            Row::Empty => {}
                        }
                    }
                }
            }
            for (r, v) in vu.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, x) in rhs.iter().enumerate() {
                    acc += self.minv[(r, k)] * x;
                }
                *v = acc;
            }
            for e in &self.elements {
                let i = currents[e.state][c];
                let va = self.voltage(e.a, &vu, gfc_v, src, c);
                let vb = self.voltage(e.b, &vu, gfc_v, src, c);
                out.di[e.state][c] = (va - vb - e.r * i) / e.l;
                if let NodeRef::Gfc(k) = e.a {
                    gfc_i[k][c] += i;
                }
                if let NodeRef::Gfc(k) = e.b {
                    gfc_i[k][c] -= i;
                }
            }
            for (node, g) in &self.conductances {
                if let NodeRef::Gfc(k) = node {
                    gfc_i[*k][c] += g * gfc_v[*k].to_array()[c];
                }
            }
            for (b, u) in self.unknown.iter().enumerate() {
                if let Some(n) = u {
                    out.v_bus[b][c] = vu[*n];
                }
            }
        }
        for (k, g) in gfc_i.iter().enumerate() {
            out.i_gfc[k] = AlphaBeta0::from_array(*g);
        }
        for (k, g) in self.unknown.iter().enumerate() {
            if g.is_none() {
                out.v_bus[k] = [0.0; 3];
            }
        }
    }

    /// Zeroes dead states and restores KCL at inductor-only buses with the
    /// least change in stored magnetic flux.
    pub fn project(&self, currents: &mut [[f64; 3]]) {
        for (s, x) in currents.iter_mut().enumerate() {
            if !self.live[s] {
                *x = [0.0; 3];
            }
        }
        let diff: Vec<usize> = (0..self.rows.len()).filter(|&n| self.rows[n] == Row::Differential).collect();
        if diff.is_empty() {
            return;
        }
        let pos = |n: usize| diff.iter().position(|&d| d == n);
        let row_of = |node: NodeRef| -> Option<usize> {
            match node {
                NodeRef::Bus(b) => self.unknown[b].and_then(pos),
                _ => None,
            }
        };
        let nd = diff.len();
        let mut k = DMatrix::<f64>::zeros(nd, nd);
        for e in &self.elements {
            let ends = [(row_of(e.a), 1.0), (row_of(e.b), -1.0)];
            for (ra, sa) in ends {
                for (rb, sb) in ends {
                    if let (Some(x), Some(y)) = (ra, rb) {
                        k[(x, y)] += sa * sb / e.l;
                    }
                }
            }
        }
        let lu = k.lu();
        for c in 0..3 {
            let mut r = DVector::<f64>::zeros(nd);
            for e in &self.elements {
                let i = currents[e.state][c];
                if let Some(x) = row_of(e.a) {
                    r[x] += i;
                }
                if let Some(x) = row_of(e.b) {
                    r[x] -= i;
                }
            }
            if r.amax() == 0.0 {
                continue;
            }
            let Some(lambda) = lu.solve(&r) else { continue };
            for e in &self.elements {
                let mut acc = 0.0;
                if let Some(x) = row_of(e.a) {
                    acc += lambda[x];
                }
                if let Some(x) = row_of(e.b) {
                    acc -= lambda[x];
                }
                currents[e.state][c] -= acc / e.l;
            }
        }
    }

    /// Sinusoidal steady state at angular frequency `omega` for the given
    /// voltage-node phasors (peak, complex αβ convention `α + jβ`).
    /// Returns element current phasors (indexed by state) and bus phasors.
    pub fn phasor_solve(
        &self,
        omega: f64,
        gfc_v: &[Complex64],
        src: Complex64,
    ) -> Result<(Vec<Complex64>, Vec<Complex64>), SimError> {
        let nu = self.rows.len();
        let known = |n: NodeRef| match n {
            NodeRef::Gfc(k) => gfc_v[k],
            NodeRef::Source => src,
            _ => Complex64::new(0.0, 0.0),
        };
        let y_of = |e: &Element| Complex64::new(1.0, 0.0) / Complex64::new(e.r, omega * e.l);
        let mut ym = DMatrix::<Complex64>::zeros(nu, nu);
        let mut rhs = DVector::<Complex64>::zeros(nu);
        let mut touched = vec![false; nu];
        for e in &self.elements {
            let y = y_of(e);
            let ia = if let NodeRef::Bus(b) = e.a { self.unknown[b] } else { None };
            let ib = if let NodeRef::Bus(b) = e.b { self.unknown[b] } else { None };
            match (ia, ib) {
                (Some(x), Some(z)) => {
                    ym[(x, x)] += y;
                    ym[(z, z)] += y;
                    ym[(x, z)] -= y;
                    ym[(z, x)] -= y;
                    touched[x] = true;
                    touched[z] = true;
                }
                (Some(x), None) => {
                    ym[(x, x)] += y;
                    rhs[x] += y * known(e.b);
                    touched[x] = true;
                }
                (None, Some(z)) => {
                    ym[(z, z)] += y;
                    rhs[z] += y * known(e.a);
                    touched[z] = true;
                }
                (None, None) => {}
            }
        }
        for (node, g) in &self.conductances {
            if let NodeRef::Bus(b) = node {
                let x = self.unknown[*b].expect("bus node has an unknown");
                ym[(x, x)] += Complex64::new(*g, 0.0);
                touched[x] = true;
            }
        }
        for (x, t) in touched.iter().enumerate() {
            if !t {
                ym[(x, x)] = Complex64::new(1.0, 0.0);
            }
        }
        let v = ym
            .lu()
            .solve(&rhs)
            .ok_or_else(|| SimError::SingularNetwork("phasor equations are singular".into()))?;
        let volt = |n: NodeRef| match n {
            NodeRef::Bus(b) => v[self.unknown[b].expect("bus node has an unknown")],
            _ => known(n),
        };
        let mut cur = vec![Complex64::new(0.0, 0.0); self.n_states];
        for e in &self.elements {
            cur[e.state] = y_of(e) * (volt(e.a) - volt(e.b));
        }
        let mut buses = vec![Complex64::new(0.0, 0.0); self.unknown.len()];
        for (b, u) in self.unknown.iter().enumerate() {
            buses[b] = match u {
                Some(x) => v[*x],
                None => Complex64::new(0.0, 0.0),
            };
        }
        Ok((cur, buses))
    }

    /// Aggregate output current phasors of the converters for a phasor state.
    pub fn gfc_phasor_currents(&self, cur: &[Complex64], gfc_v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_gfc];
        for e in &self.elements {
            if let NodeRef::Gfc(k) = e.a {
                out[k] += cur[e.state];
            }
            if let NodeRef::Gfc(k) = e.b {
                out[k] -= cur[e.state];
            }
        }
        for (node, g) in &self.conductances {
            if let NodeRef::Gfc(k) = node {
                out[*k] += gfc_v[*k] * *g;
            }
        }
        out
    }

    /// Power dissipated in all resistances for the given states and voltages.
    pub fn dissipation(&self, currents: &[[f64; 3]], eval: &NetworkEval, gfc_v: &[AlphaBeta0]) -> f64 {
        let mut p = 0.0;
        for e in &self.elements {
            let i = currents[e.state];
            p += 1.5 * e.r * (i[0] * i[0] + i[1] * i[1]) + 3.0 * e.r * i[2] * i[2];
        }
        for (node, g) in &self.conductances {
            let v = match node {
                NodeRef::Bus(b) => eval.v_bus[*b],
                NodeRef::Gfc(k) => gfc_v[*k].to_array(),
                _ => [0.0; 3],
            };
            p += 1.5 * g * (v[0] * v[0] + v[1] * v[1]) + 3.0 * g * v[2] * v[2];
        }
        p
    }

    /// Power delivered by the grid source through its branch.
    pub fn source_power(&self, currents: &[[f64; 3]], src: AlphaBeta0) -> f64 {
        let mut p = 0.0;
        for e in &self.elements {
            let i = AlphaBeta0::from_array(currents[e.state]);
            if e.a == NodeRef::Source {
                p += crate::frames::instantaneous_pq(src, i).0;
            }
            if e.b == NodeRef::Source {
                p -= crate::frames::instantaneous_pq(src, i).0;
            }
        }
        p
    }
}

/// Every group of buses joined by closed branches that carries any element
/// must contain a converter node or the grid source.
fn check_sources(model: &NetworkModel, elements: &[Element], conductances: &[(NodeRef, f64)]) -> Result<(), SimError> {
    let n = model.buses.len() + 1;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (k, br) in model.branches.iter().enumerate() {
        if model.branch_closed(k) {
            let (a, b) = (find(&mut parent, br.from), find(&mut parent, br.to));
            parent[a] = b;
        }
    }
    let node_index = |r: NodeRef| -> Option<usize> {
        match r {
            NodeRef::Bus(b) => Some(b),
            NodeRef::Gfc(k) => Some(model.gfcs[k].bus),
            NodeRef::Source => Some(model.source_node),
            NodeRef::Ground => None,
        }
    };
    let mut has_source = vec![false; n];
    for g in &model.gfcs {
        let r = find(&mut parent, g.bus);
        has_source[r] = true;
    }
    let r = find(&mut parent, model.source_node);
    has_source[r] = true;
    let mut used = vec![false; n];
    for e in elements {
        for node in [e.a, e.b] {
            if let Some(x) = node_index(node) {
                let r = find(&mut parent, x);
                used[r] = true;
            }
        }
    }
    for (node, _) in conductances {
        if let Some(x) = node_index(*node) {
            let r = find(&mut parent, x);
            used[r] = true;
        }
    }
    for x in 0..n {
        let r = find(&mut parent, x);
        if used[r] && !has_source[r] {
            let name = model.buses.get(x).cloned().unwrap_or_else(|| "source".into());
            return Err(SimError::SingularNetwork(format!("bus {name} is energized by no source")));
        }
    }
    Ok(())
}
