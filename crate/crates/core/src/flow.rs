use nalgebra::DMatrix;

use crate::domain::{DomainChart, VectorField};
use crate::error::{Error, Result};
use crate::target::{TargetFamily, TargetModel, TensorField, Witness};

/// Map iterate on the grid: node-major target coordinates.
#[derive(Debug, Clone)]
pub struct MapState {
    pub u: Vec<f64>,
    pub time: f64,
}

impl MapState {
    pub fn node<'a>(&'a self, n: usize, flat: usize) -> &'a [f64] {
        &self.u[flat * n..flat * n + n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    pub direction: Direction,
    pub scheme: Scheme,
    pub record_every: usize,
    pub cfl_safety: f64,
}

impl FlowConfig {
    /// Explicit-scheme stability gate: dt <= safety * h_min^2 / (2 m sup g^aa).
    pub fn validate(&self, chart: &DomainChart) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invariant("time step must be positive"));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::invariant("horizon must be nonnegative"));
        }
        if self.record_every == 0 {
            return Err(Error::invariant("record cadence must be at least 1"));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::invariant("stability safety factor must lie in (0, 1]"));
        }
        let taus = [0.0, self.t_end / 2.0, self.t_end];
        let sup = chart.sup_inverse_metric_diag(&taus)?;
        let h = chart.grid.min_spacing();
        let limit = self.cfl_safety * h * h / (2.0 * chart.dim() as f64 * sup);
        if self.dt > limit {
            return Err(Error::invariant(format!(
                "time step {} exceeds the stability limit {limit:.6e}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        if self.t_end == 0.0 {
            0
        } else {
            (self.t_end / self.dt).round().max(1.0) as usize
        }
    }
}

/// Everything the stepper needs: source chart (with its drift field), the
/// codomain model, the coupling tensor, and optionally the certification
/// witness whose sublevel set the image must stay inside.
pub struct FlowSystem {
    pub chart: DomainChart,
    pub target: TargetModel,
    pub tensor: TensorField,
    pub witness: Option<Witness>,
}

/// First and second chart derivatives of u at one node, wrap-aware on both
/// the source grid and a periodic codomain chart.
struct NodeDerivs {
    du: [[f64; 4]; 4],         // du[alpha][i]
    d2u: [[[f64; 4]; 4]; 4],   // d2u[alpha][beta][i]
}

impl NodeDerivs {
    fn zero() -> Self {
        NodeDerivs { du: [[0.0; 4]; 4], d2u: [[[0.0; 4]; 4]; 4] }
    }
}

impl FlowSystem {
    pub fn new(
        chart: DomainChart,
        target: TargetModel,
        tensor: TensorField,
        witness: Option<Witness>,
    ) -> Result<Self> {
        if !chart.is_periodic() {
            return Err(Error::invariant("flow stencils require a periodic source chart"));
        }
        Ok(FlowSystem { chart, target, tensor, witness })
    }

    pub fn source_dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.target.dim
    }

    fn derivs(&self, u: &[f64], flat: usize, out: &mut NodeDerivs) {
        let grid = &self.chart.grid;
        let m = grid.dim();
        let n = self.target.dim;
        let u0 = &u[flat * n..flat * n + n];
        let mut dp = [0.0; 4];
        let mut dm = [0.0; 4];
        for a in 0..m {
            let h = grid.spacing(a);
            let p = grid.neighbor(flat, a, 1);
            let q = grid.neighbor(flat, a, -1);
            self.target.displacement(u0, &u[p * n..p * n + n], &mut dp[..n]);
            self.target.displacement(u0, &u[q * n..q * n + n], &mut dm[..n]);
            for i in 0..n {
                out.du[a][i] = (dp[i] - dm[i]) / (2.0 * h);
                out.d2u[a][a][i] = (dp[i] + dm[i]) / (h * h);
            }
        }
        let mut shift = [0i64; 4];
        for a in 0..m {
            for b in (a + 1)..m {
                let ha = grid.spacing(a);
                let hb = grid.spacing(b);
                shift.fill(0);
                shift[a] = 1;
                shift[b] = 1;
                let pp = grid.shifted(flat, &shift[..m]);
                shift[b] = -1;
                let pm = grid.shifted(flat, &shift[..m]);
                shift[a] = -1;
                let mm = grid.shifted(flat, &shift[..m]);
                shift[b] = 1;
                let mp = grid.shifted(flat, &shift[..m]);
                // [u(++) - u(-+)] - [u(+-) - u(--)], each bracket wrap-aware
                self.target
                    .displacement(&u[mp * n..mp * n + n], &u[pp * n..pp * n + n], &mut dp[..n]);
                self.target
                    .displacement(&u[mm * n..mm * n + n], &u[pm * n..pm * n + n], &mut dm[..n]);
                for i in 0..n {
                    let v = (dp[i] - dm[i]) / (4.0 * ha * hb);
                    out.d2u[a][b][i] = v;
                    out.d2u[b][a][i] = v;
                }
            }
        }
    }

    /// Trace of the second fundamental form at one node:
    /// g^{ab} (d2u - Gamma^M du + Gamma^N(u) du du).
    pub fn tension_field(&self, state: &MapState, flat: usize) -> Result<Vec<f64>> {
        let n = self.target.dim;
        let mut field = vec![0.0; n];
        let mut d = NodeDerivs::zero();
        let mut work = Work::new(n);
        let ginv = self.node_inverse_metric(flat, state.time)?;
        let gm = self.node_gamma_m(flat, state.time)?;
        self.derivs(&state.u, flat, &mut d);
        self.tau_at(&state.u[flat * n..flat * n + n], &d, &ginv, gm.as_deref(), &mut work, &mut field);
        Ok(field)
    }

    fn node_inverse_metric(&self, flat: usize, tau: f64) -> Result<DMatrix<f64>> {
        let pos = self.chart.grid.position(flat);
        self.chart.inverse_metric(&pos, tau)
    }

    fn node_gamma_m(&self, flat: usize, tau: f64) -> Result<Option<Vec<DMatrix<f64>>>> {
        if self.chart.christoffel_is_zero() {
            return Ok(None);
        }
        let pos = self.chart.grid.position(flat);
        Ok(Some(self.chart.christoffel(&pos, tau)?))
    }

    /// tau(u) accumulation shared by the right-hand-side evaluators; the
    /// three public evaluators keep their own loops on top of it so the
    /// reduced systems are separate code paths.
    fn tau_at(
        &self,
        u0: &[f64],
        d: &NodeDerivs,
        ginv: &DMatrix<f64>,
        gamma_m: Option<&[DMatrix<f64>]>,
        work: &mut Work,
        out: &mut [f64],
    ) {
        let m = self.chart.dim();
        let n = self.target.dim;
        let curved_target = self.target.family != TargetFamily::Euclidean;
        if curved_target {
            self.target.christoffel(u0, &mut work.gamma_n);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let w = ginv[(a, b)];
                    if w == 0.0 {
                        continue;
                    }
                    let mut second = d.d2u[a][b][i];
                    if let Some(gm) = gamma_m {
                        for c in 0..m {
                            second -= gm[c][(a, b)] * d.du[c][i];
                        }
                    }
                    if curved_target {
                        let gn = &work.gamma_n[i];
                        for j in 0..n {
                            for k in 0..n {
                                second += gn[(j, k)] * d.du[a][j] * d.du[b][k];
                            }
                        }
                    }
                    acc += w * second;
                }
            }
            out[i] = acc;
        }
    }

    /// Full right-hand side tau(u) + du(V) + Tr_g T(du, du) over the grid,
    /// node-major.
    pub fn vt_rhs(&self, state: &MapState) -> Result<Vec<f64>> {
        let grid = &self.chart.grid;
        let m = grid.dim();
        let n = self.target.dim;
        let tau = state.time;
        let mut out = vec![0.0; grid.len() * n];
        let mut d = NodeDerivs::zero();
        let mut work = Work::new(n);
        let uniform = self.chart.is_spatially_uniform();
        let ginv_uniform =
            if uniform { Some(self.chart.inverse_metric(&self.chart.base, tau)?) } else { None };
        let has_v = !matches!(self.chart.v_field, VectorField::Zero);
        let has_t = !self.tensor.is_zero();
        for flat in 0..grid.len() {
            let ginv = match &ginv_uniform {
                Some(g) => g.clone(),
                None => self.node_inverse_metric(flat, tau)?,
            };
            let gm = self.node_gamma_m(flat, tau)?;
            self.derivs(&state.u, flat, &mut d);
            let u0 = &state.u[flat * n..flat * n + n];
            let o = &mut out[flat * n..flat * n + n];
            self.tau_at(u0, &d, &ginv, gm.as_deref(), &mut work, o);
            if has_v {
                let v = self.chart.v_at(&grid.position(flat));
                for i in 0..n {
                    let mut acc = 0.0;
                    for a in 0..m {
                        acc += v[a] * d.du[a][i];
                    }
                    o[i] += acc;
                }
            }
            if has_t {
                self.tensor.components(u0, n, &mut work.t_comp);
                for i in 0..n {
                    let mut acc = 0.0;
                    for a in 0..m {
                        for b in 0..m {
                            let w = ginv[(a, b)];
                            if w == 0.0 {
                                continue;
                            }
                            let mut s = 0.0;
                            for j in 0..n {
                                for k in 0..n {
                                    s += work.t_comp[i][(j, k)] * d.du[a][j] * d.du[b][k];
                                }
                            }
                            acc += w * s;
                        }
                    }
                    o[i] += acc;
                }
            }
        }
        Ok(out)
    }

    /// Right-hand side of the plain harmonic system: tau(u) alone.
    pub fn harmonic_rhs(&self, state: &MapState) -> Result<Vec<f64>> {
        let grid = &self.chart.grid;
        let n = self.target.dim;
        let tau = state.time;
        let mut out = vec![0.0; grid.len() * n];
        let mut d = NodeDerivs::zero();
        let mut work = Work::new(n);
        let uniform = self.chart.is_spatially_uniform();
        let ginv_uniform =
            if uniform { Some(self.chart.inverse_metric(&self.chart.base, tau)?) } else { None };
        for flat in 0..grid.len() {
            let ginv = match &ginv_uniform {
                Some(g) => g.clone(),
                None => self.node_inverse_metric(flat, tau)?,
            };
            let gm = self.node_gamma_m(flat, tau)?;
            self.derivs(&state.u, flat, &mut d);
            let u0 = &state.u[flat * n..flat * n + n];
            self.tau_at(u0, &d, &ginv, gm.as_deref(), &mut work, &mut out[flat * n..flat * n + n]);
        }
        Ok(out)
    }

    /// Right-hand side of the drift-harmonic system: tau(u) + du(V).
    pub fn v_harmonic_rhs(&self, state: &MapState) -> Result<Vec<f64>> {
        let grid = &self.chart.grid;
        let m = grid.dim();
        let n = self.target.dim;
        let tau = state.time;
        let mut out = vec![0.0; grid.len() * n];
        let mut d = NodeDerivs::zero();
        let mut work = Work::new(n);
        let uniform = self.chart.is_spatially_uniform();
        let ginv_uniform =
            if uniform { Some(self.chart.inverse_metric(&self.chart.base, tau)?) } else { None };
        let has_v = !matches!(self.chart.v_field, VectorField::Zero);
        for flat in 0..grid.len() {
            let ginv = match &ginv_uniform {
                Some(g) => g.clone(),
                None => self.node_inverse_metric(flat, tau)?,
            };
            let gm = self.node_gamma_m(flat, tau)?;
            self.derivs(&state.u, flat, &mut d);
            let u0 = &state.u[flat * n..flat * n + n];
            let o = &mut out[flat * n..flat * n + n];
            self.tau_at(u0, &d, &ginv, gm.as_deref(), &mut work, o);
            if has_v {
                let v = self.chart.v_at(&grid.position(flat));
                for i in 0..n {
                    let mut acc = 0.0;
                    for a in 0..m {
                        acc += v[a] * d.du[a][i];
                    }
                    o[i] += acc;
                }
            }
        }
        Ok(out)
    }

    /// Signed Euler increment of one step, exposed so direction symmetry can
    /// be checked exactly: forward is +dt * rhs, backward is -dt * rhs.
    pub fn step_increment(&self, state: &MapState, config: &FlowConfig) -> Result<Vec<f64>> {
        let rhs = self.vt_rhs(state)?;
        let s = match config.direction {
            Direction::Forward => config.dt,
            Direction::Backward => -config.dt,
        };
        Ok(rhs.into_iter().map(|r| s * r).collect())
    }

    /// One time step; the metric of a time-dependent chart is sampled at the
    /// current time for Euler and at stage times for RK4.
    pub fn step(&self, state: &MapState, config: &FlowConfig) -> Result<MapState> {
        let dt = config.dt;
        let next = match config.scheme {
            Scheme::Euler => {
                let incr = self.step_increment(state, config)?;
                let u: Vec<f64> =
                    state.u.iter().zip(&incr).map(|(a, b)| a + b).collect();
                MapState { u, time: state.time + dt }
            }
            Scheme::Rk4 => {
                let s = match config.direction {
                    Direction::Forward => 1.0,
                    Direction::Backward => -1.0,
                };
                let at = |u: Vec<f64>, t: f64| MapState { u, time: t };
                let k1 = self.vt_rhs(state)?;
                let mid1 = at(
                    state.u.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * s * b).collect(),
                    state.time + 0.5 * dt,
                );
                let k2 = self.vt_rhs(&mid1)?;
                let mid2 = at(
                    state.u.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * s * b).collect(),
                    state.time + 0.5 * dt,
                );
                let k3 = self.vt_rhs(&mid2)?;
                let end = at(
                    state.u.iter().zip(&k3).map(|(a, b)| a + dt * s * b).collect(),
                    state.time + dt,
                );
                let k4 = self.vt_rhs(&end)?;
                let u: Vec<f64> = (0..state.u.len())
                    .map(|j| {
                        state.u[j]
                            + s * dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                    })
                    .collect();
                MapState { u, time: state.time + dt }
            }
        };
        self.check_state(&next)?;
        Ok(next)
    }

    /// Invariants every accepted iterate satisfies: finiteness, chart-box
    /// membership, and sublevel confinement when a witness is attached.
    pub fn check_state(&self, state: &MapState) -> Result<()> {
        let n = self.target.dim;
        let mut bad = Vec::new();
        for flat in 0..self.chart.grid.len() {
            let y = state.node(n, flat);
            if y.iter().any(|t| !t.is_finite()) {
                return Err(Error::FlowAbort(format!(
                    "solution blew up: non-finite value at node {flat}, last valid time before {}",
                    state.time
                )));
            }
            if !self.target.contains(y) {
                bad.push(flat);
                if bad.len() >= 8 {
                    break;
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::FlowAbort(format!(
                "image left the codomain chart at time {}: nodes {bad:?}",
                state.time
            )));
        }
        if let Some(w) = &self.witness {
            let threshold = w.sublevel();
            let mut escaped = Vec::new();
            for flat in 0..self.chart.grid.len() {
                let y = state.node(n, flat);
                if !(w.f_star_value(&self.target, y) < threshold) {
                    escaped.push(flat);
                    if escaped.len() >= 8 {
                        break;
                    }
                }
            }
            if !escaped.is_empty() {
                return Err(Error::FlowAbort(format!(
                    "image left the certified region at time {}: nodes {escaped:?}",
                    state.time
                )));
            }
        }
        Ok(())
    }

    /// Pointwise energy density g^{ab} h_{ij}(u) du^i_a du^j_b over the grid.
    pub fn energy_density(&self, state: &MapState) -> Result<Vec<f64>> {
        let grid = &self.chart.grid;
        let m = grid.dim();
        let n = self.target.dim;
        let tau = state.time;
        let mut out = vec![0.0; grid.len()];
        let mut d = NodeDerivs::zero();
        let uniform = self.chart.is_spatially_uniform();
        let ginv_uniform =
            if uniform { Some(self.chart.inverse_metric(&self.chart.base, tau)?) } else { None };
        for flat in 0..grid.len() {
            let ginv = match &ginv_uniform {
                Some(g) => g.clone(),
                None => self.node_inverse_metric(flat, tau)?,
            };
            self.derivs(&state.u, flat, &mut d);
            let u0 = state.node(n, flat);
            let lam2 = self.target.lambda(u0).powi(2);
            let mut e = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let w = ginv[(a, b)];
                    if w == 0.0 {
                        continue;
                    }
                    let mut s = 0.0;
                    for i in 0..n {
                        s += d.du[a][i] * d.du[b][i];
                    }
                    e += w * lam2 * s;
                }
            }
            out[flat] = e;
        }
        Ok(out)
    }

    /// Density-to-witness ratio |du|^2 / f(u)^2.
    pub fn omega_field(&self, state: &MapState, energy: &[f64]) -> Result<Vec<f64>> {
        let w = self
            .witness
            .as_ref()
            .ok_or_else(|| Error::invariant("density ratio needs an attached witness"))?;
        let n = self.target.dim;
        let mut out = vec![0.0; energy.len()];
        for flat in 0..energy.len() {
            let f = w.f(state.node(n, flat));
            if !(f > 0.0) {
                return Err(Error::FlowAbort(format!(
                    "certification function nonpositive along the image at node {flat}"
                )));
            }
            out[flat] = energy[flat] / (f * f);
        }
        Ok(out)
    }

    /// Integral of the energy density against the metric volume element.
    pub fn total_energy(&self, state: &MapState, energy: &[f64]) -> f64 {
        let grid = &self.chart.grid;
        let cell = grid.cell_volume();
        let uniform = self.chart.is_spatially_uniform();
        let det_uniform = if uniform {
            Some(self.chart.metric(&self.chart.base, state.time).determinant().max(0.0).sqrt())
        } else {
            None
        };
        let mut total = 0.0;
        for (flat, e) in energy.iter().enumerate() {
            let vol = match det_uniform {
                Some(v) => v,
                None => {
                    let pos = grid.position(flat);
                    self.chart.metric(&pos, state.time).determinant().max(0.0).sqrt()
                }
            };
            total += e * vol * cell;
        }
        total
    }

    /// Sum over target components of the variance of the nodal values.
    pub fn coord_variance(&self, state: &MapState) -> f64 {
        let n = self.target.dim;
        let count = self.chart.grid.len() as f64;
        let mut total = 0.0;
        for i in 0..n {
            let mean: f64 =
                (0..self.chart.grid.len()).map(|f| state.u[f * n + i]).sum::<f64>() / count;
            let var: f64 = (0..self.chart.grid.len())
                .map(|f| {
                    let d = state.u[f * n + i] - mean;
                    d * d
                })
                .sum::<f64>()
                / count;
            total += var;
        }
        total
    }

    /// Nodes within the stated distance of the chart base point, measured in
    /// the initial-time metric; the regions reported per frame are fixed.
    pub fn ball_mask(&self, radius: f64) -> Vec<bool> {
        let grid = &self.chart.grid;
        (0..grid.len())
            .map(|flat| {
                let pos = grid.position(flat);
                self.chart.distance(&pos, 0.0) <= radius + 1e-12
            })
            .collect()
    }

    /// Max-norm defect of the parabolic identity for |du|^2 over the grid:
    /// (1/2)(lap_V -/+ d_t)|du|^2 minus the curvature-and-coupling bracket,
    /// evaluated at the middle of three consecutive iterates.
    pub fn bochner_residual(
        &self,
        prev: &MapState,
        curr: &MapState,
        next: &MapState,
        direction: Direction,
    ) -> Result<f64> {
        let grid = &self.chart.grid;
        let m = grid.dim();
        let n = self.target.dim;
        let tau = curr.time;
        let span = next.time - prev.time;
        if !(span.abs() > 0.0) {
            return Err(Error::invariant("consecutive iterates must be distinct in time"));
        }
        let e_prev = self.energy_density(prev)?;
        let e_curr = self.energy_density(curr)?;
        let e_next = self.energy_density(next)?;
        let k0 = self.target.curvature_constant();
        let has_t = !self.tensor.is_zero();
        let mut work = Work::new(n);
        let mut d = NodeDerivs::zero();
        let mut worst = 0.0f64;
        for flat in 0..grid.len() {
            let pos = grid.position(flat);
            let ginv = self.chart.inverse_metric(&pos, tau)?;
            let gm = self.node_gamma_m(flat, tau)?;
            self.derivs(&curr.u, flat, &mut d);
            let u0 = curr.node(n, flat);
            let lam = self.target.lambda(u0);
            let lam2 = lam * lam;

            // second fundamental form in charts
            let curved_target = self.target.family != TargetFamily::Euclidean;
            if curved_target {
                self.target.christoffel(u0, &mut work.gamma_n);
            }
            let mut nabla_du = [[[0.0f64; 4]; 4]; 4]; // [alpha][beta][i]
            for a in 0..m {
                for b in 0..m {
                    for i in 0..n {
                        let mut v = d.d2u[a][b][i];
                        if let Some(gm) = &gm {
                            for c in 0..m {
                                v -= gm[c][(a, b)] * d.du[c][i];
                            }
                        }
                        if curved_target {
                            for j in 0..n {
                                for k in 0..n {
                                    v += work.gamma_n[i][(j, k)] * d.du[a][j] * d.du[b][k];
                                }
                            }
                        }
                        nabla_du[a][b][i] = v;
                    }
                }
            }

            let mut norm_nabla = 0.0;
            for a in 0..m {
                for b in 0..m {
                    for c in 0..m {
                        for dd in 0..m {
                            let w = ginv[(a, c)] * ginv[(b, dd)];
                            if w == 0.0 {
                                continue;
                            }
                            let mut s = 0.0;
                            for i in 0..n {
                                s += nabla_du[a][b][i] * nabla_du[c][dd][i];
                            }
                            norm_nabla += w * lam2 * s;
                        }
                    }
                }
            }

            // pairing of a symmetric source tensor S with du against h
            let pair = |s_mat: &DMatrix<f64>| -> f64 {
                let mut acc = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        for c in 0..m {
                            for dd in 0..m {
                                let w = ginv[(a, c)] * ginv[(b, dd)] * s_mat[(c, dd)];
                                if w == 0.0 {
                                    continue;
                                }
                                let mut s = 0.0;
                                for i in 0..n {
                                    s += d.du[a][i] * d.du[b][i];
                                }
                                acc += w * lam2 * s;
                            }
                        }
                    }
                }
                acc
            };
            let sample = self.chart.curvature_sample(&pos, tau)?;
            let pair_ric = pair(&sample.ric_v);

            // pullback P^{ik} = g^{ab} du^i_a du^k_b; constant-curvature
            // codomain curvature term K lam^4 ((tr P)^2 - |P|^2)
            let mut p = [[0.0f64; 4]; 4];
            for i in 0..n {
                for k in 0..n {
                    let mut acc = 0.0;
                    for a in 0..m {
                        for b in 0..m {
                            let w = ginv[(a, b)];
                            if w == 0.0 {
                                continue;
                            }
                            acc += w * d.du[a][i] * d.du[b][k];
                        }
                    }
                    p[i][k] = acc;
                }
            }
            let mut tr_p = 0.0;
            let mut frob = 0.0;
            for i in 0..n {
                tr_p += p[i][i];
                for k in 0..n {
                    frob += p[i][k] * p[i][k];
                }
            }
            let r_term = k0 * lam2 * lam2 * (tr_p * tr_p - frob);

            let mut dt_term = 0.0;
            let mut twot_term = 0.0;
            if has_t {
                let dt_cov = self.tensor.covariant_derivative(&self.target, u0);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            for l in 0..n {
                                dt_term += lam2 * dt_cov[l][i][(j, k)] * p[j][k] * p[l][i];
                            }
                        }
                    }
                }
                self.tensor.components(u0, n, &mut work.t_comp);
                for a in 0..m {
                    for b in 0..m {
                        for c in 0..m {
                            for dd in 0..m {
                                let w = ginv[(a, c)] * ginv[(b, dd)];
                                if w == 0.0 {
                                    continue;
                                }
                                for i in 0..n {
                                    for j in 0..n {
                                        for k in 0..n {
                                            twot_term += 2.0
                                                * w
                                                * lam2
                                                * work.t_comp[i][(j, k)]
                                                * nabla_du[a][b][j]
                                                * d.du[dd][k]
                                                * d.du[c][i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            let mut bracket = norm_nabla + pair_ric - r_term - dt_term - twot_term;
            let de_dt = (e_next[flat] - e_prev[flat]) / span;
            let lap_v = self.chart.v_laplacian(&e_curr, flat, tau)?;
            let lhs = match direction {
                Direction::Forward => 0.5 * (lap_v - de_dt),
                Direction::Backward => {
                    let h0 = self.chart.h_tensor(&pos, tau);
                    bracket -= pair(&h0);
                    0.5 * (lap_v + de_dt)
                }
            };
            worst = worst.max((lhs - bracket).abs());
        }
        Ok(worst)
    }
}

struct Work {
    gamma_n: Vec<DMatrix<f64>>,
    t_comp: Vec<DMatrix<f64>>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work {
            gamma_n: vec![DMatrix::zeros(n, n); n],
            t_comp: vec![DMatrix::zeros(n, n); n],
        }
    }
}

/// Named map families for the start of a run.
#[derive(Debug, Clone)]
pub enum InitialData {
    Constant { value: Vec<f64> },
    Identity,
    SineMode { component: usize, axis: usize, center: Vec<f64>, amplitude: f64 },
    GaussianBump { component: usize, axis: usize, center: Vec<f64>, amplitude: f64, concentration: f64 },
}

pub fn build_initial(
    chart: &DomainChart,
    target: &TargetModel,
    data: &InitialData,
) -> Result<MapState> {
    let grid = &chart.grid;
    let m = grid.dim();
    let n = target.dim;
    let check_center = |c: &Vec<f64>| -> Result<()> {
        if c.len() != n {
            return Err(Error::invariant("initial center must match target dimension"));
        }
        Ok(())
    };
    let mut u = vec![0.0; grid.len() * n];
    match data {
        InitialData::Constant { value } => {
            check_center(value)?;
            for flat in 0..grid.len() {
                u[flat * n..flat * n + n].copy_from_slice(value);
            }
        }
        InitialData::Identity => {
            if m != n {
                return Err(Error::invariant(
                    "identity initial data needs equal source and target dimension",
                ));
            }
            match &target.periods {
                Some(p) => {
                    for (axis, pa) in p.iter().enumerate() {
                        if (pa - grid.period(axis)).abs() > 1e-12 {
                            return Err(Error::invariant(
                                "identity initial data needs target periods matching the grid",
                            ));
                        }
                    }
                }
                None => {
                    return Err(Error::invariant(
                        "identity initial data needs a periodic codomain chart",
                    ))
                }
            }
            for flat in 0..grid.len() {
                let pos = grid.position(flat);
                u[flat * n..flat * n + n].copy_from_slice(&pos);
            }
        }
        InitialData::SineMode { component, axis, center, amplitude } => {
            check_center(center)?;
            if *component >= n || *axis >= m {
                return Err(Error::invariant("initial mode indices out of range"));
            }
            for flat in 0..grid.len() {
                let x = grid.coord(flat, *axis);
                u[flat * n..flat * n + n].copy_from_slice(center);
                u[flat * n + component] += amplitude * x.sin();
            }
        }
        InitialData::GaussianBump { component, axis, center, amplitude, concentration } => {
            check_center(center)?;
            if *component >= n || *axis >= m {
                return Err(Error::invariant("initial mode indices out of range"));
            }
            if !(*concentration > 0.0) {
                return Err(Error::invariant("bump concentration must be positive"));
            }
            // periodic bump: exp(c (cos(x - pi) - 1)) peaks mid-axis and is
            // smooth across the seam
            for flat in 0..grid.len() {
                let x = grid.coord(flat, *axis);
                u[flat * n..flat * n + n].copy_from_slice(center);
                u[flat * n + component] +=
                    amplitude * (concentration * ((x - std::f64::consts::PI).cos() - 1.0)).exp();
            }
        }
    }
    Ok(MapState { u, time: 0.0 })
}

/// One recorded observation row.
#[derive(Debug, Clone)]
pub struct FrameRow {
    pub time: f64,
    pub sup_e: f64,
    pub sup_omega: Option<f64>,
    pub sup_omega_half_rball: Option<f64>,
    pub total_energy: f64,
    pub sup_grad: f64,
    pub sup_grad_rball: f64,
    pub sup_grad_half_rball: f64,
    pub coord_variance: f64,
    pub bochner: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub frames: Vec<FrameRow>,
    pub final_state: MapState,
}

/// Full marching loop with frame recording. Frames are taken at step 0, at
/// the record cadence, and at the final step; the identity-defect column is
/// filled wherever both neighbors of the recorded iterate exist.
pub fn run_flow(
    system: &FlowSystem,
    config: &FlowConfig,
    initial: MapState,
    r_ball: Option<f64>,
) -> Result<RunOutput> {
    config.validate(&system.chart)?;
    system.check_state(&initial)?;
    let steps = config.steps();
    let mask_r = r_ball.map(|r| system.ball_mask(r));
    let mask_half = r_ball.map(|r| system.ball_mask(r / 2.0));
    let masked_sup = |field: &[f64], mask: &Option<Vec<bool>>| -> f64 {
        match mask {
            None => field.iter().cloned().fold(0.0f64, f64::max),
            Some(ms) => field
                .iter()
                .zip(ms)
                .filter(|(_, keep)| **keep)
                .map(|(v, _)| *v)
                .fold(0.0f64, f64::max),
        }
    };
    let mut frames = Vec::new();
    let mut prev: Option<MapState> = None;
    let mut curr = initial;
    for k in 0..=steps {
        let record = k == 0 || k == steps || k % config.record_every == 0;
        let next = if k < steps { Some(system.step(&curr, config)?) } else { None };
        if record {
            let energy = system.energy_density(&curr)?;
            let sup_e = energy.iter().cloned().fold(0.0f64, f64::max);
            let (sup_omega, sup_omega_half) = if system.witness.is_some() {
                let omega = system.omega_field(&curr, &energy)?;
                (Some(masked_sup(&omega, &None)), Some(masked_sup(&omega, &mask_half)))
            } else {
                (None, None)
            };
            let grad: Vec<f64> = energy.iter().map(|e| e.max(0.0).sqrt()).collect();
            let bochner = match (&prev, &next) {
                (Some(p), Some(nx)) => {
                    Some(system.bochner_residual(p, &curr, nx, config.direction)?)
                }
                _ => None,
            };
            frames.push(FrameRow {
                time: curr.time,
                sup_e,
                sup_omega,
                sup_omega_half_rball: sup_omega_half,
                total_energy: system.total_energy(&curr, &energy),
                sup_grad: masked_sup(&grad, &None),
                sup_grad_rball: masked_sup(&grad, &mask_r),
                sup_grad_half_rball: masked_sup(&grad, &mask_half),
                coord_variance: system.coord_variance(&curr),
                bochner,
            });
        }
        if let Some(nx) = next {
            prev = Some(std::mem::replace(&mut curr, nx));
        }
    }
    Ok(RunOutput { frames, final_state: curr })
}
