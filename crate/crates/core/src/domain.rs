use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{PeriodicGrid, MAX_DIM};
use crate::linalg;

/// Tolerance below which a relative eigenvalue still counts as nonnegative.
pub const EIG_SLACK: f64 = 1e-9;

/// Step used when the metric time derivative is computed by differencing.
pub const DTAU_STEP: f64 = 1e-5;

pub type MetricFn = Arc<dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Metric families supported on the domain chart. Torus families are
/// periodic; sphere families live on a single stereographic chart and only
/// serve the analytic (pointwise) operations.
#[derive(Clone)]
pub enum MetricFamily {
    /// g = I on the periodic box.
    FlatTorus,
    /// g(tau) = e^{2*rate*tau} I, spatially flat at every time.
    ConformalTorus { rate: f64 },
    /// Round sphere of the given radius, stereographic chart about the pole.
    RoundSphere { radius: f64 },
    /// g(tau) = (1 + rate*tau) * g_round.
    ScaledSphere { radius: f64, rate: f64 },
    /// Arbitrary metric callback for tests and wrappers.
    Custom { metric: MetricFn, periodic: bool },
}

impl std::fmt::Debug for MetricFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricFamily::FlatTorus => write!(f, "FlatTorus"),
            MetricFamily::ConformalTorus { rate } => write!(f, "ConformalTorus(rate={rate})"),
            MetricFamily::RoundSphere { radius } => write!(f, "RoundSphere(radius={radius})"),
            MetricFamily::ScaledSphere { radius, rate } => {
                write!(f, "ScaledSphere(radius={radius}, rate={rate})")
            }
            MetricFamily::Custom { periodic, .. } => write!(f, "Custom(periodic={periodic})"),
        }
    }
}

/// Drift field V on the domain. Named families carry analytic Jacobians.
#[derive(Clone)]
pub enum VectorField {
    Zero,
    Constant(Vec<f64>),
    /// V = amplitude * sin(x_1) * d/dx_1.
    SineAxis { amplitude: f64 },
    Custom { field: VectorFn, jacobian: Option<MetricFn> },
}

impl std::fmt::Debug for VectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VectorField::Zero => write!(f, "Zero"),
            VectorField::Constant(c) => write!(f, "Constant({c:?})"),
            VectorField::SineAxis { amplitude } => write!(f, "SineAxis(amplitude={amplitude})"),
            VectorField::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// How metric time derivatives are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgMode {
    Analytic,
    Difference,
}

#[derive(Debug, Clone)]
pub struct DomainChart {
    pub grid: PeriodicGrid,
    pub family: MetricFamily,
    pub v_field: VectorField,
    /// Chart coordinates of the distance base point.
    pub base: Vec<f64>,
    pub dg_mode: DgMode,
    /// Test hook: overrides trace_h with a constant while the metric itself
    /// stays whatever the family says. Lets curve-length tests force a
    /// nonzero integrand mean on a static chart.
    pub synthetic_trace_h: Option<f64>,
}

/// Pointwise curvature data at a node and time.
#[derive(Debug, Clone)]
pub struct CurvatureSample {
    pub ricci: DMatrix<f64>,
    pub lie_v: DMatrix<f64>,
    pub ric_v: DMatrix<f64>,
}

/// Spatial rates of the time-dependent metric used by the coupling
/// quantities: h = (1/2) dg/dtau and scalars built from it.
#[derive(Debug, Clone)]
pub struct MetricRates {
    pub trace_h: f64,
    pub dtrace_h_dtau: f64,
    pub laplace_trace_h: f64,
    pub grad_trace_h: Vec<f64>,
    pub h_norm_sq: f64,
    /// One-form (div h)_c = g^{ab} nabla_a h_{bc}, lower index.
    pub div_h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SuperRicciReport {
    /// Smallest relative eigenvalue of (2 Ric - dg/dtau) against g over all
    /// sampled nodes and times.
    pub worst_margin: f64,
    pub pass: bool,
    /// Running admissibility constants: c(tau_j) is the smallest c >= 0 with
    /// h >= -c g on [0, tau_j] over the samples.
    pub c_tau: Vec<(f64, f64)>,
}

impl DomainChart {
    pub fn flat_torus(dim: usize, nodes: usize) -> Result<Self> {
        Self::new(PeriodicGrid::square(dim, nodes)?, MetricFamily::FlatTorus)
    }

    pub fn new(grid: PeriodicGrid, family: MetricFamily) -> Result<Self> {
        let base = vec![0.0; grid.dim()];
        let chart = DomainChart {
            grid,
            family,
            v_field: VectorField::Zero,
            base,
            dg_mode: DgMode::Analytic,
            synthetic_trace_h: None,
        };
        chart.validate()?;
        Ok(chart)
    }

    pub fn with_v(mut self, v: VectorField) -> Result<Self> {
        if let VectorField::Constant(c) = &v {
            if c.len() != self.dim() {
                return Err(Error::invariant("drift field component count must match dimension"));
            }
        }
        self.v_field = v;
        Ok(self)
    }

    pub fn with_base(mut self, base: Vec<f64>) -> Result<Self> {
        if base.len() != self.dim() {
            return Err(Error::invariant("base point dimension mismatch"));
        }
        self.base = base;
        Ok(self)
    }

    pub fn with_dg_mode(mut self, mode: DgMode) -> Self {
        self.dg_mode = mode;
        self
    }

    pub fn with_constant_trace_h(mut self, h0: f64) -> Self {
        self.synthetic_trace_h = Some(h0);
        self
    }

    fn validate(&self) -> Result<()> {
        match &self.family {
            MetricFamily::RoundSphere { radius } | MetricFamily::ScaledSphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::invariant("sphere radius must be positive"));
                }
            }
            _ => {}
        }
        // spot-check positive definiteness at a few nodes and times
        let len = self.grid.len();
        for &flat in &[0usize, len / 3, 2 * len / 3, len - 1] {
            let pos = self.grid.position(flat);
            for &tau in &[0.0, 0.25, 1.0] {
                let g = self.metric(&pos, tau);
                if g.clone().cholesky().is_none() {
                    return Err(Error::invariant(format!(
                        "metric not positive definite at node {flat}, tau {tau}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// FD stencils only make sense when the chart wraps.
    pub fn is_periodic(&self) -> bool {
        match &self.family {
            MetricFamily::FlatTorus | MetricFamily::ConformalTorus { .. } => true,
            MetricFamily::RoundSphere { .. } | MetricFamily::ScaledSphere { .. } => false,
            MetricFamily::Custom { periodic, .. } => *periodic,
        }
    }

    /// Metric independent of position: cheap per-step inverses in the solver.
    pub fn is_spatially_uniform(&self) -> bool {
        matches!(self.family, MetricFamily::FlatTorus | MetricFamily::ConformalTorus { .. })
    }

    /// Metric independent of time; unlocks closed-form space-time distances.
    pub fn is_static(&self) -> bool {
        if self.synthetic_trace_h.is_some() {
            return false;
        }
        match &self.family {
            MetricFamily::FlatTorus | MetricFamily::RoundSphere { .. } => true,
            MetricFamily::ConformalTorus { rate } => *rate == 0.0,
            MetricFamily::ScaledSphere { rate, .. } => *rate == 0.0,
            MetricFamily::Custom { .. } => false,
        }
    }

    /// Squared conformal factor for the spatially uniform torus families.
    pub fn conformal_factor_sq(&self, tau: f64) -> Option<f64> {
        match &self.family {
            MetricFamily::FlatTorus => Some(1.0),
            MetricFamily::ConformalTorus { rate } => Some((2.0 * rate * tau).exp()),
            _ => None,
        }
    }

    fn sphere_lambda_sq(&self, pos: &[f64], radius: f64) -> f64 {
        let r2: f64 = pos.iter().map(|x| x * x).sum();
        let lam = 2.0 * radius * radius / (radius * radius + r2);
        lam * lam
    }

    pub fn metric(&self, pos: &[f64], tau: f64) -> DMatrix<f64> {
        let m = self.dim();
        match &self.family {
            MetricFamily::FlatTorus => DMatrix::identity(m, m),
            MetricFamily::ConformalTorus { rate } => {
                DMatrix::identity(m, m) * (2.0 * rate * tau).exp()
            }
            MetricFamily::RoundSphere { radius } => {
                DMatrix::identity(m, m) * self.sphere_lambda_sq(pos, *radius)
            }
            MetricFamily::ScaledSphere { radius, rate } => {
                let c = 1.0 + rate * tau;
                debug_assert!(c > 0.0, "scaled-sphere factor must stay positive");
                DMatrix::identity(m, m) * (c * self.sphere_lambda_sq(pos, *radius))
            }
            MetricFamily::Custom { metric, .. } => {
                let g = metric(pos, tau);
                debug_assert!(linalg::is_symmetric(&g, 1e-12));
                g
            }
        }
    }

    pub fn metric_node(&self, flat: usize, tau: f64) -> DMatrix<f64> {
        self.metric(&self.grid.position(flat), tau)
    }

    pub fn inverse_metric(&self, pos: &[f64], tau: f64) -> Result<DMatrix<f64>> {
        self.metric(pos, tau)
            .try_inverse()
            .ok_or_else(|| Error::invariant("metric not invertible"))
    }

    /// dg/dtau, analytic for the named families unless differencing was
    /// requested. Custom charts always difference.
    pub fn metric_dtau(&self, pos: &[f64], tau: f64) -> DMatrix<f64> {
        if self.dg_mode == DgMode::Analytic {
            let m = self.dim();
            match &self.family {
                MetricFamily::FlatTorus | MetricFamily::RoundSphere { .. } => {
                    return DMatrix::zeros(m, m);
                }
                MetricFamily::ConformalTorus { rate } => {
                    return DMatrix::identity(m, m) * (2.0 * rate * (2.0 * rate * tau).exp());
                }
                MetricFamily::ScaledSphere { radius, rate } => {
                    return DMatrix::identity(m, m)
                        * (rate * self.sphere_lambda_sq(pos, *radius));
                }
                MetricFamily::Custom { .. } => {}
            }
        }
        let gp = self.metric(pos, tau + DTAU_STEP);
        let gm = self.metric(pos, tau - DTAU_STEP);
        (gp - gm) / (2.0 * DTAU_STEP)
    }

    /// h = (1/2) dg/dtau.
    pub fn h_tensor(&self, pos: &[f64], tau: f64) -> DMatrix<f64> {
        self.metric_dtau(pos, tau) * 0.5
    }

    /// Spatial derivative of the metric along one chart axis.
    fn dmetric_dx(&self, pos: &[f64], tau: f64, axis: usize) -> DMatrix<f64> {
        let m = self.dim();
        match &self.family {
            MetricFamily::FlatTorus | MetricFamily::ConformalTorus { .. } => DMatrix::zeros(m, m),
            MetricFamily::RoundSphere { radius } | MetricFamily::ScaledSphere { radius, .. } => {
                let c = match &self.family {
                    MetricFamily::ScaledSphere { rate, .. } => 1.0 + rate * tau,
                    _ => 1.0,
                };
                let r2: f64 = pos.iter().map(|x| x * x).sum();
                let lam_sq = self.sphere_lambda_sq(pos, *radius);
                let d = -2.0 * pos[axis] / (radius * radius + r2);
                DMatrix::identity(m, m) * (c * 2.0 * lam_sq * d)
            }
            MetricFamily::Custom { .. } => {
                let h = self.grid.spacing(axis);
                let mut pp = pos.to_vec();
                let mut pm = pos.to_vec();
                pp[axis] += h;
                pm[axis] -= h;
                (self.metric(&pp, tau) - self.metric(&pm, tau)) / (2.0 * h)
            }
        }
    }

    pub fn christoffel_is_zero(&self) -> bool {
        self.is_spatially_uniform()
    }

    /// Christoffel symbols Gamma^c_{ab}, index order [c][a][b].
    pub fn christoffel(&self, pos: &[f64], tau: f64) -> Result<Vec<DMatrix<f64>>> {
        let m = self.dim();
        if self.christoffel_is_zero() {
            return Ok(vec![DMatrix::zeros(m, m); m]);
        }
        match &self.family {
            MetricFamily::RoundSphere { radius } | MetricFamily::ScaledSphere { radius, .. } => {
                // conformal chart: Gamma^c_{ab} = d_a rho delta_{cb}
                //   + d_b rho delta_{ca} - d_c rho delta_{ab}, rho = log lambda
                let r2: f64 = pos.iter().map(|x| x * x).sum();
                let drho: Vec<f64> =
                    pos.iter().map(|x| -2.0 * x / (radius * radius + r2)).collect();
                let mut out = vec![DMatrix::zeros(m, m); m];
                for c in 0..m {
                    for a in 0..m {
                        for b in 0..m {
                            let mut v = 0.0;
                            if c == b {
                                v += drho[a];
                            }
                            if c == a {
                                v += drho[b];
                            }
                            if a == b {
                                v -= drho[c];
                            }
                            out[c][(a, b)] = v;
                        }
                    }
                }
                Ok(out)
            }
            MetricFamily::Custom { .. } => {
                let g_inv = self.inverse_metric(pos, tau)?;
                let dg: Vec<DMatrix<f64>> =
                    (0..m).map(|ax| self.dmetric_dx(pos, tau, ax)).collect();
                let mut out = vec![DMatrix::zeros(m, m); m];
                for c in 0..m {
                    for a in 0..m {
                        for b in 0..m {
                            let mut v = 0.0;
                            for d in 0..m {
                                v += g_inv[(c, d)] * (dg[a][(d, b)] + dg[b][(d, a)] - dg[d][(a, b)]);
                            }
                            out[c][(a, b)] = 0.5 * v;
                        }
                    }
                }
                Ok(out)
            }
            _ => unreachable!("uniform families short-circuit above"),
        }
    }

    /// Ricci tensor, analytic for the named families and assembled from
    /// second differences of the metric otherwise. Always exactly symmetric.
    pub fn ricci(&self, pos: &[f64], tau: f64) -> Result<DMatrix<f64>> {
        let m = self.dim();
        match &self.family {
            MetricFamily::FlatTorus | MetricFamily::ConformalTorus { .. } => {
                Ok(DMatrix::zeros(m, m))
            }
            MetricFamily::RoundSphere { radius } | MetricFamily::ScaledSphere { radius, .. } => {
                let round = DMatrix::identity(m, m) * self.sphere_lambda_sq(pos, *radius);
                Ok(round * ((m as f64 - 1.0) / (radius * radius)))
            }
            MetricFamily::Custom { .. } => {
                if !self.is_periodic() {
                    return Err(Error::invariant(
                        "difference-quotient curvature needs a periodic chart",
                    ));
                }
                let gamma = self.christoffel(pos, tau)?;
                // d_c Gamma at pos by centered differences with the grid step
                let mut dgamma = Vec::with_capacity(m);
                for ax in 0..m {
                    let h = self.grid.spacing(ax);
                    let mut pp = pos.to_vec();
                    let mut pm = pos.to_vec();
                    pp[ax] += h;
                    pm[ax] -= h;
                    let gp = self.christoffel(&pp, tau)?;
                    let gm = self.christoffel(&pm, tau)?;
                    let d: Vec<DMatrix<f64>> =
                        (0..m).map(|c| (&gp[c] - &gm[c]) / (2.0 * h)).collect();
                    dgamma.push(d);
                }
                let mut ric = DMatrix::zeros(m, m);
                for a in 0..m {
                    for b in 0..m {
                        let mut v = 0.0;
                        for c in 0..m {
                            v += dgamma[c][c][(a, b)] - dgamma[a][c][(c, b)];
                            for d in 0..m {
                                v += gamma[c][(c, d)] * gamma[d][(a, b)]
                                    - gamma[c][(a, d)] * gamma[d][(c, b)];
                            }
                        }
                        ric[(a, b)] = v;
                    }
                }
                let sym = (&ric + ric.transpose()) * 0.5;
                Ok(sym)
            }
        }
    }

    pub fn v_at(&self, pos: &[f64]) -> Vec<f64> {
        let m = self.dim();
        match &self.v_field {
            VectorField::Zero => vec![0.0; m],
            VectorField::Constant(c) => c.clone(),
            VectorField::SineAxis { amplitude } => {
                let mut v = vec![0.0; m];
                v[0] = amplitude * pos[0].sin();
                v
            }
            VectorField::Custom { field, .. } => field(pos),
        }
    }

    /// Jacobian dV^c/dx_a as a matrix indexed (c, a).
    fn v_jacobian(&self, pos: &[f64], tau: f64) -> DMatrix<f64> {
        let m = self.dim();
        match &self.v_field {
            VectorField::Zero | VectorField::Constant(_) => DMatrix::zeros(m, m),
            VectorField::SineAxis { amplitude } => {
                let mut j = DMatrix::zeros(m, m);
                j[(0, 0)] = amplitude * pos[0].cos();
                j
            }
            VectorField::Custom { jacobian, field } => {
                if let Some(jac) = jacobian {
                    jac(pos, tau)
                } else {
                    let mut j = DMatrix::zeros(m, m);
                    for a in 0..m {
                        let h = self.grid.spacing(a);
                        let mut pp = pos.to_vec();
                        let mut pm = pos.to_vec();
                        pp[a] += h;
                        pm[a] -= h;
                        let fp = field(&pp);
                        let fm = field(&pm);
                        for c in 0..m {
                            j[(c, a)] = (fp[c] - fm[c]) / (2.0 * h);
                        }
                    }
                    j
                }
            }
        }
    }

    /// Lie derivative (L_V g)_{ab} = V^c d_c g_{ab} + g_{cb} d_a V^c + g_{ac} d_b V^c.
    pub fn lie_v_metric(&self, pos: &[f64], tau: f64) -> DMatrix<f64> {
        let m = self.dim();
        let g = self.metric(pos, tau);
        let v = self.v_at(pos);
        let jac = self.v_jacobian(pos, tau);
        let mut out = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for c in 0..m {
                    s += g[(c, b)] * jac[(c, a)] + g[(a, c)] * jac[(c, b)];
                }
                out[(a, b)] = s;
            }
        }
        if !self.is_spatially_uniform() {
            for c in 0..m {
                if v[c] != 0.0 {
                    let dg = self.dmetric_dx(pos, tau, c);
                    for a in 0..m {
                        for b in 0..m {
                            out[(a, b)] += v[c] * dg[(a, b)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Ric_V = Ric - (1/2) L_V g, together with the pieces.
    pub fn curvature_sample(&self, pos: &[f64], tau: f64) -> Result<CurvatureSample> {
        let ricci = self.ricci(pos, tau)?;
        let lie_v = self.lie_v_metric(pos, tau);
        let ric_v = &ricci - &lie_v * 0.5;
        Ok(CurvatureSample { ricci, lie_v, ric_v })
    }

    /// Extremal relative eigenvalues of Ric_V against g over the node/time
    /// samples. Returns (inf, sup) of the pointwise minimum eigenvalue.
    pub fn ric_v_eigen_range(&self, taus: &[f64], nodes: &[usize]) -> Result<(f64, f64)> {
        if nodes.is_empty() || taus.is_empty() {
            return Err(Error::invariant("empty sample set for curvature bounds"));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &flat in nodes {
            let pos = self.grid.position(flat);
            for &tau in taus {
                let s = self.curvature_sample(&pos, tau)?;
                let g = self.metric(&pos, tau);
                let e = linalg::min_relative_eigenvalue(&s.ric_v, &g)?;
                lo = lo.min(e);
                hi = hi.max(e);
            }
        }
        Ok((lo, hi))
    }

    /// Smallest A >= 0 with Ric_V >= -A g over the samples.
    pub fn ric_v_lower_bound(&self, taus: &[f64], nodes: &[usize]) -> Result<f64> {
        let (lo, _) = self.ric_v_eigen_range(taus, nodes)?;
        Ok((-lo).max(0.0))
    }

    /// Checks dg/dtau <= 2 Ric over the samples and reports the running
    /// admissibility constants for h = (1/2) dg/dtau.
    pub fn check_backward_super_ricci(
        &self,
        taus: &[f64],
        nodes: &[usize],
    ) -> Result<SuperRicciReport> {
        if nodes.is_empty() || taus.is_empty() {
            return Err(Error::invariant("empty sample set for flow inequality check"));
        }
        let mut worst = f64::INFINITY;
        let mut c_tau = Vec::with_capacity(taus.len());
        let mut running_c: f64 = 0.0;
        for &tau in taus {
            for &flat in nodes {
                let pos = self.grid.position(flat);
                let g = self.metric(&pos, tau);
                let ric = self.ricci(&pos, tau)?;
                let dg = self.metric_dtau(&pos, tau);
                let diff = ric * 2.0 - &dg;
                let margin = linalg::min_relative_eigenvalue(&diff, &g)?;
                worst = worst.min(margin);
                let h_min = linalg::min_relative_eigenvalue(&(dg * 0.5), &g)?;
                running_c = running_c.max((-h_min).max(0.0));
            }
            c_tau.push((tau, running_c));
        }
        Ok(SuperRicciReport { worst_margin: worst, pass: worst >= -EIG_SLACK, c_tau })
    }

    /// Trace H = tr_g h. The synthetic override wins when set.
    pub fn trace_h(&self, pos: &[f64], tau: f64) -> Result<f64> {
        if let Some(h0) = self.synthetic_trace_h {
            return Ok(h0);
        }
        match &self.family {
            MetricFamily::FlatTorus | MetricFamily::RoundSphere { .. } => Ok(0.0),
            MetricFamily::ConformalTorus { rate } => Ok(rate * self.dim() as f64),
            MetricFamily::ScaledSphere { rate, .. } => {
                let c = 1.0 + rate * tau;
                Ok(self.dim() as f64 * rate / (2.0 * c))
            }
            MetricFamily::Custom { .. } => {
                let g_inv = self.inverse_metric(pos, tau)?;
                let h = self.h_tensor(pos, tau);
                Ok((g_inv * h).trace())
            }
        }
    }

    /// Scalar and tensor rates entering the coupling quantities. Analytic for
    /// the named families; differenced on periodic custom charts.
    pub fn metric_rates(&self, pos: &[f64], tau: f64) -> Result<MetricRates> {
        let m = self.dim();
        let mf = m as f64;
        if self.synthetic_trace_h.is_some() {
            // constant trace override on an otherwise static chart
            return Ok(MetricRates {
                trace_h: self.trace_h(pos, tau)?,
                dtrace_h_dtau: 0.0,
                laplace_trace_h: 0.0,
                grad_trace_h: vec![0.0; m],
                h_norm_sq: 0.0,
                div_h: vec![0.0; m],
            });
        }
        match &self.family {
            MetricFamily::FlatTorus | MetricFamily::RoundSphere { .. } => Ok(MetricRates {
                trace_h: 0.0,
                dtrace_h_dtau: 0.0,
                laplace_trace_h: 0.0,
                grad_trace_h: vec![0.0; m],
                h_norm_sq: 0.0,
                div_h: vec![0.0; m],
            }),
            MetricFamily::ConformalTorus { rate } => Ok(MetricRates {
                trace_h: rate * mf,
                dtrace_h_dtau: 0.0,
                laplace_trace_h: 0.0,
                grad_trace_h: vec![0.0; m],
                h_norm_sq: rate * rate * mf,
                div_h: vec![0.0; m],
            }),
            MetricFamily::ScaledSphere { rate, .. } => {
                let c = 1.0 + rate * tau;
                Ok(MetricRates {
                    trace_h: mf * rate / (2.0 * c),
                    dtrace_h_dtau: -mf * rate * rate / (2.0 * c * c),
                    laplace_trace_h: 0.0,
                    grad_trace_h: vec![0.0; m],
                    h_norm_sq: mf * (rate / (2.0 * c)) * (rate / (2.0 * c)),
                    div_h: vec![0.0; m],
                })
            }
            MetricFamily::Custom { .. } => self.metric_rates_differenced(pos, tau),
        }
    }

    fn metric_rates_differenced(&self, pos: &[f64], tau: f64) -> Result<MetricRates> {
        if !self.is_periodic() {
            return Err(Error::invariant("differenced metric rates need a periodic chart"));
        }
        let m = self.dim();
        let trace_h = self.trace_h(pos, tau)?;
        let dtrace_h_dtau = (self.trace_h(pos, tau + DTAU_STEP)?
            - self.trace_h(pos, tau - DTAU_STEP)?)
            / (2.0 * DTAU_STEP);
        // spatial derivatives of H with the grid step
        let mut grad = vec![0.0; m];
        let mut lap_flat = 0.0;
        let g_inv = self.inverse_metric(pos, tau)?;
        let gamma = self.christoffel(pos, tau)?;
        let h0 = trace_h;
        let mut second = DMatrix::zeros(m, m);
        for a in 0..m {
            let ha = self.grid.spacing(a);
            let mut pp = pos.to_vec();
            let mut pm = pos.to_vec();
            pp[a] += ha;
            pm[a] -= ha;
            let fp = self.trace_h(&pp, tau)?;
            let fm = self.trace_h(&pm, tau)?;
            grad[a] = (fp - fm) / (2.0 * ha);
            second[(a, a)] = (fp - 2.0 * h0 + fm) / (ha * ha);
            for b in (a + 1)..m {
                let hb = self.grid.spacing(b);
                let mut q = pos.to_vec();
                q[a] += ha;
                q[b] += hb;
                let upp = self.trace_h(&q, tau)?;
                q[b] -= 2.0 * hb;
                let upm = self.trace_h(&q, tau)?;
                q[a] -= 2.0 * ha;
                let umm = self.trace_h(&q, tau)?;
                q[b] += 2.0 * hb;
                let ump = self.trace_h(&q, tau)?;
                let cross = (upp - upm - ump + umm) / (4.0 * ha * hb);
                second[(a, b)] = cross;
                second[(b, a)] = cross;
            }
        }
        for a in 0..m {
            for b in 0..m {
                let mut corr = second[(a, b)];
                for c in 0..m {
                    corr -= gamma[c][(a, b)] * grad[c];
                }
                lap_flat += g_inv[(a, b)] * corr;
            }
        }
        // ||h||^2 and div h by differencing h itself
        let h = self.h_tensor(pos, tau);
        let mut h_norm_sq = 0.0;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        h_norm_sq += g_inv[(a, c)] * g_inv[(b, d)] * h[(a, b)] * h[(c, d)];
                    }
                }
            }
        }
        let mut dh = Vec::with_capacity(m);
        for a in 0..m {
            let ha = self.grid.spacing(a);
            let mut pp = pos.to_vec();
            let mut pm = pos.to_vec();
            pp[a] += ha;
            pm[a] -= ha;
            dh.push((self.h_tensor(&pp, tau) - self.h_tensor(&pm, tau)) / (2.0 * ha));
        }
        let mut div_h = vec![0.0; m];
        for cc in 0..m {
            let mut s = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let mut nabla = dh[a][(b, cc)];
                    for d in 0..m {
                        nabla -= gamma[d][(a, b)] * h[(d, cc)] + gamma[d][(a, cc)] * h[(b, d)];
                    }
                    s += g_inv[(a, b)] * nabla;
                }
            }
            div_h[cc] = s;
        }
        Ok(MetricRates {
            trace_h,
            dtrace_h_dtau,
            laplace_trace_h: lap_flat,
            grad_trace_h: grad,
            h_norm_sq,
            div_h,
        })
    }

    /// Distance from the base point at the given time.
    pub fn distance(&self, pos: &[f64], tau: f64) -> f64 {
        match &self.family {
            MetricFamily::FlatTorus => self.grid.periodic_distance(pos, &self.base),
            MetricFamily::ConformalTorus { rate } => {
                (rate * tau).exp() * self.grid.periodic_distance(pos, &self.base)
            }
            MetricFamily::RoundSphere { radius } => self.sphere_distance(pos, *radius),
            MetricFamily::ScaledSphere { radius, rate } => {
                (1.0 + rate * tau).sqrt() * self.sphere_distance(pos, *radius)
            }
            MetricFamily::Custom { .. } => self.grid.periodic_distance(pos, &self.base),
        }
    }

    fn sphere_distance(&self, pos: &[f64], radius: f64) -> f64 {
        // great-circle angle between the stereographic images of pos and base
        let embed = |x: &[f64]| -> Vec<f64> {
            let r2: f64 = x.iter().map(|t| t * t).sum();
            let den = r2 + radius * radius;
            let mut n: Vec<f64> = x.iter().map(|t| 2.0 * radius * t / den).collect();
            n.push((r2 - radius * radius) / den);
            n
        };
        let a = embed(pos);
        let b = embed(&self.base);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        radius * dot.clamp(-1.0, 1.0).acos()
    }

    /// Drift Laplacian of a grid scalar field at one node:
    /// Delta_g f + <V, grad f>, second-order stencils with periodic wrap.
    pub fn v_laplacian(&self, field: &[f64], flat: usize, tau: f64) -> Result<f64> {
        if !self.is_periodic() {
            return Err(Error::invariant("drift Laplacian needs a periodic chart"));
        }
        if field.len() != self.grid.len() {
            return Err(Error::invariant("field length must match grid"));
        }
        let m = self.dim();
        let pos = self.grid.position(flat);
        let g_inv = self.inverse_metric(&pos, tau)?;
        let v = self.v_at(&pos);
        let mut grad = [0.0f64; MAX_DIM];
        let mut out = 0.0;
        for a in 0..m {
            let ha = self.grid.spacing(a);
            let up = field[self.grid.neighbor(flat, a, 1)];
            let um = field[self.grid.neighbor(flat, a, -1)];
            grad[a] = (up - um) / (2.0 * ha);
            out += g_inv[(a, a)] * (up - 2.0 * field[flat] + um) / (ha * ha);
            for b in (a + 1)..m {
                let hb = self.grid.spacing(b);
                let upp = field[self.grid.neighbor(self.grid.neighbor(flat, a, 1), b, 1)];
                let upm = field[self.grid.neighbor(self.grid.neighbor(flat, a, 1), b, -1)];
                let ump = field[self.grid.neighbor(self.grid.neighbor(flat, a, -1), b, 1)];
                let umm = field[self.grid.neighbor(self.grid.neighbor(flat, a, -1), b, -1)];
                out += 2.0 * g_inv[(a, b)] * (upp - upm - ump + umm) / (4.0 * ha * hb);
            }
        }
        if !self.christoffel_is_zero() {
            let gamma = self.christoffel(&pos, tau)?;
            for a in 0..m {
                for b in 0..m {
                    for c in 0..m {
                        out -= g_inv[(a, b)] * gamma[c][(a, b)] * grad[c];
                    }
                }
            }
        }
        for (a, va) in v.iter().enumerate() {
            out += va * grad[a];
        }
        Ok(out)
    }

    /// Largest inverse-metric diagonal entry over sampled nodes and times;
    /// feeds the explicit stability gate.
    pub fn sup_inverse_metric_diag(&self, taus: &[f64]) -> Result<f64> {
        let mut sup = 0.0f64;
        let probes: Vec<usize> = if self.is_spatially_uniform() {
            vec![0]
        } else {
            let len = self.grid.len();
            (0..8).map(|i| i * len / 8).collect()
        };
        for &tau in taus {
            for &flat in &probes {
                let pos = self.grid.position(flat);
                let gi = self.inverse_metric(&pos, tau)?;
                for a in 0..self.dim() {
                    sup = sup.max(gi[(a, a)]);
                }
            }
        }
        Ok(sup)
    }

    /// Measured sup of |V|_g over the grid at tau = 0. Serves as the constant
    /// nondecreasing majorant for <V, grad r>.
    pub fn v_sup_norm(&self) -> f64 {
        let mut sup = 0.0f64;
        for flat in 0..self.grid.len() {
            let pos = self.grid.position(flat);
            let v = self.v_at(&pos);
            let g = self.metric(&pos, 0.0);
            let mut n = 0.0;
            for a in 0..self.dim() {
                for b in 0..self.dim() {
                    n += g[(a, b)] * v[a] * v[b];
                }
            }
            sup = sup.max(n.sqrt());
        }
        sup
    }
}

/// Upper barrier for the drift Laplacian of the distance function under
/// Ric_V >= -A: sqrt((m-1)A) coth(sqrt(A/(m-1)) r) + v(r), with the A -> 0
/// limit (m-1)/r + v(r).
pub fn v_laplacian_comparison_rhs(r: f64, big_a: f64, m: usize, v_at_r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::invariant("comparison radius must be positive"));
    }
    if big_a < 0.0 {
        return Err(Error::invariant("curvature constant A must be nonnegative"));
    }
    if m < 2 {
        return Err(Error::invariant("comparison needs dimension at least 2"));
    }
    let mm = (m - 1) as f64;
    if big_a == 0.0 {
        return Ok(mm / r + v_at_r);
    }
    let s = (big_a / mm).sqrt() * r;
    let coth = 1.0 / s.tanh();
    Ok((mm * big_a).sqrt() * coth + v_at_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn conformal_space_chart(nodes: usize) -> DomainChart {
        // e^{2 phi(x)} I with phi = 0.1 sin(x_1), static in time
        let metric: MetricFn = Arc::new(|pos: &[f64], _tau: f64| {
            let phi = 0.1 * pos[0].sin();
            DMatrix::identity(2, 2) * (2.0 * phi).exp()
        });
        DomainChart::new(
            PeriodicGrid::square(2, nodes).unwrap(),
            MetricFamily::Custom { metric, periodic: true },
        )
        .unwrap()
    }

    #[test]
    fn flat_metric_and_ricci_vanish() {
        let chart = DomainChart::flat_torus(2, 8).unwrap();
        let pos = [0.3, 1.1];
        assert_eq!(chart.ricci(&pos, 0.0).unwrap(), DMatrix::zeros(2, 2));
        assert_eq!(chart.metric(&pos, 5.0), DMatrix::identity(2, 2));
    }

    #[test]
    fn sphere_ricci_matches_round_formula() {
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let chart = DomainChart::new(grid, MetricFamily::RoundSphere { radius: 1.0 }).unwrap();
        let pos = [0.4, -0.2];
        let ric = chart.ricci(&pos, 0.0).unwrap();
        let g = chart.metric(&pos, 0.0);
        // unit sphere in dimension 2: Ric = (m-1) g = g
        assert_relative_eq!(ric[(0, 0)], g[(0, 0)], max_relative = 1e-14);
        assert_relative_eq!(ric[(1, 1)], g[(1, 1)], max_relative = 1e-14);
    }

    #[test]
    fn difference_quotient_ricci_matches_conformal_formula() {
        // oracle: for e^{2 phi} I in two dimensions, Ric = -(flat Laplacian of phi) I
        let chart = conformal_space_chart(64);
        let mut worst = 0.0f64;
        for &flat in &[5usize, 100, 1000, 2000] {
            let pos = chart.grid.position(flat);
            let ric = chart.ricci(&pos, 0.0).unwrap();
            let expect = 0.1 * pos[0].sin(); // -(d^2/dx^2) 0.1 sin = +0.1 sin
            worst = worst.max((ric[(0, 0)] - expect).abs());
            worst = worst.max((ric[(1, 1)] - expect).abs());
            worst = worst.max(ric[(0, 1)].abs());
        }
        assert!(worst < 2e-3, "worst deviation {worst}");
    }

    #[test]
    fn difference_quotient_ricci_refines_at_second_order() {
        let coarse = conformal_space_chart(32);
        let fine = conformal_space_chart(64);
        let err = |chart: &DomainChart| -> f64 {
            let mut worst = 0.0f64;
            for flat in (0..chart.grid.len()).step_by(chart.grid.len() / 16) {
                let pos = chart.grid.position(flat);
                let ric = chart.ricci(&pos, 0.0).unwrap();
                let expect = 0.1 * pos[0].sin();
                worst = worst.max((ric[(0, 0)] - expect).abs());
            }
            worst
        };
        let ratio = err(&coarse) / err(&fine);
        assert!((3.2..4.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn super_ricci_check_vendor_cases() {
        // static flat: equality with margin zero
        let flat = DomainChart::flat_torus(2, 8).unwrap();
        let taus = [0.0, 0.5, 1.0];
        let nodes = [0usize, 10, 30];
        let rep = flat.check_backward_super_ricci(&taus, &nodes).unwrap();
        assert!(rep.pass);
        assert!(rep.worst_margin.abs() < 1e-12);
        assert!(rep.c_tau.iter().all(|&(_, c)| c == 0.0));

        // round family scaled by 1 + 2(m-1) tau satisfies the equality case
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let sphere =
            DomainChart::new(grid, MetricFamily::ScaledSphere { radius: 1.0, rate: 2.0 }).unwrap();
        let rep = sphere.check_backward_super_ricci(&taus, &nodes).unwrap();
        assert!(rep.pass);
        assert!(rep.worst_margin.abs() < 1e-10, "margin {}", rep.worst_margin);

        // expanding conformal factor e^{2 tau} fails
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let expanding =
            DomainChart::new(grid, MetricFamily::ConformalTorus { rate: 1.0 }).unwrap();
        let rep = expanding.check_backward_super_ricci(&taus, &nodes).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst_margin < -1.0);
    }

    #[test]
    fn super_ricci_verdict_survives_parabolic_rescale() {
        // wrap g(tau) = c * g_orig(tau / c); the verdict is invariant and the
        // relative margin scales like 1/c because the comparison metric grew
        for &c in &[0.5f64, 2.0] {
            let metric: MetricFn = Arc::new(move |_pos: &[f64], tau: f64| {
                let lam_sq = 1.0 + 2.0 * (tau / c);
                DMatrix::identity(2, 2) * (c * lam_sq)
            });
            let grid = PeriodicGrid::square(2, 8).unwrap();
            let wrapped =
                DomainChart::new(grid, MetricFamily::Custom { metric, periodic: true }).unwrap();
            let taus: Vec<f64> = [0.0f64, 0.5, 1.0].iter().map(|t| t * c).collect();
            // flat custom chart has zero difference-quotient Ricci; factor
            // family 1 + 2 tau fails against Ric = 0, and so must the wrap
            let rep = wrapped.check_backward_super_ricci(&taus, &[0, 5]).unwrap();
            assert!(!rep.pass);
            let base_grid = PeriodicGrid::square(2, 8).unwrap();
            let base_metric: MetricFn = Arc::new(|_pos: &[f64], tau: f64| {
                DMatrix::identity(2, 2) * (1.0 + 2.0 * tau)
            });
            let base = DomainChart::new(
                base_grid,
                MetricFamily::Custom { metric: base_metric, periodic: true },
            )
            .unwrap();
            let base_rep = base.check_backward_super_ricci(&[0.0, 0.5, 1.0], &[0, 5]).unwrap();
            assert_relative_eq!(rep.worst_margin, base_rep.worst_margin / c, max_relative = 1e-6);
        }
    }

    #[test]
    fn admissibility_constant_tracks_shrinking_factor() {
        // g = e^{-2 tau} I: h = -g, so h >= -c g needs c = 1
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let chart = DomainChart::new(grid, MetricFamily::ConformalTorus { rate: -1.0 }).unwrap();
        let rep = chart.check_backward_super_ricci(&[0.0, 1.0], &[0]).unwrap();
        assert!(rep.pass); // 2 Ric - dg = 0 - (-2 e^{-2tau}) > 0
        for &(_, c) in &rep.c_tau {
            assert_relative_eq!(c, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn lie_derivative_drift_bound_example() {
        // V = sin(x_1) d_1 on the flat torus: Ric_V eigenvalues {-cos x_1, 0}
        let chart = DomainChart::flat_torus(2, 32)
            .unwrap()
            .with_v(VectorField::SineAxis { amplitude: 1.0 })
            .unwrap();
        let nodes: Vec<usize> = (0..chart.grid.len()).collect();
        let a = chart.ric_v_lower_bound(&[0.0], &nodes).unwrap();
        assert_relative_eq!(a, 1.0, max_relative = 1e-12);

        // constant drift on a flat chart is metric-preserving
        let killing = DomainChart::flat_torus(2, 8)
            .unwrap()
            .with_v(VectorField::Constant(vec![0.3, -0.2]))
            .unwrap();
        let a = killing.ric_v_lower_bound(&[0.0], &[0, 5, 17]).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn trace_h_family_values() {
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let shrink = DomainChart::new(grid, MetricFamily::ConformalTorus { rate: -1.0 }).unwrap();
        assert_relative_eq!(shrink.trace_h(&[0.0, 0.0], 0.7).unwrap(), -2.0);

        let grid = PeriodicGrid::square(2, 8).unwrap();
        let sphere =
            DomainChart::new(grid, MetricFamily::ScaledSphere { radius: 1.0, rate: 2.0 }).unwrap();
        // m (m-1) / (1 + 2 (m-1) tau) with m = 2
        for &tau in &[0.0, 0.3, 1.0] {
            let expect = 2.0 / (1.0 + 2.0 * tau);
            assert_relative_eq!(sphere.trace_h(&[0.1, 0.2], tau).unwrap(), expect);
        }
    }

    #[test]
    fn differenced_dg_matches_analytic() {
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let chart = DomainChart::new(grid, MetricFamily::ConformalTorus { rate: -1.0 })
            .unwrap()
            .with_dg_mode(DgMode::Difference);
        let dg = chart.metric_dtau(&[0.0, 0.0], 0.5);
        let expect = -2.0 * (-1.0f64).exp();
        assert_relative_eq!(dg[(0, 0)], expect, max_relative = 1e-8);
    }

    #[test]
    fn drift_laplacian_exact_zero_on_constants() {
        let charts: Vec<DomainChart> = vec![
            DomainChart::flat_torus(2, 8).unwrap(),
            DomainChart::new(
                PeriodicGrid::square(2, 8).unwrap(),
                MetricFamily::ConformalTorus { rate: 0.5 },
            )
            .unwrap(),
            conformal_space_chart(8),
        ];
        for chart in &charts {
            let field = vec![3.25; chart.grid.len()];
            for &flat in &[0usize, 17, 40] {
                let val = chart.v_laplacian(&field, flat, 0.2).unwrap();
                assert!(val.abs() <= 1e-12, "got {val}");
            }
        }
    }

    #[test]
    fn drift_laplacian_second_order_convergence() {
        // field cos(x_1): exact Laplacian -cos(x_1); V = sin(x_1) d_1 adds
        // -sin^2 half-angle term via the gradient
        let err_at = |nodes: usize| -> f64 {
            let chart = DomainChart::flat_torus(2, nodes)
                .unwrap()
                .with_v(VectorField::SineAxis { amplitude: 1.0 })
                .unwrap();
            let field: Vec<f64> =
                (0..chart.grid.len()).map(|f| chart.grid.coord(f, 0).cos()).collect();
            let mut worst = 0.0f64;
            for flat in 0..chart.grid.len() {
                let x = chart.grid.coord(flat, 0);
                let exact = -x.cos() - x.sin() * x.sin();
                let got = chart.v_laplacian(&field, flat, 0.0).unwrap();
                worst = worst.max((got - exact).abs());
            }
            worst
        };
        let ratio = err_at(32) / err_at(64);
        assert!((3.2..4.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn comparison_rhs_values() {
        // A = 1, m = 2, r = 1, v = 0: coth(1)
        let v = v_laplacian_comparison_rhs(1.0, 1.0, 2, 0.0).unwrap();
        assert_relative_eq!(v, 1.3130352854993313, max_relative = 1e-12);
        // A = 0 limit: (m-1)/r + v(r)
        let v = v_laplacian_comparison_rhs(2.0, 0.0, 3, 0.25).unwrap();
        assert_relative_eq!(v, 1.25, max_relative = 1e-14);
        assert!(v_laplacian_comparison_rhs(0.0, 1.0, 2, 0.0).is_err());
        assert!(v_laplacian_comparison_rhs(1.0, -1.0, 2, 0.0).is_err());
    }

    #[test]
    fn sphere_distance_closed_form() {
        let grid = PeriodicGrid::square(2, 8).unwrap();
        let chart = DomainChart::new(grid, MetricFamily::RoundSphere { radius: 1.0 }).unwrap();
        // chart radius tan(d/2) sits at geodesic distance d from the pole
        for &d in &[0.3f64, 1.0, 2.0] {
            let y = (d / 2.0).tan();
            let got = chart.distance(&[y, 0.0], 0.0);
            assert_relative_eq!(got, d, max_relative = 1e-12);
        }
    }

    #[test]
    fn empty_sample_sets_are_rejected() {
        let chart = DomainChart::flat_torus(2, 8).unwrap();
        assert!(chart.check_backward_super_ricci(&[], &[0]).is_err());
        assert!(chart.ric_v_eigen_range(&[0.0], &[]).is_err());
    }
}
