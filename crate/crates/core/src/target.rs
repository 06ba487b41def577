use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Slack for the certification eigenvalue gate.
pub const GATE_SLACK: f64 = -1e-8;

/// Step for chart-coordinate difference quotients of witness derivatives.
pub const HESS_STEP: f64 = 1e-4;

/// Conformal model chart of the codomain: metric lambda(y)^2 * I with
/// constant curvature 0, +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetFamily {
    Euclidean,
    Sphere,
    Hyperbolic,
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    pub dim: usize,
    pub family: TargetFamily,
    /// Optional per-axis periods for a Euclidean chart that wraps (flat torus
    /// codomain). Differences then use the minimal representative.
    pub periods: Option<Vec<f64>>,
}

impl TargetModel {
    pub fn new(dim: usize, family: TargetFamily) -> Result<Self> {
        if dim == 0 || dim > 4 {
            return Err(Error::invariant("target dimension must be between 1 and 4"));
        }
        Ok(TargetModel { dim, family, periods: None })
    }

    pub fn with_periods(mut self, periods: Vec<f64>) -> Result<Self> {
        if self.family != TargetFamily::Euclidean {
            return Err(Error::invariant("periodic wrap is only meaningful on a flat chart"));
        }
        if periods.len() != self.dim || periods.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::invariant("periods must be positive and match dimension"));
        }
        self.periods = Some(periods);
        Ok(self)
    }

    /// Constant sectional curvature of the family.
    pub fn curvature_constant(&self) -> f64 {
        match self.family {
            TargetFamily::Euclidean => 0.0,
            TargetFamily::Sphere => 1.0,
            TargetFamily::Hyperbolic => -1.0,
        }
    }

    pub fn lambda(&self, y: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|t| t * t).sum();
        match self.family {
            TargetFamily::Euclidean => 1.0,
            TargetFamily::Sphere => 2.0 / (1.0 + r2),
            TargetFamily::Hyperbolic => 2.0 / (1.0 - r2),
        }
    }

    /// Chart validity box. The hyperbolic chart is the open unit ball.
    pub fn contains(&self, y: &[f64]) -> bool {
        match self.family {
            TargetFamily::Euclidean | TargetFamily::Sphere => y.iter().all(|t| t.abs() <= 1e3),
            TargetFamily::Hyperbolic => {
                let r2: f64 = y.iter().map(|t| t * t).sum();
                r2 < (1.0 - 1e-9)
            }
        }
    }

    pub fn metric(&self, y: &[f64]) -> DMatrix<f64> {
        let lam = self.lambda(y);
        DMatrix::identity(self.dim, self.dim) * (lam * lam)
    }

    /// d/dy_k of log lambda; the whole Christoffel structure hangs off it.
    fn dlog_lambda(&self, y: &[f64]) -> Vec<f64> {
        let r2: f64 = y.iter().map(|t| t * t).sum();
        match self.family {
            TargetFamily::Euclidean => vec![0.0; self.dim],
            TargetFamily::Sphere => y.iter().map(|t| -2.0 * t / (1.0 + r2)).collect(),
            TargetFamily::Hyperbolic => y.iter().map(|t| 2.0 * t / (1.0 - r2)).collect(),
        }
    }

    /// Gamma^i_{jk} = rho_j delta_{ik} + rho_k delta_{ij} - rho_i delta_{jk}
    /// with rho = log lambda; filled into out[i][(j, k)].
    pub fn christoffel(&self, y: &[f64], out: &mut [DMatrix<f64>]) {
        let n = self.dim;
        let rho = self.dlog_lambda(y);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut v = 0.0;
                    if i == k {
                        v += rho[j];
                    }
                    if i == j {
                        v += rho[k];
                    }
                    if j == k {
                        v -= rho[i];
                    }
                    out[i][(j, k)] = v;
                }
            }
        }
    }

    pub fn christoffel_alloc(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out = vec![DMatrix::zeros(self.dim, self.dim); self.dim];
        self.christoffel(y, &mut out);
        out
    }

    /// Fully covariant curvature tensor R_{ijkl} = K (h_ik h_jl - h_il h_jk).
    pub fn riemann(&self, y: &[f64], i: usize, j: usize, k: usize, l: usize) -> f64 {
        let lam2 = self.lambda(y).powi(2);
        let h = |a: usize, b: usize| if a == b { lam2 } else { 0.0 };
        self.curvature_constant() * (h(i, k) * h(j, l) - h(i, l) * h(j, k))
    }

    /// Sectional curvature of the plane spanned by chart vectors x, v.
    pub fn sectional_curvature(&self, y: &[f64], x: &[f64], v: &[f64]) -> Option<f64> {
        let n = self.dim;
        let lam2 = self.lambda(y).powi(2);
        let hxx: f64 = lam2 * x.iter().map(|t| t * t).sum::<f64>();
        let hvv: f64 = lam2 * v.iter().map(|t| t * t).sum::<f64>();
        let hxv: f64 = lam2 * x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let den = hxx * hvv - hxv * hxv;
        if den <= 1e-12 * lam2 * lam2 {
            return None;
        }
        let mut num = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        num += self.riemann(y, i, j, k, l) * x[i] * v[j] * x[k] * v[l];
                    }
                }
            }
        }
        Some(num / den)
    }

    /// Geodesic distance from the chart origin.
    pub fn distance_from_origin(&self, y: &[f64]) -> f64 {
        let r = y.iter().map(|t| t * t).sum::<f64>().sqrt();
        match self.family {
            TargetFamily::Euclidean => r,
            TargetFamily::Sphere => 2.0 * r.atan(),
            TargetFamily::Hyperbolic => 2.0 * r.atanh(),
        }
    }

    /// Chart radius of the point at geodesic distance d from the origin.
    pub fn chart_radius(&self, d: f64) -> f64 {
        match self.family {
            TargetFamily::Euclidean => d,
            TargetFamily::Sphere => (d / 2.0).tan(),
            TargetFamily::Hyperbolic => (d / 2.0).tanh(),
        }
    }

    /// to - from, reduced to the minimal representative on periodic charts.
    pub fn displacement(&self, from: &[f64], to: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let mut d = to[i] - from[i];
            if let Some(p) = &self.periods {
                let period = p[i];
                d -= (d / period).round() * period;
            }
            out[i] = d;
        }
    }
}

/// Sup of sectional curvature over sampled points: all coordinate 2-planes
/// plus 32 seeded pseudo-random planes per point. Dimension-1 charts carry no
/// 2-planes and report 0.
pub fn sectional_curvature_sup(target: &TargetModel, points: &[Vec<f64>], seed: u64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invariant("empty region for curvature supremum"));
    }
    let n = target.dim;
    if n < 2 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ec7);
    let mut sup = f64::NEG_INFINITY;
    for y in points {
        for i in 0..n {
            for j in (i + 1)..n {
                let mut x = vec![0.0; n];
                let mut v = vec![0.0; n];
                x[i] = 1.0;
                v[j] = 1.0;
                if let Some(k) = target.sectional_curvature(y, &x, &v) {
                    sup = sup.max(k);
                }
            }
        }
        for _ in 0..32 {
            let x = random_direction(&mut rng, n);
            let v = random_direction(&mut rng, n);
            if let Some(k) = target.sectional_curvature(y, &x, &v) {
                sup = sup.max(k);
            }
        }
    }
    Ok(sup)
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm2: f64 = v.iter().map(|t| t * t).sum();
        if norm2 > 1e-6 && norm2 <= 1.0 {
            let norm = norm2.sqrt();
            return v.iter().map(|t| t / norm).collect();
        }
    }
}

/// (1,2)-tensor families on the codomain chart.
#[derive(Debug, Clone)]
pub enum TensorField {
    Zero,
    /// Single component value at (i; j, k), mirrored into (i; k, j).
    ConstantComponent { i: usize, j: usize, k: usize, value: f64 },
    /// Same slot pattern with value amplitude * sin(y_axis).
    SineComponent { i: usize, j: usize, k: usize, amplitude: f64, axis: usize },
}

impl TensorField {
    pub fn is_zero(&self) -> bool {
        matches!(self, TensorField::Zero)
    }

    /// Components T^i_{jk}(y) into out[i][(j, k)].
    pub fn components(&self, y: &[f64], n: usize, out: &mut [DMatrix<f64>]) {
        for m in out.iter_mut().take(n) {
            m.fill(0.0);
        }
        match self {
            TensorField::Zero => {}
            TensorField::ConstantComponent { i, j, k, value } => {
                out[*i][(*j, *k)] = *value;
                out[*i][(*k, *j)] = *value;
            }
            TensorField::SineComponent { i, j, k, amplitude, axis } => {
                let v = amplitude * y[*axis].sin();
                out[*i][(*j, *k)] = v;
                out[*i][(*k, *j)] = v;
            }
        }
    }

    /// Plain coordinate derivative d/dy_l of the components.
    fn coordinate_derivative(&self, y: &[f64], l: usize, n: usize, out: &mut [DMatrix<f64>]) {
        for m in out.iter_mut().take(n) {
            m.fill(0.0);
        }
        match self {
            TensorField::Zero | TensorField::ConstantComponent { .. } => {}
            TensorField::SineComponent { i, j, k, amplitude, axis } => {
                if l == *axis {
                    let v = amplitude * y[*axis].cos();
                    out[*i][(*j, *k)] = v;
                    out[*i][(*k, *j)] = v;
                }
            }
        }
    }

    /// Covariant derivative (nabla T)^i_{jk;l} with the chart connection:
    /// dT + Gamma^i_{lp} T^p_{jk} - Gamma^p_{lj} T^i_{pk} - Gamma^p_{lk} T^i_{jp}.
    /// Indexed out[l][i][(j, k)].
    pub fn covariant_derivative(
        &self,
        target: &TargetModel,
        y: &[f64],
    ) -> Vec<Vec<DMatrix<f64>>> {
        let n = target.dim;
        let gamma = target.christoffel_alloc(y);
        let mut t = vec![DMatrix::zeros(n, n); n];
        self.components(y, n, &mut t);
        let mut out = vec![vec![DMatrix::zeros(n, n); n]; n];
        let mut dt = vec![DMatrix::zeros(n, n); n];
        for l in 0..n {
            self.coordinate_derivative(y, l, n, &mut dt);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let mut v = dt[i][(j, k)];
                        for p in 0..n {
                            v += gamma[i][(l, p)] * t[p][(j, k)]
                                - gamma[p][(l, j)] * t[i][(p, k)]
                                - gamma[p][(l, k)] * t[i][(j, p)];
                        }
                        out[l][i][(j, k)] = v;
                    }
                }
            }
        }
        out
    }
}

/// Measured sup norms (operator norm against unit vectors of h) of T and of
/// its covariant derivative over the sampled region: coordinate directions
/// plus 256 seeded pseudo-random unit tuples per point.
pub fn tensor_norms(
    target: &TargetModel,
    tensor: &TensorField,
    points: &[Vec<f64>],
    seed: u64,
) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::invariant("empty region for tensor norms"));
    }
    if tensor.is_zero() {
        return Ok((0.0, 0.0));
    }
    let n = target.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e45);
    let mut t = vec![DMatrix::zeros(n, n); n];
    let mut sup_t = 0.0f64;
    let mut sup_dt = 0.0f64;
    for y in points {
        let lam = target.lambda(y);
        tensor.components(y, n, &mut t);
        let dt = tensor.covariant_derivative(target, y);
        // |T(X,Y)|_h with h-unit X, Y: for conformal h the h-unit vector is a
        // chart-unit vector divided by lambda, and |W|_h = lambda * |W|
        let eval_t = |x: &[f64], v: &[f64]| -> f64 {
            let mut norm2 = 0.0;
            for i in 0..n {
                let mut w = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        w += t[i][(j, k)] * x[j] * v[k];
                    }
                }
                norm2 += w * w;
            }
            norm2.sqrt() / lam
        };
        let eval_dt = |z: &[f64], x: &[f64], v: &[f64]| -> f64 {
            let mut norm2 = 0.0;
            for i in 0..n {
                let mut w = 0.0;
                for l in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            w += dt[l][i][(j, k)] * z[l] * x[j] * v[k];
                        }
                    }
                }
                norm2 += w * w;
            }
            norm2.sqrt() / (lam * lam)
        };
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                e
            })
            .collect();
        for x in &axes {
            for v in &axes {
                sup_t = sup_t.max(eval_t(x, v));
                for z in &axes {
                    sup_dt = sup_dt.max(eval_dt(z, x, v));
                }
            }
        }
        for _ in 0..256 {
            let x = random_direction(&mut rng, n);
            let v = random_direction(&mut rng, n);
            sup_t = sup_t.max(eval_t(&x, &v));
            let z = random_direction(&mut rng, n);
            sup_dt = sup_dt.max(eval_dt(&z, &x, &v));
        }
    }
    Ok((sup_t, sup_dt))
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Shape of the certification function f on the codomain chart.
#[derive(Clone)]
pub enum WitnessShape {
    /// cos of the geodesic distance from the origin (round-sphere chart).
    CosDistance,
    /// cap - |y|^2 / 2.
    QuadraticCap { cap: f64 },
    /// sum_k coeffs[k] * |y|^(2k).
    RadialPolynomial { coeffs: Vec<f64> },
}

impl std::fmt::Debug for WitnessShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WitnessShape::CosDistance => write!(f, "CosDistance"),
            WitnessShape::QuadraticCap { cap } => write!(f, "QuadraticCap(cap={cap})"),
            WitnessShape::RadialPolynomial { coeffs } => {
                write!(f, "RadialPolynomial({coeffs:?})")
            }
        }
    }
}

/// Certification witness: f over the region, the convex sublevel function
/// carving the region out, and the geodesic radius of that region.
#[derive(Clone)]
pub struct Witness {
    pub shape: WitnessShape,
    /// Geodesic radius of the region around the chart origin.
    pub ball_radius: f64,
    /// Override for the sublevel function; default is squared geodesic
    /// distance from the origin with threshold ball_radius^2.
    pub f_star: Option<ScalarFn>,
    pub sublevel_threshold: Option<f64>,
}

impl std::fmt::Debug for Witness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Witness")
            .field("shape", &self.shape)
            .field("ball_radius", &self.ball_radius)
            .field("custom_f_star", &self.f_star.is_some())
            .finish()
    }
}

impl Witness {
    pub fn new(shape: WitnessShape, ball_radius: f64) -> Result<Self> {
        if !(ball_radius > 0.0) {
            return Err(Error::invariant("region radius must be positive"));
        }
        Ok(Witness { shape, ball_radius, f_star: None, sublevel_threshold: None })
    }

    pub fn with_f_star(mut self, f_star: ScalarFn, threshold: f64) -> Self {
        self.f_star = Some(f_star);
        self.sublevel_threshold = Some(threshold);
        self
    }

    pub fn f(&self, y: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|t| t * t).sum();
        match &self.shape {
            WitnessShape::CosDistance => (1.0 - r2) / (1.0 + r2),
            WitnessShape::QuadraticCap { cap } => cap - r2 / 2.0,
            WitnessShape::RadialPolynomial { coeffs } => {
                let mut acc = 0.0;
                let mut pow = 1.0;
                for c in coeffs {
                    acc += c * pow;
                    pow *= r2;
                }
                acc
            }
        }
    }

    /// Chart-coordinate gradient d f / d y_i.
    pub fn grad(&self, y: &[f64], out: &mut [f64]) {
        let r2: f64 = y.iter().map(|t| t * t).sum();
        match &self.shape {
            WitnessShape::CosDistance => {
                let c = -4.0 / ((1.0 + r2) * (1.0 + r2));
                for (o, t) in out.iter_mut().zip(y) {
                    *o = c * t;
                }
            }
            WitnessShape::QuadraticCap { .. } => {
                for (o, t) in out.iter_mut().zip(y) {
                    *o = -t;
                }
            }
            WitnessShape::RadialPolynomial { coeffs } => {
                // d/dy_i sum c_k r^{2k} = (sum 2k c_k r^{2(k-1)}) y_i
                let mut s = 0.0;
                for (k, c) in coeffs.iter().enumerate().skip(1) {
                    s += 2.0 * k as f64 * c * r2.powi(k as i32 - 1);
                }
                for (o, t) in out.iter_mut().zip(y) {
                    *o = s * t;
                }
            }
        }
    }

    /// Norm of the gradient in the h metric.
    pub fn grad_norm_h(&self, target: &TargetModel, y: &[f64]) -> f64 {
        let mut g = vec![0.0; target.dim];
        self.grad(y, &mut g);
        let flat: f64 = g.iter().map(|t| t * t).sum::<f64>().sqrt();
        flat / target.lambda(y)
    }

    /// Covariant Hessian: centered differences of the analytic gradient with
    /// the Christoffel correction, symmetrized.
    pub fn hessian(&self, target: &TargetModel, y: &[f64]) -> DMatrix<f64> {
        let n = target.dim;
        let mut hess = DMatrix::zeros(n, n);
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for j in 0..n {
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[j] += HESS_STEP;
            ym[j] -= HESS_STEP;
            self.grad(&yp, &mut gp);
            self.grad(&ym, &mut gm);
            for i in 0..n {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * HESS_STEP);
            }
        }
        let gamma = target.christoffel_alloc(y);
        let mut g0 = vec![0.0; n];
        self.grad(y, &mut g0);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    hess[(i, j)] -= gamma[k][(i, j)] * g0[k];
                }
            }
        }
        (&hess + hess.transpose()) * 0.5
    }

    pub fn f_star_value(&self, target: &TargetModel, y: &[f64]) -> f64 {
        match &self.f_star {
            Some(f) => f(y),
            None => {
                let d = target.distance_from_origin(y);
                d * d
            }
        }
    }

    pub fn sublevel(&self) -> f64 {
        match self.sublevel_threshold {
            Some(r) => r,
            None => self.ball_radius * self.ball_radius,
        }
    }

    /// Covariant Hessian of the sublevel function by direct second
    /// differences plus the Christoffel correction.
    pub fn f_star_hessian(&self, target: &TargetModel, y: &[f64]) -> DMatrix<f64> {
        let n = target.dim;
        let fs = |p: &[f64]| self.f_star_value(target, p);
        let f0 = fs(y);
        let mut hess = DMatrix::zeros(n, n);
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[i] += HESS_STEP;
            ym[i] -= HESS_STEP;
            let fp = fs(&yp);
            let fm = fs(&ym);
            grad[i] = (fp - fm) / (2.0 * HESS_STEP);
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (HESS_STEP * HESS_STEP);
            for j in (i + 1)..n {
                let mut q = y.to_vec();
                q[i] += HESS_STEP;
                q[j] += HESS_STEP;
                let fpp = fs(&q);
                q[j] -= 2.0 * HESS_STEP;
                let fpm = fs(&q);
                q[i] -= 2.0 * HESS_STEP;
                let fmm = fs(&q);
                q[j] += 2.0 * HESS_STEP;
                let fmp = fs(&q);
                let v = (fpp - fpm - fmp + fmm) / (4.0 * HESS_STEP * HESS_STEP);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let gamma = target.christoffel_alloc(y);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    hess[(i, j)] -= gamma[k][(i, j)] * grad[k];
                }
            }
        }
        hess
    }
}

/// Deterministic sample cloud for a geodesic ball about the chart origin:
/// the center, the 2n axis points at the exact boundary radius, and seeded
/// interior points.
pub fn sample_ball(
    target: &TargetModel,
    radius: f64,
    interior: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(radius > 0.0) {
        return Err(Error::invariant("region radius must be positive"));
    }
    if target.family == TargetFamily::Sphere && radius >= std::f64::consts::PI {
        return Err(Error::invariant("sphere region must stay inside one chart"));
    }
    let n = target.dim;
    let mut pts = Vec::with_capacity(2 * n + interior + 1);
    pts.push(vec![0.0; n]);
    let boundary = target.chart_radius(radius);
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut p = vec![0.0; n];
            p[i] = s * boundary;
            pts.push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba11);
    for _ in 0..interior {
        let dir = random_direction(&mut rng, n);
        let d: f64 = rng.gen_range(0.0..radius);
        let c = target.chart_radius(d);
        pts.push(dir.iter().map(|t| t * c).collect());
    }
    Ok(pts)
}

/// One certification verdict with measured quantities and margins.
#[derive(Debug, Clone)]
pub struct CertReport {
    pub pass: bool,
    pub gate_concavity: bool,
    pub gate_positivity: bool,
    pub gate_gradient: bool,
    pub gate_q: bool,
    /// Worst relative eigenvalue of the gate matrix over the samples.
    pub margin_concavity: f64,
    pub margin_q: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub grad_f_sup: f64,
    pub t_norm: f64,
    pub grad_t_norm: f64,
    pub kappa: f64,
    pub q: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Largest Q the matrix gate would accept and smallest Q the gradient
    /// gate demands; the pair diagnoses jointly infeasible regions.
    pub q_max_feasible: f64,
    pub q_min_required: f64,
    pub jointly_infeasible: bool,
    pub violations: Vec<usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CertInputs<'a> {
    pub tensor: &'a TensorField,
    pub q: f64,
    pub source_dim: usize,
    pub eps_pairs: &'a [(f64, f64)],
    pub seed: u64,
}

pub fn default_eps_grid() -> Vec<(f64, f64)> {
    let vals = [1e-2, 5e-2, 1e-1];
    let mut out = Vec::with_capacity(9);
    for &a in &vals {
        for &b in &vals {
            out.push((a, b));
        }
    }
    out
}

/// Evaluates the four certification gates over the samples, sweeping the
/// supplied (eps1, eps2) pairs and keeping the best feasible one (largest
/// matrix-gate margin, ties to the smaller eps1 then eps2).
pub fn check_condition_c(
    target: &TargetModel,
    witness: &Witness,
    samples: &[Vec<f64>],
    inputs: &CertInputs,
) -> Result<CertReport> {
    if samples.is_empty() {
        return Err(Error::invariant("certification sample set is empty"));
    }
    if inputs.eps_pairs.is_empty() {
        return Err(Error::invariant("certification needs at least one eps pair"));
    }
    for &(e1, e2) in inputs.eps_pairs {
        if !(e1 > 0.0) {
            return Err(Error::invariant("eps1 must be positive"));
        }
        if !(e2 > 0.0 && e2 < 1.0) {
            return Err(Error::invariant("eps2 must lie in (0, 1)"));
        }
    }
    let kappa = sectional_curvature_sup(target, samples, inputs.seed)?;
    let (t_norm, grad_t_norm) = tensor_norms(target, inputs.tensor, samples, inputs.seed)?;
    let s0 = inputs.source_dim.min(target.dim) as f64;
    let curvature_coeff = (s0 - 1.0) / s0 * kappa;

    // f statistics and per-sample pieces, shared across the eps sweep
    let mut f_vals = Vec::with_capacity(samples.len());
    let mut base_eigs = Vec::with_capacity(samples.len());
    let mut grad_sup = 0.0f64;
    for y in samples {
        let f = witness.f(y);
        f_vals.push(f);
        grad_sup = grad_sup.max(witness.grad_norm_h(target, y));
        let h = target.metric(y);
        let neg_hess = -witness.hessian(target, y);
        // relative eigenvalue of -Hess f against h; conformal h makes the
        // pencil well posed everywhere on the chart
        base_eigs.push(linalg::min_relative_eigenvalue(&neg_hess, &h)?);
    }
    let f_min = f_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let f_max = f_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gate_positivity = f_min > 0.0;

    let mut best: Option<(f64, f64, f64, f64)> = None; // margin, e1, e2, coeff
    for &(e1, e2) in inputs.eps_pairs {
        let coeff = curvature_coeff
            + grad_t_norm * grad_t_norm / (4.0 * e1)
            + t_norm * t_norm / e2;
        let mut margin = f64::INFINITY;
        for (f, base) in f_vals.iter().zip(&base_eigs) {
            margin = margin.min(base - f * coeff - inputs.q);
        }
        let candidate = (margin, e1, e2, coeff);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                if margin > cur.0
                    || (margin == cur.0 && (e1 < cur.1 || (e1 == cur.1 && e2 < cur.2)))
                {
                    candidate
                } else {
                    cur
                }
            }
        });
    }
    let (margin_concavity, eps1, eps2, coeff) = best.unwrap();
    let gate_concavity = margin_concavity >= GATE_SLACK && gate_positivity;
    let q_min_required = if f_min > 0.0 { grad_sup * grad_sup / (2.0 * f_min) } else { f64::INFINITY };
    let margin_q = inputs.q - q_min_required;
    let gate_q = margin_q > 0.0;
    let gate_gradient = grad_sup.is_finite();
    let mut q_max_feasible = f64::INFINITY;
    for (f, base) in f_vals.iter().zip(&base_eigs) {
        q_max_feasible = q_max_feasible.min(base - f * coeff);
    }
    let jointly_infeasible = q_min_required >= q_max_feasible;

    let mut violations = Vec::new();
    for (idx, (f, base)) in f_vals.iter().zip(&base_eigs).enumerate() {
        let bad_sign = *f <= 0.0;
        let bad_gate = base - f * coeff - inputs.q < GATE_SLACK;
        if bad_sign || bad_gate {
            violations.push(idx);
            if violations.len() >= 8 {
                break;
            }
        }
    }

    let notes = vec![
        "hypothesis label (B) is certified as condition (C)".to_string(),
        "bounds read as f <= m2 and |grad f| <= m3".to_string(),
        format!("eps pair selected from {} candidates", inputs.eps_pairs.len()),
    ];

    let pass = gate_concavity && gate_positivity && gate_gradient && gate_q;
    Ok(CertReport {
        pass,
        gate_concavity,
        gate_positivity,
        gate_gradient,
        gate_q,
        margin_concavity,
        margin_q,
        f_min,
        f_max,
        grad_f_sup: grad_sup,
        t_norm,
        grad_t_norm,
        kappa,
        q: inputs.q,
        eps1,
        eps2,
        q_max_feasible,
        q_min_required,
        jointly_infeasible,
        violations,
        notes,
    })
}

#[derive(Debug, Clone)]
pub struct RegularBallReport {
    pub pass: bool,
    pub nonnegative: bool,
    pub convex: bool,
    pub convexity_margin: f64,
    pub sublevel_ok: bool,
    pub condition: CertReport,
}

/// Verifies the sublevel structure of the region: f* nonnegative, convex to
/// the gate slack, every sample inside the declared sublevel set, plus a
/// passing condition check.
pub fn check_generalized_regular_ball(
    target: &TargetModel,
    witness: &Witness,
    samples: &[Vec<f64>],
    inputs: &CertInputs,
) -> Result<RegularBallReport> {
    let condition = check_condition_c(target, witness, samples, inputs)?;
    let threshold = witness.sublevel();
    let mut nonnegative = true;
    let mut sublevel_ok = true;
    let mut convexity_margin = f64::INFINITY;
    for y in samples {
        let v = witness.f_star_value(target, y);
        if v < 0.0 {
            nonnegative = false;
        }
        if v > threshold + 1e-9 {
            sublevel_ok = false;
        }
        let h = target.metric(y);
        let hess = witness.f_star_hessian(target, y);
        convexity_margin = convexity_margin.min(linalg::min_relative_eigenvalue(&hess, &h)?);
    }
    let convex = convexity_margin >= GATE_SLACK;
    let pass = nonnegative && convex && sublevel_ok && condition.pass;
    Ok(RegularBallReport { pass, nonnegative, convex, convexity_margin, sublevel_ok, condition })
}

/// Which smallness threshold applies to the measured tensor norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallnessGate {
    /// Forward estimates: threshold 2Q/m3.
    Forward,
    /// Backward estimates: threshold 2Q/m3 - m3/m1.
    Backward,
}

/// Pass iff norm_t < threshold; m3 = 0 passes vacuously with +inf.
pub fn t_smallness_gate(
    q: f64,
    m1: f64,
    m3: f64,
    norm_t: f64,
    which: SmallnessGate,
) -> (bool, f64) {
    if m3 == 0.0 {
        return (true, f64::INFINITY);
    }
    let threshold = match which {
        SmallnessGate::Forward => 2.0 * q / m3,
        SmallnessGate::Backward => 2.0 * q / m3 - m3 / m1,
    };
    (norm_t < threshold, threshold)
}
