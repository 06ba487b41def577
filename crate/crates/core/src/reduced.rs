use crate::domain::DomainChart;
use crate::error::{Error, Result};

/// Minimum number of curve segments.
pub const KNOT_MIN: usize = 8;

/// Descent stops when the knot gradient max-norm drops below this.
pub const GRAD_TOL: f64 = 1e-8;

const MAX_ITERS: usize = 50_000;
const FD_STEP: f64 = 1e-5;

/// Space-time curve on [0, tau_bar] sampled at K+1 uniform tau-knots with
/// pinned endpoints; knot coordinates live in the universal cover of the
/// chart so segments never wrap.
#[derive(Debug, Clone)]
pub struct SpaceTimeCurve {
    pub knots: Vec<Vec<f64>>,
    pub tau_bar: f64,
}

impl SpaceTimeCurve {
    pub fn new(knots: Vec<Vec<f64>>, tau_bar: f64) -> Result<Self> {
        if !(tau_bar > 0.0) {
            return Err(Error::invariant("curve horizon must be positive"));
        }
        if knots.len() < KNOT_MIN + 1 {
            return Err(Error::invariant("curve needs at least 8 segments"));
        }
        Ok(SpaceTimeCurve { knots, tau_bar })
    }

    pub fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn tau_at(&self, k: usize) -> f64 {
        self.tau_bar * k as f64 / self.segments() as f64
    }

    /// Constant-speed segment from the chart base to x, linear in tau; the
    /// displacement uses the minimal periodic representative.
    pub fn straight(chart: &DomainChart, x: &[f64], tau_bar: f64, segments: usize) -> Result<Self> {
        let m = chart.dim();
        let mut delta = vec![0.0; m];
        if chart.is_periodic() {
            chart.grid.wrap_diff(&chart.base, x, &mut delta);
        } else {
            for a in 0..m {
                delta[a] = x[a] - chart.base[a];
            }
        }
        let knots = (0..=segments)
            .map(|k| {
                let t = k as f64 / segments as f64;
                (0..m).map(|a| chart.base[a] + t * delta[a]).collect()
            })
            .collect();
        SpaceTimeCurve::new(knots, tau_bar)
    }
}

/// Discrete space-time length: the substitution s = 2 sqrt(tau) turns the
/// kinetic part into a Dirichlet sum sum |dgamma|^2_g / ds, and the scalar
/// part integrates sqrt(tau) H exactly per segment for constant H.
pub fn l_length(chart: &DomainChart, curve: &SpaceTimeCurve) -> Result<f64> {
    let m = chart.dim();
    let segs = curve.segments();
    let mut total = 0.0;
    for k in 0..segs {
        let ta = curve.tau_at(k);
        let tb = curve.tau_at(k + 1);
        let tm = 0.5 * (ta + tb);
        let ds = 2.0 * (tb.sqrt() - ta.sqrt());
        let a = &curve.knots[k];
        let b = &curve.knots[k + 1];
        let mid: Vec<f64> = (0..m).map(|i| 0.5 * (a[i] + b[i])).collect();
        let g = chart.metric(&mid, tm);
        let mut quad = 0.0;
        for i in 0..m {
            for j in 0..m {
                quad += g[(i, j)] * (b[i] - a[i]) * (b[j] - a[j]);
            }
        }
        total += quad / ds;
        let h = chart.trace_h(&mid, tm)?;
        if h != 0.0 {
            total += 2.0 / 3.0 * (tb.powf(1.5) - ta.powf(1.5)) * h;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub l: f64,
    pub curve: SpaceTimeCurve,
    pub converged: bool,
    pub iterations: usize,
    /// Max g-norm of the discrete geodesic-equation defect over interior
    /// knots; diagnostic only.
    pub residual: f64,
}

fn knot_gradient(chart: &DomainChart, curve: &SpaceTimeCurve, grad: &mut [f64]) -> Result<()> {
    let m = chart.dim();
    let segs = curve.segments();
    let uniform = chart.is_spatially_uniform();
    grad.fill(0.0);
    for k in 0..segs {
        let ta = curve.tau_at(k);
        let tb = curve.tau_at(k + 1);
        let tm = 0.5 * (ta + tb);
        let ds = 2.0 * (tb.sqrt() - ta.sqrt());
        let a = &curve.knots[k];
        let b = &curve.knots[k + 1];
        let mid: Vec<f64> = (0..m).map(|i| 0.5 * (a[i] + b[i])).collect();
        let g = chart.metric(&mid, tm);
        // d/dknot of |b - a|^2_g(mid) / ds: endpoint terms, then the metric
        // and scalar variations through the midpoint (factor 1/2)
        for i in 0..m {
            let mut gi = 0.0;
            for j in 0..m {
                gi += g[(i, j)] * (b[j] - a[j]);
            }
            let lead = 2.0 * gi / ds;
            if k >= 1 {
                grad[(k - 1) * m + i] -= lead;
            }
            if k + 1 <= segs - 1 {
                grad[k * m + i] += lead;
            }
        }
        if !uniform {
            let hw = 2.0 / 3.0 * (tb.powf(1.5) - ta.powf(1.5));
            for axis in 0..m {
                let mut pp = mid.clone();
                let mut pm = mid.clone();
                pp[axis] += FD_STEP;
                pm[axis] -= FD_STEP;
                let gp = chart.metric(&pp, tm);
                let gm = chart.metric(&pm, tm);
                let mut dquad = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        dquad += (gp[(i, j)] - gm[(i, j)]) * (b[i] - a[i]) * (b[j] - a[j]);
                    }
                }
                dquad /= 2.0 * FD_STEP;
                let dh = (chart.trace_h(&pp, tm)? - chart.trace_h(&pm, tm)?) / (2.0 * FD_STEP);
                let contribution = 0.5 * (dquad / ds + hw * dh);
                if k >= 1 {
                    grad[(k - 1) * m + axis] += contribution;
                }
                if k + 1 <= segs - 1 {
                    grad[k * m + axis] += contribution;
                }
            }
        }
    }
    Ok(())
}

fn geodesic_residual(chart: &DomainChart, curve: &SpaceTimeCurve) -> Result<f64> {
    let m = chart.dim();
    let segs = curve.segments();
    let dtau = curve.tau_bar / segs as f64;
    let mut worst = 0.0f64;
    for k in 1..segs {
        let tau = curve.tau_at(k);
        let pos = &curve.knots[k];
        let prev = &curve.knots[k - 1];
        let next = &curve.knots[k + 1];
        let mut x = vec![0.0; m];
        let mut accel = vec![0.0; m];
        for i in 0..m {
            x[i] = (next[i] - prev[i]) / (2.0 * dtau);
            accel[i] = (next[i] - 2.0 * pos[i] + prev[i]) / (dtau * dtau);
        }
        if !chart.christoffel_is_zero() {
            let gamma = chart.christoffel(pos, tau)?;
            for c in 0..m {
                let mut corr = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        corr += gamma[c][(a, b)] * x[a] * x[b];
                    }
                }
                accel[c] += corr;
            }
        }
        let rates = chart.metric_rates(pos, tau)?;
        let g = chart.metric(pos, tau);
        let ginv = chart.inverse_metric(pos, tau)?;
        let h = chart.h_tensor(pos, tau);
        let mut res = vec![0.0; m];
        for c in 0..m {
            let mut grad_h_up = 0.0;
            let mut h_of_x = 0.0;
            for b in 0..m {
                grad_h_up += ginv[(c, b)] * rates.grad_trace_h[b];
                let mut hx = 0.0;
                for d in 0..m {
                    hx += h[(b, d)] * x[d];
                }
                h_of_x += ginv[(c, b)] * hx;
            }
            res[c] = accel[c] - 0.5 * grad_h_up + x[c] / (2.0 * tau) + 2.0 * h_of_x;
        }
        let mut norm2 = 0.0;
        for i in 0..m {
            for j in 0..m {
                norm2 += g[(i, j)] * res[i] * res[j];
            }
        }
        worst = worst.max(norm2.max(0.0).sqrt());
    }
    Ok(worst)
}

/// Finds the curve of least discrete length from the chart base to x over
/// [0, tau_bar] by first-order descent with a backtracking line search.
pub fn minimize_l(
    chart: &DomainChart,
    x: &[f64],
    tau_bar: f64,
    segments: usize,
) -> Result<MinimizeOutcome> {
    if !(tau_bar > 0.0) {
        return Err(Error::invariant("horizon must be positive"));
    }
    let m = chart.dim();
    if x.len() != m {
        return Err(Error::invariant("query point must match chart dimension"));
    }
    let mut curve = SpaceTimeCurve::straight(chart, x, tau_bar, segments)?;
    let free = (segments - 1) * m;
    let mut grad = vec![0.0; free];
    let mut value = l_length(chart, &curve)?;
    // Jacobi scaling by the kinetic diagonal 2(1/ds_{k-1} + 1/ds_k); without
    // it the segment weights near tau = 0 stall the descent
    let mut precond = vec![1.0; segments - 1];
    for k in 1..segments {
        let tau = |j: usize| curve.tau_at(j);
        let ds_prev = 2.0 * (tau(k).sqrt() - tau(k - 1).sqrt());
        let ds_next = 2.0 * (tau(k + 1).sqrt() - tau(k).sqrt());
        precond[k - 1] = 2.0 * (1.0 / ds_prev + 1.0 / ds_next);
    }
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITERS {
        iterations = it;
        knot_gradient(chart, &curve, &mut grad)?;
        let gmax = grad.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if gmax < GRAD_TOL {
            converged = true;
            break;
        }
        let mut slope = 0.0;
        for k in 1..segments {
            for i in 0..m {
                let g = grad[(k - 1) * m + i];
                slope += g * g / precond[k - 1];
            }
        }
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = curve.clone();
            for k in 1..segments {
                for i in 0..m {
                    trial.knots[k][i] -= t * grad[(k - 1) * m + i] / precond[k - 1];
                }
            }
            let tv = l_length(chart, &trial)?;
            if tv <= value - 1e-4 * t * slope {
                curve = trial;
                value = tv;
                step = (t * 2.0).min(1.0);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let residual = geodesic_residual(chart, &curve)?;
    Ok(MinimizeOutcome { l: value, curve, converged, iterations, residual })
}

/// L / (2 sqrt(tau_bar)).
pub fn reduced_distance(
    chart: &DomainChart,
    x: &[f64],
    tau_bar: f64,
    segments: usize,
) -> Result<(f64, MinimizeOutcome)> {
    let out = minimize_l(chart, x, tau_bar, segments)?;
    let ell = out.l / (2.0 * tau_bar.sqrt());
    Ok((ell, out))
}

/// Parabolic distance sqrt(4 tau_bar ell).
pub fn d_frak(chart: &DomainChart, x: &[f64], tau_bar: f64, segments: usize) -> Result<f64> {
    let (ell, _) = reduced_distance(chart, x, tau_bar, segments)?;
    Ok((4.0 * tau_bar * ell).max(0.0).sqrt())
}

/// On a static chart the minimizer is the spatial geodesic traversed
/// linearly in s = 2 sqrt(tau), so the parabolic distance collapses to the
/// ordinary one.
pub fn d_frak_static(chart: &DomainChart, x: &[f64]) -> Option<f64> {
    if chart.is_static() {
        Some(chart.distance(x, 0.0))
    } else {
        None
    }
}

/// Membership in the parabolic region {d_frak <= r, 0 <= tau <= lambda}.
pub fn parabolic_region_contains(
    chart: &DomainChart,
    x: &[f64],
    tau: f64,
    r: f64,
    lambda: f64,
    segments: usize,
) -> Result<bool> {
    if tau < 0.0 || tau > lambda {
        return Ok(false);
    }
    if tau == 0.0 {
        let mut d = vec![0.0; chart.dim()];
        if chart.is_periodic() {
            chart.grid.wrap_diff(&chart.base, x, &mut d);
        } else {
            for (o, (a, b)) in d.iter_mut().zip(x.iter().zip(&chart.base)) {
                *o = a - b;
            }
        }
        let coincides = d.iter().all(|t| t.abs() < 1e-14);
        return Ok(coincides || chart.distance(x, 0.0) <= r);
    }
    let dfrak = match d_frak_static(chart, x) {
        Some(v) => v,
        None => d_frak(chart, x, tau, segments)?,
    };
    Ok(dfrak <= r)
}

/// Coupling scalars of the time-dependent geometry at one point, with the
/// chart's own drift field.
#[derive(Debug, Clone)]
pub struct CouplingReport {
    pub d_v: f64,
    pub h_v: Option<f64>,
    pub r_v: f64,
    pub trace_h: f64,
    pub v_norm_sq: f64,
}

pub fn coupling_quantities(chart: &DomainChart, pos: &[f64], tau: f64) -> Result<CouplingReport> {
    let m = chart.dim();
    let rates = chart.metric_rates(pos, tau)?;
    let sample = chart.curvature_sample(pos, tau)?;
    let h = chart.h_tensor(pos, tau);
    let g = chart.metric(pos, tau);
    let v = chart.v_at(pos);
    let quad = |mat: &nalgebra::DMatrix<f64>| -> f64 {
        let mut acc = 0.0;
        for a in 0..m {
            for b in 0..m {
                acc += mat[(a, b)] * v[a] * v[b];
            }
        }
        acc
    };
    let ric_vv = quad(&sample.ricci);
    let h_vv = quad(&h);
    let v_norm_sq = quad(&g);
    let mut div_h_v = 0.0;
    let mut grad_h_v = 0.0;
    for a in 0..m {
        div_h_v += rates.div_h[a] * v[a];
        grad_h_v += rates.grad_trace_h[a] * v[a];
    }
    let d_v = -rates.dtrace_h_dtau - rates.laplace_trace_h - 2.0 * rates.h_norm_sq
        + 4.0 * div_h_v
        - 2.0 * grad_h_v
        + 2.0 * ric_vv
        - 2.0 * h_vv;
    let h_v = if tau > 0.0 {
        Some(-rates.dtrace_h_dtau - rates.trace_h / tau - 2.0 * grad_h_v + 2.0 * h_vv)
    } else {
        None
    };
    let r_v = ric_vv - h_vv;
    Ok(CouplingReport { d_v, h_v, r_v, trace_h: rates.trace_h, v_norm_sq })
}

/// The first coupling scalar with its quadratic part minimized over unit
/// vectors: valid when the gradient pieces vanish (uniform families), where
/// D(V) = c0 + 2 (Ric - h)(V, V).
pub fn coupling_d_unit_infimum(chart: &DomainChart, pos: &[f64], tau: f64) -> Result<f64> {
    let rates = chart.metric_rates(pos, tau)?;
    let sample = chart.curvature_sample(pos, tau)?;
    let h = chart.h_tensor(pos, tau);
    let g = chart.metric(pos, tau);
    let c0 = -rates.dtrace_h_dtau - rates.laplace_trace_h - 2.0 * rates.h_norm_sq;
    let form = &sample.ricci - &h;
    let lam = crate::linalg::min_relative_eigenvalue(&form, &g)?;
    Ok(c0 + 2.0 * lam)
}

/// Hypothesis margins at one point: d_v >= 0, d_v >= -2 K (trace_h +
/// |V|^2), and the positive-time ratio check h_v >= -trace_h / tau.
#[derive(Debug, Clone)]
pub struct CouplingHypotheses {
    pub d_nonneg: bool,
    pub d_margin: f64,
    pub d_k_bound: bool,
    pub d_k_margin: f64,
    pub h_ratio: Option<bool>,
    pub h_ratio_margin: Option<f64>,
}

pub fn coupling_hypotheses(
    chart: &DomainChart,
    pos: &[f64],
    tau: f64,
    k_const: f64,
) -> Result<CouplingHypotheses> {
    if k_const < 0.0 {
        return Err(Error::invariant("hypothesis constant must be nonnegative"));
    }
    let rep = coupling_quantities(chart, pos, tau)?;
    let d_margin = rep.d_v;
    let d_k_margin = rep.d_v + 2.0 * k_const * (rep.trace_h + rep.v_norm_sq);
    let (h_ratio, h_ratio_margin) = match rep.h_v {
        Some(hv) => {
            let margin = hv + rep.trace_h / tau;
            (Some(margin >= -1e-12), Some(margin))
        }
        None => (None, None),
    };
    Ok(CouplingHypotheses {
        d_nonneg: d_margin >= -1e-12,
        d_margin,
        d_k_bound: d_k_margin >= -1e-12,
        d_k_margin,
        h_ratio,
        h_ratio_margin,
    })
}
