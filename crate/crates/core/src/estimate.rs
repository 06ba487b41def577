use crate::error::{Error, Result};
use crate::flow::FrameRow;
use std::fmt;
use std::str::FromStr;

/// Everything the bound evaluators consume: measured geometry on the
/// hypothesis side, the witness range and gradient caps, the coupling
/// strengths, sweep-selected epsilons, the window dimensions, and the
/// certified bump-profile constants.
#[derive(Debug, Clone)]
pub struct ConstantsInputs {
    /// Domain dimension.
    pub m: usize,
    /// Magnitude of the drift-Ricci lower bound (operator bounded below by
    /// -a times the metric).
    pub a: f64,
    /// Backward-direction curvature constant.
    pub k: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub q: f64,
    pub norm_t: f64,
    pub norm_grad_t: f64,
    /// Sup norm of the drift field.
    pub v_sup: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Backward slack parameter; picked automatically when absent.
    pub eps: Option<f64>,
    pub r: f64,
    pub lambda: f64,
    pub c0: f64,
    pub c_half: f64,
    pub c_three_quarters: f64,
    pub d_temporal: f64,
    /// Drift comparison value at the ball boundary.
    pub v_at_r: f64,
    pub sup_grad_u0: f64,
    /// Use the tighter 6-epsilon denominator in the backward bound.
    pub strict_proof: bool,
}

impl Default for ConstantsInputs {
    fn default() -> Self {
        ConstantsInputs {
            m: 2,
            a: 0.0,
            k: 0.0,
            m1: 1.0,
            m2: 1.0,
            m3: 0.0,
            q: 0.5,
            norm_t: 0.0,
            norm_grad_t: 0.0,
            v_sup: 0.0,
            eps1: 0.01,
            eps2: 0.01,
            eps: None,
            r: 4.0,
            lambda: 1.0,
            c0: 4.0,
            c_half: 2.0,
            c_three_quarters: 3.0,
            d_temporal: 2.0,
            v_at_r: 0.0,
            sup_grad_u0: 0.0,
            strict_proof: false,
        }
    }
}

/// Derived constants and the evaluated closed-form bounds; a bound absent
/// means its feasibility gate failed, with the reason in `notes`.
#[derive(Debug, Clone)]
pub struct ConstantsReport {
    pub inputs: ConstantsInputs,
    pub k1: f64,
    pub k2: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c1_back: f64,
    pub c2_back: f64,
    pub eps3: f64,
    pub eps_used: f64,
    /// Gradient bound over the half ball at window end, decaying in the
    /// window length.
    pub bound_windowed: Option<f64>,
    /// Gradient bound seeded by the initial data.
    pub bound_from_initial: Option<f64>,
    /// Ratio bound on the parabolic half region for the backward flow.
    pub bound_backward_omega: Option<f64>,
    /// Static ball bound (window-free part of the windowed bound).
    pub bound_ball: Option<f64>,
    /// Whole-manifold static bound.
    pub bound_complete: Option<f64>,
    pub k1_clamped: bool,
    pub disc_clamped: bool,
    pub m3_term_dropped: bool,
    /// Constancy regime per the drift-curvature gate.
    pub constancy_gate: bool,
    pub notes: Vec<String>,
}

impl ConstantsReport {
    /// Windowed bound re-evaluated at another window length.
    pub fn windowed_bound_at(&self, lambda: f64) -> Option<f64> {
        if !(lambda > 0.0) {
            return None;
        }
        let ball = self.bound_ball?;
        Some(ball + self.inputs.m2 / (self.k2.sqrt() * lambda.sqrt()))
    }
}

pub fn evaluate_constants(inputs: &ConstantsInputs) -> Result<ConstantsReport> {
    if inputs.m == 0 {
        return Err(Error::invariant("domain dimension must be at least 1"));
    }
    if !(inputs.m1 > 0.0) {
        return Err(Error::invariant("witness lower bound must be positive"));
    }
    if inputs.m2 < inputs.m1 {
        return Err(Error::invariant("witness range is inverted"));
    }
    if inputs.m3 < 0.0 || inputs.a < 0.0 || inputs.k < 0.0 || inputs.norm_t < 0.0 {
        return Err(Error::invariant("geometric magnitudes must be nonnegative"));
    }
    if !(inputs.eps1 > 0.0) {
        return Err(Error::invariant("eps1 must be positive"));
    }
    if !(inputs.eps2 > 0.0 && inputs.eps2 < 1.0) {
        return Err(Error::invariant("eps2 must lie strictly between 0 and 1"));
    }
    if let Some(e) = inputs.eps {
        if !(e > 0.0) {
            return Err(Error::invariant("backward slack must be positive"));
        }
    }
    if !(inputs.r > 0.0) || !(inputs.lambda > 0.0) {
        return Err(Error::invariant("window dimensions must be positive"));
    }

    let mut notes = Vec::new();
    let mf = inputs.m as f64;
    let ratio = (inputs.m3 / inputs.m1) * (inputs.m3 / inputs.m1);
    let k1 = 2.0 * (inputs.a + inputs.eps1)
        - (3.0 - 4.0 * inputs.eps2) / (2.0 * (1.0 - inputs.eps2)) * ratio;
    let k2 = 2.0 * inputs.q * inputs.m1 - inputs.norm_t * inputs.m3 * inputs.m1;
    let c1 = ((mf - 1.0) * inputs.a).sqrt();
    let c2 = inputs.c0 + inputs.c0.sqrt() * (mf - 1.0);
    let c3 = inputs.v_at_r + c1;
    let c4 = (c2 + 2.0 * inputs.c0).max(c3);
    let eps3 = (1.0 - inputs.eps2) / 2.0;
    let c1_back = 2.0 * inputs.q * inputs.m1 - inputs.norm_t * inputs.m3 * inputs.m1;
    let c2_back = 2.0 * (inputs.k + inputs.eps1) - (8.0 * eps3 - 1.0) / (4.0 * eps3) * ratio;

    let k1_clamped = k1 < 0.0;
    if k1_clamped {
        notes.push("square roots of the negative curvature constant clamped to zero".into());
    }
    let k1_pos = k1.max(0.0);

    let mut bound_windowed = None;
    let mut bound_from_initial = None;
    let mut bound_ball = None;
    let mut bound_complete = None;
    let mut disc_clamped = false;
    if k2 > 0.0 {
        let ball = inputs.m2
            * (inputs.c0.sqrt() * inputs.m3 / (k2 * inputs.r)
                + c4 * (k1_pos.sqrt() + (1.0 / inputs.r).sqrt() + 1.0 / inputs.r) / k2.sqrt());
        bound_ball = Some(ball);
        bound_windowed = Some(ball + inputs.m2 / (k2.sqrt() * inputs.lambda.sqrt()));
        let disc = 2.0 * mf * inputs.c0.sqrt() / (inputs.r * inputs.r)
            + 4.0
                * k2
                * (k1 + (c2 + 2.0 * inputs.c0) / (inputs.r * inputs.r) + c3 / inputs.r);
        if disc < 0.0 {
            disc_clamped = true;
            notes.push("negative discriminant clamped to zero".into());
        }
        bound_from_initial = Some(
            inputs.m2 / inputs.m1 * inputs.sup_grad_u0
                + inputs.m2
                    * (2.0 * mf * inputs.c0.sqrt() / inputs.r + disc.max(0.0).sqrt())
                    / (2.0 * k2),
        );
        bound_complete = Some(inputs.m2 * (k1_pos / k2).sqrt());
    } else {
        notes.push("coupling too strong: 2*Q*m1 - |T|*m3*m1 is not positive".into());
    }

    let eps_used = inputs
        .eps
        .unwrap_or_else(|| (0.05f64).min((c1_back - inputs.m3 * inputs.m3) / 10.0));
    if inputs.eps.is_none() {
        notes.push(format!("backward slack chosen automatically: {eps_used}"));
    }
    let eps_factor = if inputs.strict_proof { 6.0 } else { 5.0 };
    if inputs.strict_proof {
        notes.push("strict denominator with six slack units in use".into());
    }
    let mut bound_backward_omega = None;
    let mut m3_term_dropped = false;
    if eps_used > 0.0 {
        let den = c1_back - eps_factor * eps_used - inputs.m3 * inputs.m3;
        if den > 0.0 {
            let c34 = inputs.c_three_quarters;
            let r2 = inputs.r * inputs.r;
            let r4 = r2 * r2;
            let mut bracket = c34 * c34 / eps_used * (mf * mf + 9.0 / 4.0) / r4
                + inputs.d_temporal * inputs.d_temporal
                    / (4.0 * eps_used * inputs.lambda * inputs.lambda)
                + c34 * c34 * inputs.k * inputs.k / (4.0 * eps_used)
                + 9.0 * c34.powi(4) / (eps_used * r4)
                + inputs.v_sup * inputs.c_half * inputs.c_half / (4.0 * eps_used * r2);
            if inputs.m3 > 0.0 {
                bracket += 243.0 * c34.powi(4) / (16.0 * inputs.m3 * inputs.m3 * r4);
            } else {
                m3_term_dropped = true;
                notes.push(
                    "gradient-floor term dropped: the witness gradient cap is zero".into(),
                );
            }
            bound_backward_omega = Some(c2_back.max(0.0) / den + bracket.sqrt() / den);
        } else {
            notes.push(format!(
                "backward denominator not positive ({den}); ratio bound unavailable"
            ));
        }
    } else {
        notes.push("no positive backward slack exists; ratio bound unavailable".into());
    }

    let constancy_gate = inputs.a
        >= inputs.eps1 / 2.0
            - (3.0 - 4.0 * inputs.eps2) / (4.0 * (1.0 - inputs.eps2)) * ratio;
    if constancy_gate {
        notes.push("constancy regime: drift curvature dominates the gradient cap".into());
    }

    Ok(ConstantsReport {
        inputs: inputs.clone(),
        k1,
        k2,
        c1,
        c2,
        c3,
        c4,
        c1_back,
        c2_back,
        eps3,
        eps_used,
        bound_windowed,
        bound_from_initial,
        bound_backward_omega,
        bound_ball,
        bound_complete,
        k1_clamped,
        disc_clamped,
        m3_term_dropped,
        constancy_gate,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    FromInitial,
    Windowed,
    BackwardOmega,
    Liouville,
}

impl fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VerifyMode::FromInitial => "from_initial",
            VerifyMode::Windowed => "windowed",
            VerifyMode::BackwardOmega => "backward_omega",
            VerifyMode::Liouville => "liouville",
        };
        f.write_str(s)
    }
}

impl FromStr for VerifyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from_initial" => Ok(VerifyMode::FromInitial),
            "windowed" => Ok(VerifyMode::Windowed),
            "backward_omega" => Ok(VerifyMode::BackwardOmega),
            "liouville" => Ok(VerifyMode::Liouville),
            other => Err(Error::invariant(format!("unknown verification mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Window lengths for the windowed mode; empty means every recorded
    /// positive frame time.
    pub lambdas: Vec<f64>,
    pub decay_tol: f64,
    pub variance_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { lambdas: Vec::new(), decay_tol: 1e-6, variance_tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct VerificationRow {
    pub check: String,
    pub time: f64,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub mode: VerifyMode,
    pub rows: Vec<VerificationRow>,
    pub pass: bool,
    pub skipped: Option<String>,
}

fn skipped(mode: VerifyMode, reason: &str) -> VerificationReport {
    VerificationReport { mode, rows: Vec::new(), pass: false, skipped: Some(reason.to_string()) }
}

pub fn verify_run(
    frames: &[FrameRow],
    report: &ConstantsReport,
    mode: VerifyMode,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    if frames.is_empty() {
        return Err(Error::invariant("no frames to verify"));
    }
    let rep = match mode {
        VerifyMode::FromInitial => {
            let bound = match report.bound_from_initial {
                Some(b) => b,
                None => return Ok(skipped(mode, "initial-data bound infeasible")),
            };
            let rows: Vec<VerificationRow> = frames
                .iter()
                .map(|f| {
                    let measured = f.sup_grad_half_rball;
                    VerificationRow {
                        check: "grad_half_ball".into(),
                        time: f.time,
                        measured,
                        bound,
                        margin: bound - measured,
                        pass: measured <= bound,
                    }
                })
                .collect();
            let pass = rows.iter().all(|r| r.pass);
            VerificationReport { mode, rows, pass, skipped: None }
        }
        VerifyMode::Windowed => {
            if report.bound_ball.is_none() {
                return Ok(skipped(mode, "windowed bound infeasible"));
            }
            let lambdas: Vec<f64> = if opts.lambdas.is_empty() {
                frames.iter().map(|f| f.time).filter(|t| *t > 0.0).collect()
            } else {
                opts.lambdas.clone()
            };
            if lambdas.is_empty() {
                return Ok(skipped(mode, "no positive frame times to check"));
            }
            let mut rows = Vec::new();
            for lam in lambdas {
                let frame = frames
                    .iter()
                    .min_by(|a, b| {
                        (a.time - lam).abs().partial_cmp(&(b.time - lam).abs()).unwrap()
                    })
                    .unwrap();
                if (frame.time - lam).abs() > 1e-7 {
                    return Ok(skipped(
                        mode,
                        &format!("no recorded frame at window end {lam}"),
                    ));
                }
                let bound = report.windowed_bound_at(lam).unwrap();
                let measured = frame.sup_grad_half_rball;
                rows.push(VerificationRow {
                    check: "grad_half_ball_at_window_end".into(),
                    time: lam,
                    measured,
                    bound,
                    margin: bound - measured,
                    pass: measured <= bound,
                });
            }
            let pass = rows.iter().all(|r| r.pass);
            VerificationReport { mode, rows, pass, skipped: None }
        }
        VerifyMode::BackwardOmega => {
            let bound = match report.bound_backward_omega {
                Some(b) => b,
                None => return Ok(skipped(mode, "backward ratio bound infeasible")),
            };
            let horizon = report.inputs.lambda / 4.0;
            let mut measured: Option<f64> = None;
            for f in frames.iter().filter(|f| f.time <= horizon + 1e-12) {
                if let Some(w) = f.sup_omega_half_rball {
                    measured = Some(measured.map_or(w, |m: f64| m.max(w)));
                }
            }
            let measured = match measured {
                Some(m) => m,
                None => {
                    return Ok(skipped(
                        mode,
                        "no ratio samples in the quarter window (witness missing?)",
                    ))
                }
            };
            let row = VerificationRow {
                check: "omega_half_region".into(),
                time: horizon,
                measured,
                bound,
                margin: bound - measured,
                pass: measured <= bound,
            };
            let pass = row.pass;
            VerificationReport { mode, rows: vec![row], pass, skipped: None }
        }
        VerifyMode::Liouville => {
            let last = frames.last().unwrap();
            let first_time = frames[0].time;
            let total_span = (last.time - first_time).max(f64::MIN_POSITIVE);
            // earliest index from which the recorded gradient sup never rises
            let mut i0 = frames.len() - 1;
            while i0 > 0 && frames[i0 - 1].sup_grad + 1e-12 >= frames[i0].sup_grad {
                // require nonincreasing forward: frames[i0-1] >= frames[i0]
                i0 -= 1;
            }
            let tail_span = last.time - frames[i0].time;
            let monotone_ok = i0 == 0 || tail_span >= 0.25 * total_span;
            let rows = vec![
                VerificationRow {
                    check: "decay_terminal_grad".into(),
                    time: last.time,
                    measured: last.sup_grad,
                    bound: opts.decay_tol,
                    margin: opts.decay_tol - last.sup_grad,
                    pass: last.sup_grad < opts.decay_tol,
                },
                VerificationRow {
                    check: "terminal_coordinate_variance".into(),
                    time: last.time,
                    measured: last.coord_variance,
                    bound: opts.variance_tol,
                    margin: opts.variance_tol - last.coord_variance,
                    pass: last.coord_variance < opts.variance_tol,
                },
                VerificationRow {
                    check: "monotone_tail_start".into(),
                    time: frames[i0].time,
                    measured: tail_span,
                    bound: 0.25 * total_span,
                    margin: tail_span - 0.25 * total_span,
                    pass: monotone_ok,
                },
            ];
            let pass = rows.iter().all(|r| r.pass);
            VerificationReport { mode, rows, pass, skipped: None }
        }
    };
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fixture() -> ConstantsInputs {
        ConstantsInputs {
            a: 1.0,
            m1: 0.8660254037844386,
            m3: 0.5,
            q: 0.3,
            sup_grad_u0: 1.0,
            ..ConstantsInputs::default()
        }
    }

    fn backward_fixture() -> ConstantsInputs {
        ConstantsInputs {
            q: 0.5,
            m3: 0.3,
            eps: Some(0.05),
            r: 1e3,
            lambda: 1e3,
            ..ConstantsInputs::default()
        }
    }

    #[test]
    fn coupling_free_constants_are_exact() {
        let rep = evaluate_constants(&ConstantsInputs::default()).unwrap();
        assert_eq!(rep.k1, 0.02);
        assert_eq!(rep.k2, 1.0);
        assert_eq!(rep.c1_back, 1.0);
    }

    #[test]
    fn derived_constants_match_arithmetic_oracle() {
        let rep = evaluate_constants(&fixture()).unwrap();
        assert_relative_eq!(rep.k1, 1.5216835016835017, max_relative = 1e-12);
        assert_relative_eq!(rep.k2, 0.51961524227066319, max_relative = 1e-12);
        assert_eq!(rep.c1, 1.0);
        assert_eq!(rep.c2, 6.0);
        assert_eq!(rep.c3, 1.0);
        assert_eq!(rep.c4, 14.0);
    }

    #[test]
    fn windowed_bound_matches_arithmetic_oracle() {
        let rep = evaluate_constants(&fixture()).unwrap();
        assert_relative_eq!(
            rep.bound_windowed.unwrap(),
            40.392587404435005,
            max_relative = 1e-9
        );
        let ball = rep.bound_ball.unwrap();
        let expect = ball + 1.0 / rep.k2.sqrt();
        assert_relative_eq!(rep.bound_windowed.unwrap(), expect, epsilon = 1e-12);
        assert_relative_eq!(rep.windowed_bound_at(1.0).unwrap(), expect, epsilon = 0.0);
    }

    #[test]
    fn initial_data_bound_matches_arithmetic_oracle() {
        let rep = evaluate_constants(&fixture()).unwrap();
        assert_relative_eq!(
            rep.bound_from_initial.unwrap(),
            5.4364260191275036,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            rep.bound_complete.unwrap(),
            1.7112805919528822,
            max_relative = 1e-9
        );
    }

    #[test]
    fn backward_bound_matches_arithmetic_oracle() {
        let rep = evaluate_constants(&backward_fixture()).unwrap();
        assert_eq!(rep.c1_back, 1.0);
        assert_relative_eq!(rep.c2_back, -0.11454545454545455, max_relative = 1e-12);
        assert_eq!(rep.eps3, 0.495);
        assert_relative_eq!(
            rep.bound_backward_omega.unwrap(),
            0.0067809376290125476,
            max_relative = 1e-9
        );
        assert!(!rep.m3_term_dropped);
    }

    #[test]
    fn strict_denominator_matches_arithmetic_oracle() {
        let rep = evaluate_constants(&ConstantsInputs {
            strict_proof: true,
            ..backward_fixture()
        })
        .unwrap();
        assert_relative_eq!(
            rep.bound_backward_omega.unwrap(),
            0.0073367521887676744,
            max_relative = 1e-9
        );
    }

    #[test]
    fn zero_gradient_cap_drops_one_bracket_term() {
        let rep = evaluate_constants(&ConstantsInputs { m3: 0.0, ..backward_fixture() }).unwrap();
        assert!(rep.m3_term_dropped);
        assert_eq!(rep.c2_back, 0.02);
        assert_relative_eq!(
            rep.bound_backward_omega.unwrap(),
            0.032631855310419315,
            max_relative = 1e-9
        );
    }

    #[test]
    fn automatic_slack_matches_explicit_choice() {
        let auto = evaluate_constants(&ConstantsInputs { eps: None, ..backward_fixture() })
            .unwrap();
        let given = evaluate_constants(&backward_fixture()).unwrap();
        // auto = min(0.05, (1 - 0.09)/10) = 0.05 here
        assert_eq!(auto.eps_used.to_bits(), given.eps_used.to_bits());
        assert_eq!(
            auto.bound_backward_omega.unwrap().to_bits(),
            given.bound_backward_omega.unwrap().to_bits()
        );
        let tight = evaluate_constants(&ConstantsInputs {
            q: 0.5,
            m1: 0.2,
            m3: 0.1,
            eps: None,
            ..ConstantsInputs::default()
        })
        .unwrap();
        assert_relative_eq!(tight.eps_used, (0.2 - 0.01) / 10.0, epsilon = 1e-15);
    }

    #[test]
    fn coupling_free_reduction_is_bitwise() {
        for (q, m1, m3) in [(0.5, 1.0, 0.0), (0.3, 0.7, 0.2), (1.25, 0.4, 0.9)] {
            let rep = evaluate_constants(&ConstantsInputs {
                q,
                m1,
                m2: 2.0,
                m3,
                norm_t: 0.0,
                ..ConstantsInputs::default()
            })
            .unwrap();
            assert_eq!(rep.k2.to_bits(), (2.0 * q * m1).to_bits());
            assert_eq!(rep.c1_back.to_bits(), (2.0 * q * m1).to_bits());
        }
    }

    #[test]
    fn windowed_bound_monotone_in_window_dimensions() {
        let mut prev_r = f64::INFINITY;
        for r in [2.0, 4.0, 8.0, 16.0] {
            let rep = evaluate_constants(&ConstantsInputs { r, ..fixture() }).unwrap();
            let b = rep.bound_windowed.unwrap();
            assert!(b <= prev_r + 1e-12, "not monotone in radius");
            prev_r = b;
            let mut prev_l = f64::INFINITY;
            for lambda in [0.25, 1.0, 4.0] {
                let bl = rep.windowed_bound_at(lambda).unwrap();
                assert!(bl <= prev_l + 1e-12, "not monotone in window length");
                prev_l = bl;
            }
        }
    }

    #[test]
    fn initial_data_slope_is_the_range_ratio() {
        let base = fixture();
        let b0 = evaluate_constants(&base).unwrap().bound_from_initial.unwrap();
        let b1 = evaluate_constants(&ConstantsInputs { sup_grad_u0: 3.5, ..base.clone() })
            .unwrap()
            .bound_from_initial
            .unwrap();
        let slope = (b1 - b0) / (3.5 - base.sup_grad_u0);
        assert_relative_eq!(slope, base.m2 / base.m1, epsilon = 1e-12);
    }

    #[test]
    fn bounds_vanish_in_the_large_window_limit() {
        // gradient-cap value that cancels the curvature constant exactly
        let inputs = ConstantsInputs {
            m3: 0.11566494014340896,
            c0: 0.0,
            r: 1e6,
            lambda: 1e6,
            ..ConstantsInputs::default()
        };
        let rep = evaluate_constants(&inputs).unwrap();
        assert!(rep.k1.abs() < 1e-15);
        assert!(rep.bound_windowed.unwrap() < 1e-2);
        assert!(rep.bound_from_initial.unwrap() < 1e-2);
        let seeded = evaluate_constants(&ConstantsInputs { sup_grad_u0: 0.7, ..inputs }).unwrap();
        assert_relative_eq!(seeded.bound_from_initial.unwrap(), 0.7, epsilon = 1e-4);
    }

    #[test]
    fn infeasible_gates_disable_bounds_with_reasons() {
        let strong_t = evaluate_constants(&ConstantsInputs {
            q: 0.1,
            norm_t: 1.0,
            m3: 0.5,
            ..ConstantsInputs::default()
        })
        .unwrap();
        assert!(strong_t.k2 < 0.0);
        assert!(strong_t.bound_windowed.is_none());
        assert!(strong_t.bound_from_initial.is_none());
        assert!(!strong_t.notes.is_empty());

        let bad_back = evaluate_constants(&ConstantsInputs {
            q: 0.05,
            m3: 0.4,
            eps: None,
            ..ConstantsInputs::default()
        })
        .unwrap();
        assert!(bad_back.bound_backward_omega.is_none());

        assert!(evaluate_constants(&ConstantsInputs {
            eps2: 1.0,
            ..ConstantsInputs::default()
        })
        .is_err());
        assert!(evaluate_constants(&ConstantsInputs {
            m1: 0.0,
            ..ConstantsInputs::default()
        })
        .is_err());
    }

    #[test]
    fn constancy_gate_follows_the_drift_strength() {
        let with_drift =
            evaluate_constants(&ConstantsInputs { a: 0.2, ..ConstantsInputs::default() }).unwrap();
        assert!(with_drift.constancy_gate);
        let flat = evaluate_constants(&ConstantsInputs::default()).unwrap();
        assert!(!flat.constancy_gate);
    }

    fn frame(time: f64, grad: f64, variance: f64, omega: Option<f64>) -> FrameRow {
        FrameRow {
            time,
            sup_e: grad * grad,
            sup_omega: omega,
            sup_omega_half_rball: omega,
            total_energy: grad,
            sup_grad: grad,
            sup_grad_rball: grad,
            sup_grad_half_rball: grad,
            coord_variance: variance,
            bochner: None,
        }
    }

    #[test]
    fn frame_verification_against_fixed_bound() {
        let rep = evaluate_constants(&fixture()).unwrap();
        let frames =
            vec![frame(0.0, 1.0, 0.1, None), frame(0.5, 0.6, 0.1, None), frame(1.0, 0.4, 0.1, None)];
        let out =
            verify_run(&frames, &rep, VerifyMode::FromInitial, &VerifyOptions::default()).unwrap();
        assert!(out.pass);
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows.iter().all(|r| r.margin > 0.0));

        let mut bad = frames.clone();
        bad[2].sup_grad_half_rball = 1e4;
        let out =
            verify_run(&bad, &rep, VerifyMode::FromInitial, &VerifyOptions::default()).unwrap();
        assert!(!out.pass);
    }

    #[test]
    fn windowed_verification_reads_frames_at_window_ends() {
        let rep = evaluate_constants(&fixture()).unwrap();
        let frames =
            vec![frame(0.0, 1.0, 0.1, None), frame(0.25, 0.8, 0.1, None), frame(0.5, 0.7, 0.1, None)];
        let opts = VerifyOptions { lambdas: vec![0.25, 0.5], ..VerifyOptions::default() };
        let out = verify_run(&frames, &rep, VerifyMode::Windowed, &opts).unwrap();
        assert!(out.pass);
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].time, 0.25);

        let missing = VerifyOptions { lambdas: vec![0.3], ..VerifyOptions::default() };
        let out = verify_run(&frames, &rep, VerifyMode::Windowed, &missing).unwrap();
        assert!(out.skipped.is_some() && !out.pass);
    }

    #[test]
    fn backward_verification_takes_the_quarter_window_sup() {
        let rep = evaluate_constants(&backward_fixture()).unwrap();
        let horizon = 1e3 / 4.0;
        let frames = vec![
            frame(0.0, 0.1, 0.1, Some(1e-4)),
            frame(horizon * 0.5, 0.1, 0.1, Some(2e-3)),
            frame(horizon * 2.0, 0.1, 0.1, Some(5.0)),
        ];
        let out =
            verify_run(&frames, &rep, VerifyMode::BackwardOmega, &VerifyOptions::default())
                .unwrap();
        assert!(out.pass, "late frames beyond the quarter window must not count");
        assert_relative_eq!(out.rows[0].measured, 2e-3, epsilon = 0.0);

        let blank = vec![frame(0.0, 0.1, 0.1, None)];
        let out =
            verify_run(&blank, &rep, VerifyMode::BackwardOmega, &VerifyOptions::default())
                .unwrap();
        assert!(out.skipped.is_some());
    }

    #[test]
    fn liouville_verification_checks_decay_and_flatness() {
        let rep = evaluate_constants(&ConstantsInputs::default()).unwrap();
        let mut frames = Vec::new();
        for k in 0..=20 {
            let t = k as f64;
            frames.push(frame(t, 0.5 * (-t).exp().max(1e-9), 1e-12, None));
        }
        let out =
            verify_run(&frames, &rep, VerifyMode::Liouville, &VerifyOptions::default()).unwrap();
        assert!(out.pass, "{:?}", out.rows);

        let mut stuck = frames.clone();
        stuck.last_mut().unwrap().sup_grad = 0.1;
        let out =
            verify_run(&stuck, &rep, VerifyMode::Liouville, &VerifyOptions::default()).unwrap();
        assert!(!out.pass);

        let mut spread = frames;
        spread.last_mut().unwrap().coord_variance = 1e-3;
        let out =
            verify_run(&spread, &rep, VerifyMode::Liouville, &VerifyOptions::default()).unwrap();
        assert!(!out.pass);
    }

    #[test]
    fn verification_modes_parse_round_trip() {
        for mode in [
            VerifyMode::FromInitial,
            VerifyMode::Windowed,
            VerifyMode::BackwardOmega,
            VerifyMode::Liouville,
        ] {
            assert_eq!(mode.to_string().parse::<VerifyMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<VerifyMode>().is_err());
    }
}
