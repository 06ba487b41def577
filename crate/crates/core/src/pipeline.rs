use crate::cutoff::{build_cutoff, certify_cutoff, CutoffCertificate};
use crate::domain::{DomainChart, SuperRicciReport};
use crate::error::{Error, Result};
use crate::estimate::{
    evaluate_constants, verify_run, ConstantsReport, VerificationReport,
};
use crate::flow::{build_initial, run_flow, Direction, FlowSystem, FrameRow, RunOutput, Scheme};
use crate::reduced::reduced_distance;
use crate::report::{self, ReducedRow};
use crate::scenario::Scenario;
use crate::target::{
    check_condition_c, check_generalized_regular_ball, sample_ball, t_smallness_gate, CertInputs,
    CertReport, RegularBallReport, SmallnessGate, TargetModel, TensorField, Witness,
};
use std::fmt::Write as _;
use std::path::Path;

pub const FRAMES_FILE: &str = "frames.csv";
pub const FINAL_STATE_FILE: &str = "final_state.csv";
pub const CONSTANTS_FILE: &str = "constants.csv";
pub const VERIFICATION_FILE: &str = "verification.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CUTOFF_FILE: &str = "cutoff.csv";
pub const REDUCED_FILE: &str = "reduced.csv";

/// Cap on the node subsample used for chart-wide eigenvalue scans.
const CHART_SCAN_NODES: usize = 128;

/// One scenario resolved into live objects, shared by every subcommand.
pub struct Lab {
    pub scenario: Scenario,
    pub chart: DomainChart,
    pub target: TargetModel,
    pub tensor: TensorField,
    pub witness: Option<Witness>,
    pub strict_proof: bool,
}

#[derive(Debug, Clone)]
pub struct TargetCertificate {
    pub condition: CertReport,
    pub ball: RegularBallReport,
    pub smallness_pass: bool,
    pub smallness_threshold: f64,
}

impl TargetCertificate {
    pub fn pass(&self) -> bool {
        self.condition.pass && self.ball.pass && self.smallness_pass
    }
}

#[derive(Debug, Clone)]
pub struct Certificates {
    pub domain: SuperRicciReport,
    /// The flow inequality blocks the run only for backward marching;
    /// forward runs keep it as a diagnostic.
    pub domain_enforced: bool,
    pub target: Option<TargetCertificate>,
    pub cutoff: CutoffCertificate,
}

impl Certificates {
    pub fn failure(&self) -> Option<String> {
        if self.domain_enforced && !self.domain.pass {
            return Some(format!(
                "flow inequality fails on the sampled chart (worst margin {})",
                self.domain.worst_margin
            ));
        }
        if let Some(t) = &self.target {
            if !t.condition.pass {
                let mut msg = String::from("region condition check failed");
                for note in &t.condition.notes {
                    let _ = write!(msg, "; {note}");
                }
                return Some(msg);
            }
            if !t.ball.pass {
                return Some(format!(
                    "region structure check failed (nonnegative={} convex={} sublevel={})",
                    t.ball.nonnegative, t.ball.convex, t.ball.sublevel_ok
                ));
            }
            if !t.smallness_pass {
                return Some(format!(
                    "tensor too large for the region: |T| {} >= threshold {}",
                    t.condition.t_norm, t.smallness_threshold
                ));
            }
        }
        if !self.cutoff.pass {
            return Some("cutoff certificate failed".into());
        }
        None
    }

    pub fn pass(&self) -> bool {
        self.failure().is_none()
    }

    pub fn verdict(&self) -> Result<()> {
        match self.failure() {
            None => Ok(()),
            Some(msg) => Err(Error::Certification(msg)),
        }
    }
}

/// Analysis artifacts shared by the full run and the replay entry point.
pub struct Analysis {
    pub certs: Certificates,
    pub constants: ConstantsReport,
    pub verifications: Vec<VerificationReport>,
    pub summary: String,
}

impl Analysis {
    pub fn all_verified(&self) -> bool {
        self.verifications.iter().all(|v| v.pass)
    }

    pub fn verification_error(&self) -> Result<()> {
        match self.verifications.iter().find(|v| !v.pass) {
            None => Ok(()),
            Some(v) => Err(Error::Verification(match &v.skipped {
                Some(reason) => format!("{} skipped: {reason}", v.mode),
                None => format!("{} bound violated", v.mode),
            })),
        }
    }
}

impl Lab {
    pub fn new(mut scenario: Scenario, strict_proof: bool, seed: Option<u64>) -> Result<Lab> {
        if let Some(s) = seed {
            scenario.seed = s;
        }
        let chart = scenario.build_chart()?;
        let target = scenario.build_target()?;
        let tensor = scenario.build_tensor();
        let witness = scenario.build_witness()?;
        Ok(Lab { scenario, chart, target, tensor, witness, strict_proof })
    }

    pub fn load(path: &Path, strict_proof: bool, seed: Option<u64>) -> Result<Lab> {
        Lab::new(Scenario::load(path)?, strict_proof, seed)
    }

    fn scan_nodes(&self) -> Vec<usize> {
        let len = self.chart.grid.len();
        let stride = (len / CHART_SCAN_NODES).max(1);
        (0..len).step_by(stride).collect()
    }

    fn scan_times(&self) -> Vec<f64> {
        if self.scenario.domain_times.is_empty() {
            vec![0.0]
        } else {
            self.scenario.domain_times.clone()
        }
    }

    /// Largest analysis window: the longest configured window length, falling
    /// back to the flow horizon.
    pub fn window(&self) -> f64 {
        self.scenario.constants_inputs().lambda
    }

    pub fn domain_report(&self) -> Result<SuperRicciReport> {
        self.chart.check_backward_super_ricci(&self.scan_times(), &self.scan_nodes())
    }

    pub fn cutoff_certificate(&self) -> Result<CutoffCertificate> {
        let profile =
            build_cutoff(self.scenario.estimate_r, self.window(), self.scenario.cutoff_alpha)?;
        certify_cutoff(&profile, self.scenario.cutoff_samples)
    }

    /// Runs every certification stage without enforcing verdicts, so callers
    /// can report all gates before deciding.
    pub fn certify(&self) -> Result<Certificates> {
        let domain = self.domain_report()?;
        let domain_enforced = self.scenario.flow.direction == Direction::Backward;
        let target = match &self.witness {
            None => None,
            Some(w) => {
                let samples = sample_ball(
                    &self.target,
                    w.ball_radius,
                    self.scenario.witness_samples,
                    self.scenario.seed,
                )?;
                let eps_pairs = self.scenario.eps_pairs();
                let inputs = CertInputs {
                    tensor: &self.tensor,
                    q: self.scenario.witness_q,
                    source_dim: self.chart.dim(),
                    eps_pairs: &eps_pairs,
                    seed: self.scenario.seed,
                };
                let condition = check_condition_c(&self.target, w, &samples, &inputs)?;
                let ball = check_generalized_regular_ball(&self.target, w, &samples, &inputs)?;
                let gate = match self.scenario.flow.direction {
                    Direction::Forward => SmallnessGate::Forward,
                    Direction::Backward => SmallnessGate::Backward,
                };
                let (smallness_pass, smallness_threshold) = t_smallness_gate(
                    condition.q,
                    condition.f_min,
                    condition.grad_f_sup,
                    condition.t_norm,
                    gate,
                );
                Some(TargetCertificate { condition, ball, smallness_pass, smallness_threshold })
            }
        };
        let cutoff = self.cutoff_certificate()?;
        Ok(Certificates { domain, domain_enforced, target, cutoff })
    }

    pub fn flow(&self) -> Result<RunOutput> {
        let system = FlowSystem::new(
            self.chart.clone(),
            self.target.clone(),
            self.tensor.clone(),
            self.witness.clone(),
        )?;
        let initial = build_initial(&self.chart, &self.target, &self.scenario.build_initial())?;
        run_flow(&system, &self.scenario.flow, initial, Some(self.scenario.estimate_r))
    }

    /// Constants sheet for this lab: scenario-pinned inputs plus the measured
    /// chart, certificate, and cutoff quantities.
    pub fn constants(&self, certs: &Certificates, frames: &[FrameRow]) -> Result<ConstantsReport> {
        let mut inputs = self.scenario.constants_inputs();
        inputs.a = self.chart.ric_v_lower_bound(&self.scan_times(), &self.scan_nodes())?;
        inputs.v_sup = self.chart.v_sup_norm();
        inputs.v_at_r = inputs.v_sup;
        inputs.c0 = certs.cutoff.c_base;
        inputs.c_half = certs.cutoff.c_half;
        inputs.c_three_quarters = certs.cutoff.c_three_quarters;
        inputs.d_temporal = certs.cutoff.d_temporal;
        inputs.strict_proof = self.strict_proof;
        match &certs.target {
            Some(t) => {
                inputs.m1 = t.condition.f_min;
                inputs.m2 = t.condition.f_max;
                inputs.m3 = t.condition.grad_f_sup;
                inputs.q = t.condition.q;
                inputs.norm_t = t.condition.t_norm;
                inputs.norm_grad_t = t.condition.grad_t_norm;
                inputs.eps1 = t.condition.eps1;
                inputs.eps2 = t.condition.eps2;
            }
            None => {
                inputs.m1 = 1.0;
                inputs.m2 = 1.0;
                inputs.m3 = 0.0;
            }
        }
        if let Some(first) = frames.first() {
            inputs.sup_grad_u0 = first.sup_grad;
        }
        evaluate_constants(&inputs)
    }

    pub fn analyze(&self, frames: &[FrameRow]) -> Result<Analysis> {
        let certs = self.certify()?;
        certs.verdict()?;
        let constants = self.constants(&certs, frames)?;
        let opts = self.scenario.verify_options();
        let mut verifications = Vec::with_capacity(self.scenario.estimate_modes.len());
        for mode in &self.scenario.estimate_modes {
            verifications.push(verify_run(frames, &constants, *mode, &opts)?);
        }
        let summary = summary_text(self, &certs, &constants, &verifications, frames);
        Ok(Analysis { certs, constants, verifications, summary })
    }

    /// Space-time distance table along the first chart axis from the base
    /// point, one row per (radius, horizon) pair.
    pub fn reduced_table(&self) -> Result<Vec<ReducedRow>> {
        let radii = if self.scenario.reduced_probe_radii.is_empty() {
            vec![0.5, 1.0]
        } else {
            self.scenario.reduced_probe_radii.clone()
        };
        let tau_bars = if self.scenario.reduced_tau_bars.is_empty() {
            vec![1.0]
        } else {
            self.scenario.reduced_tau_bars.clone()
        };
        let mut rows = Vec::with_capacity(radii.len() * tau_bars.len());
        for &r in &radii {
            let mut x = self.chart.base.clone();
            x[0] += r;
            for &tau_bar in &tau_bars {
                let (ell, out) =
                    reduced_distance(&self.chart, &x, tau_bar, self.scenario.reduced_knots)?;
                rows.push(ReducedRow {
                    x: x.clone(),
                    tau_bar,
                    l: out.l,
                    ell,
                    dfrak: (4.0 * tau_bar * ell).max(0.0).sqrt(),
                    residual: out.residual,
                    converged: out.converged,
                });
            }
        }
        Ok(rows)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "none".into(),
    }
}

fn direction_label(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}

fn scheme_label(s: Scheme) -> &'static str {
    match s {
        Scheme::Euler => "euler",
        Scheme::Rk4 => "rk4",
    }
}

/// Certification section shared by the summary artifact and the certify
/// subcommand output.
pub fn certificates_text(lab: &Lab, certs: &Certificates) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "flow inequality: pass={} worst_margin={} enforced={}",
        certs.domain.pass, certs.domain.worst_margin, certs.domain_enforced
    );
    let cs: Vec<String> =
        certs.domain.c_tau.iter().map(|(tau, c)| format!("{tau}={c}")).collect();
    let _ = writeln!(out, "admissibility: {}", cs.join("; "));
    match &certs.target {
        None => {
            let _ = writeln!(out, "region: none (unit density, zero density gradient)");
        }
        Some(t) => {
            let shape = lab.scenario.witness_shape.as_deref().unwrap_or("custom");
            let _ = writeln!(
                out,
                "region: {shape} radius={} pass={}",
                lab.scenario.witness_ball_radius,
                t.pass()
            );
            let _ = writeln!(
                out,
                "  condition: pass={} eps1={} eps2={} margin={} q={}",
                t.condition.pass,
                t.condition.eps1,
                t.condition.eps2,
                t.condition.margin_concavity,
                t.condition.q
            );
            let _ = writeln!(
                out,
                "  density: min={} max={} grad_sup={}",
                t.condition.f_min, t.condition.f_max, t.condition.grad_f_sup
            );
            let _ = writeln!(
                out,
                "  tensor: norm={} grad_norm={} smallness_pass={} threshold={}",
                t.condition.t_norm,
                t.condition.grad_t_norm,
                t.smallness_pass,
                t.smallness_threshold
            );
            let _ = writeln!(
                out,
                "  structure: pass={} convexity_margin={} sublevel_ok={}",
                t.ball.pass, t.ball.convexity_margin, t.ball.sublevel_ok
            );
            if t.condition.jointly_infeasible {
                let _ = writeln!(
                    out,
                    "  infeasible: q_max_feasible={} q_min_required={}",
                    t.condition.q_max_feasible, t.condition.q_min_required
                );
            }
            for note in &t.condition.notes {
                let _ = writeln!(out, "  note: {note}");
            }
        }
    }
    let c = &certs.cutoff;
    let _ = writeln!(
        out,
        "cutoff: pass={} alpha={} c_alpha={} c_half={} c_three_quarters={} d_temporal={} c0={} samples={}",
        c.pass, c.alpha, c.c_alpha, c.c_half, c.c_three_quarters, c.d_temporal, c.c_base, c.samples
    );
    out
}

fn summary_text(
    lab: &Lab,
    certs: &Certificates,
    constants: &ConstantsReport,
    verifications: &[VerificationReport],
    frames: &[FrameRow],
) -> String {
    let s = &lab.scenario;
    let mut out = String::new();
    let _ = writeln!(out, "vtflow summary");
    let _ = writeln!(out, "seed: {}", s.seed);
    let _ = writeln!(
        out,
        "domain: {} dim={} nodes={} drift={}",
        s.domain_family, s.domain_dim, s.domain_nodes, s.v_family
    );
    let _ = writeln!(out, "target: {} dim={}", s.target_family, s.target_dim);
    let _ = writeln!(out, "tensor: {}", s.tensor_family);
    let _ = writeln!(
        out,
        "flow: direction={} scheme={} dt={} horizon={}",
        direction_label(s.flow.direction),
        scheme_label(s.flow.scheme),
        s.flow.dt,
        s.flow.t_end
    );
    if let (Some(first), Some(last)) = (frames.first(), frames.last()) {
        let _ = writeln!(
            out,
            "frames: {} first_time={} last_time={} final_sup_grad={}",
            frames.len(),
            first.time,
            last.time,
            last.sup_grad
        );
    }
    out.push_str(&certificates_text(lab, certs));
    let _ = writeln!(
        out,
        "constants: k1={} k2={} c1={} c2={} c3={} c4={} c1_back={} c2_back={} eps_used={}",
        constants.k1,
        constants.k2,
        constants.c1,
        constants.c2,
        constants.c3,
        constants.c4,
        constants.c1_back,
        constants.c2_back,
        constants.eps_used
    );
    let _ = writeln!(
        out,
        "bounds: windowed={} from_initial={} backward_omega={} ball={} complete={}",
        fmt_opt(constants.bound_windowed),
        fmt_opt(constants.bound_from_initial),
        fmt_opt(constants.bound_backward_omega),
        fmt_opt(constants.bound_ball),
        fmt_opt(constants.bound_complete)
    );
    let _ = writeln!(
        out,
        "flags: k1_clamped={} disc_clamped={} m3_term_dropped={} constancy_gate={} strict_proof={}",
        constants.k1_clamped,
        constants.disc_clamped,
        constants.m3_term_dropped,
        constants.constancy_gate,
        lab.strict_proof
    );
    for note in &constants.notes {
        let _ = writeln!(out, "constants note: {note}");
    }
    for v in verifications {
        match &v.skipped {
            Some(reason) => {
                let _ = writeln!(out, "verification {}: skipped ({reason})", v.mode);
            }
            None => {
                let worst =
                    v.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
                let _ = writeln!(
                    out,
                    "verification {}: pass={} rows={} worst_margin={}",
                    v.mode,
                    v.pass,
                    v.rows.len(),
                    worst
                );
            }
        }
    }
    let overall = certs.pass() && verifications.iter().all(|v| v.pass);
    let _ = writeln!(out, "overall: {}", if overall { "pass" } else { "fail" });
    out
}

pub fn write_analysis(out_dir: &Path, lab: &Lab, analysis: &Analysis) -> Result<()> {
    let _ = lab;
    report::write_constants_csv(&out_dir.join(CONSTANTS_FILE), &analysis.constants)?;
    report::write_verification_csv(&out_dir.join(VERIFICATION_FILE), &analysis.verifications)?;
    report::write_summary(&out_dir.join(SUMMARY_FILE), &analysis.summary)?;
    Ok(())
}

pub fn write_flow_output(out_dir: &Path, lab: &Lab, run: &RunOutput) -> Result<()> {
    report::write_frames_csv(&out_dir.join(FRAMES_FILE), &run.frames)?;
    report::write_final_state_csv(
        &out_dir.join(FINAL_STATE_FILE),
        &lab.chart,
        lab.target.dim,
        &run.final_state,
    )?;
    Ok(())
}

/// Full experiment: certify, march, assemble constants, verify, and write
/// every artifact. Artifacts land before the verification verdict is raised
/// so failed runs stay inspectable.
pub fn run_all(lab: &Lab, out_dir: &Path) -> Result<(RunOutput, Analysis)> {
    let certs = lab.certify()?;
    certs.verdict()?;
    let run = lab.flow()?;
    let analysis = lab.analyze(&run.frames)?;
    write_flow_output(out_dir, lab, &run)?;
    write_analysis(out_dir, lab, &analysis)?;
    Ok((run, analysis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{frames_from_csv, frames_to_csv};
    use crate::scenario::Scenario;

    fn lab_from(text: &str) -> Lab {
        Lab::new(Scenario::from_text(text).unwrap(), false, None).unwrap()
    }

    const SMALL_RUN: &str = "\
domain.nodes = 16
initial.family = sine_mode
initial.amplitude = 0.3
flow.dt = 1e-3
flow.t_end = 0.05
flow.record_every = 10
estimate.modes = from_initial
estimate.r = 2.0
";

    #[test]
    fn witnessless_run_verifies_against_the_initial_bound() {
        let lab = lab_from(SMALL_RUN);
        let run = lab.flow().unwrap();
        let analysis = lab.analyze(&run.frames).unwrap();
        assert!(analysis.certs.pass());
        assert!(analysis.all_verified());
        assert!(analysis.verification_error().is_ok());
        let k2 = analysis.constants.k2;
        assert!((k2 - 0.3).abs() < 1e-15, "unit density gives k2 = 2q, got {k2}");
        assert!(analysis.summary.contains("overall: pass"));
    }

    #[test]
    fn replayed_frames_reproduce_the_analysis_bytes() {
        let lab = lab_from(SMALL_RUN);
        let run = lab.flow().unwrap();
        let direct = lab.analyze(&run.frames).unwrap();
        let replayed = frames_from_csv(&frames_to_csv(&run.frames)).unwrap();
        let indirect = lab.analyze(&replayed).unwrap();
        assert_eq!(
            crate::report::constants_to_csv(&direct.constants),
            crate::report::constants_to_csv(&indirect.constants)
        );
        assert_eq!(
            crate::report::verification_to_csv(&direct.verifications),
            crate::report::verification_to_csv(&indirect.verifications)
        );
        assert_eq!(direct.summary, indirect.summary);
    }

    #[test]
    fn expanding_chart_cannot_march_backward() {
        let lab = lab_from(
            "domain.family = conformal_torus\n\
             domain.rate = 0.5\n\
             domain.times = 0.0, 0.5, 1.0\n\
             flow.direction = backward\n\
             flow.dt = 1e-3\n\
             flow.t_end = 0.01\n",
        );
        let certs = lab.certify().unwrap();
        assert!(certs.domain_enforced);
        assert!(!certs.domain.pass);
        let err = certs.verdict().unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn shrinking_chart_passes_the_backward_gate() {
        let lab = lab_from(
            "domain.family = conformal_torus\n\
             domain.rate = -0.5\n\
             domain.times = 0.0, 0.5, 1.0\n\
             flow.direction = backward\n\
             flow.dt = 1e-3\n\
             flow.t_end = 0.01\n",
        );
        let certs = lab.certify().unwrap();
        assert!(certs.domain.pass);
        // admissibility constants are running maxima, so nondecreasing
        let cs: Vec<f64> = certs.domain.c_tau.iter().map(|p| p.1).collect();
        assert!(cs.windows(2).all(|w| w[1] >= w[0] - 1e-15));
    }

    #[test]
    fn negative_density_region_blocks_the_run() {
        let lab = lab_from(
            "witness.f = quadratic_cap\n\
             witness.cap = 0.1\n\
             witness.ball_radius = 1.0\n\
             flow.t_end = 0.01\n",
        );
        let certs = lab.certify().unwrap();
        assert!(!certs.pass());
        let err = certs.verdict().unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn probe_table_recovers_static_distances() {
        let lab = lab_from("reduced.probe_radii = 0.5, 1.0\nreduced.tau_bars = 0.25, 1.0\n");
        let rows = lab.reduced_table().unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            let d = row.x[0] - lab.chart.base[0];
            assert!((row.dfrak - d).abs() < 2e-3, "dfrak {} vs {}", row.dfrak, d);
            assert!(row.converged);
        }
    }
}
