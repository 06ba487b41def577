//! End-to-end acceptance checks, one per criterion, each printing a single
//! pass/fail line with its pinned tolerances.

use std::path::{Path, PathBuf};
use std::time::Instant;

use vtflow_core::cutoff::{build_cutoff, certify_cutoff};
use vtflow_core::domain::{DomainChart, MetricFamily, VectorField};
use vtflow_core::estimate::{evaluate_constants, ConstantsInputs, VerifyMode};
use vtflow_core::grid::PeriodicGrid;
use vtflow_core::pipeline::{
    run_all, Lab, CONSTANTS_FILE, FINAL_STATE_FILE, FRAMES_FILE, SUMMARY_FILE, VERIFICATION_FILE,
};
use vtflow_core::reduced::{d_frak, minimize_l, reduced_distance};
use vtflow_core::scenario::Scenario;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn load(name: &str) -> Lab {
    Lab::load(&scenario_path(name), false, None).unwrap()
}

fn verdict(number: u8, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {number} {name}: {tag} ({detail})");
    assert!(pass, "acceptance {number} {name}: {tag} ({detail})");
}

fn rel(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected.abs()
}

#[test]
fn heat_flow_matches_the_separable_oracle() {
    let clock = Instant::now();
    let lab = load("heat_oracle.cfg");
    let run = lab.flow().unwrap();
    let analysis = lab.analyze(&run.frames).unwrap();
    let n = lab.target.dim;
    let decay = (-0.5f64).exp();
    let mut worst = 0.0f64;
    for flat in 0..lab.chart.grid.len() {
        let x0 = lab.chart.grid.coord(flat, 0);
        worst = worst.max((run.final_state.u[flat * n] - decay * x0.sin()).abs());
    }
    let elapsed = clock.elapsed().as_secs_f64();
    let ok = worst <= 1e-3 && elapsed < 60.0 && analysis.all_verified();
    verdict(
        1,
        "heat flow oracle",
        ok,
        &format!("sup error {worst:.2e} <= 1e-3 vs exp(-1/2) sin(x0), {elapsed:.1} s < 60 s"),
    );
}

#[test]
fn interior_operators_refine_at_second_order() {
    let text = std::fs::read_to_string(scenario_path("convergence.cfg")).unwrap();
    let residual = |nodes: usize| -> f64 {
        let sc = Scenario::from_text(&format!("{text}\ndomain.nodes = {nodes}\n")).unwrap();
        let lab = Lab::new(sc, false, None).unwrap();
        let run = lab.flow().unwrap();
        run.frames.iter().filter_map(|f| f.bochner).fold(0.0f64, |acc, b| acc.max(b.abs()))
    };
    let ratio_flow = residual(32) / residual(64);

    let lap_err = |nodes: usize| -> f64 {
        let chart = DomainChart::flat_torus(2, nodes)
            .unwrap()
            .with_v(VectorField::SineAxis { amplitude: 1.0 })
            .unwrap();
        let field: Vec<f64> =
            (0..chart.grid.len()).map(|flat| chart.grid.coord(flat, 0).sin()).collect();
        let mut worst = 0.0f64;
        for flat in 0..chart.grid.len() {
            let x = chart.grid.coord(flat, 0);
            let expect = -x.sin() + x.sin() * x.cos();
            worst = worst.max((chart.v_laplacian(&field, flat, 0.0).unwrap() - expect).abs());
        }
        worst
    };
    let ratio_lap = lap_err(32) / lap_err(64);

    let ok = (3.2..=4.8).contains(&ratio_flow) && (3.2..=4.8).contains(&ratio_lap);
    verdict(
        2,
        "grid-doubling order",
        ok,
        &format!(
            "identity residual ratio {ratio_flow:.2}, drift Laplacian error ratio {ratio_lap:.2}, both in [3.2, 4.8]"
        ),
    );
}

#[test]
fn region_certificates_split_the_three_witness_cases() {
    let cert = |file: &str| load(file).certify().unwrap().target.unwrap();
    let narrow = cert("sphere_cert_pi6.cfg");
    let wide = cert("sphere_cert_pi3.cfg");
    let cap = cert("euclid_cap_cert.cfg");
    let ok = narrow.pass()
        && narrow.condition.margin_concavity >= 0.10
        && !wide.condition.pass
        && wide.condition.jointly_infeasible
        && cap.pass();
    verdict(
        3,
        "region certification",
        ok,
        &format!(
            "narrow sphere margin {:.3} >= 0.10, wide sphere jointly infeasible (needs q >= {:.3}, allows q <= {:.3}), flat cap margin {:.3}",
            narrow.condition.margin_concavity,
            wide.condition.q_min_required,
            wide.condition.q_max_feasible,
            cap.condition.margin_concavity
        ),
    );
}

#[test]
fn curve_energy_closed_forms_on_the_static_chart() {
    let chart = DomainChart::flat_torus(2, 16).unwrap();
    let probe = [1.0, 0.0];
    let out = minimize_l(&chart, &probe, 1.0, 16).unwrap();
    let (ell, _) = reduced_distance(&chart, &probe, 1.0, 16).unwrap();
    let d = d_frak(&chart, &probe, 1.0, 16).unwrap();

    let delta = 1e-3;
    let mut grad_sq_max = 0.0f64;
    for r in [0.75, 1.0, 1.25] {
        let mut sq = 0.0;
        for axis in 0..2 {
            let mut plus = [r, 0.0];
            let mut minus = [r, 0.0];
            plus[axis] += delta;
            minus[axis] -= delta;
            let g = (d_frak(&chart, &plus, 1.0, 16).unwrap()
                - d_frak(&chart, &minus, 1.0, 16).unwrap())
                / (2.0 * delta);
            sq += g * g;
        }
        grad_sq_max = grad_sq_max.max(sq);
    }

    let ok = out.converged
        && (out.l - 0.5).abs() <= 1e-3
        && (ell - 0.25).abs() <= 1e-3
        && (d - 1.0).abs() <= 1e-3
        && grad_sq_max <= 3.0;
    verdict(
        4,
        "curve energy closed forms",
        ok,
        &format!(
            "L {:.6} (0.5 +/- 1e-3), reduced {:.6} (0.25 +/- 1e-3), parabolic {:.6} (1 +/- 1e-3), max grad^2 {:.4} <= 3",
            out.l, ell, d, grad_sq_max
        ),
    );
}

#[test]
fn bump_profile_certificate_is_sampling_stable() {
    let profile = build_cutoff(4.0, 1.0, 0.75).unwrap();
    let base = certify_cutoff(&profile, 10_000).unwrap();
    let fine = certify_cutoff(&profile, 20_000).unwrap();
    let d34 = rel(fine.c_three_quarters, base.c_three_quarters);
    let dtemp = rel(fine.d_temporal, base.d_temporal);
    let dbase = rel(fine.c_base, base.c_base);
    let ok = base.pass && fine.pass && d34 <= 0.01 && dtemp <= 0.01 && dbase <= 0.01;
    verdict(
        5,
        "bump profile certificate",
        ok,
        &format!(
            "pointwise checks pass at both resolutions; doubling drift {:.2e} / {:.2e} / {:.2e} <= 1e-2",
            d34, dtemp, dbase
        ),
    );
}

#[test]
fn gradient_bounds_hold_on_the_recorded_run() {
    let lab = load("s2_gradient.cfg");
    let run = lab.flow().unwrap();
    let analysis = lab.analyze(&run.frames).unwrap();
    let target = analysis.certs.target.as_ref().unwrap();
    let from_initial = analysis
        .verifications
        .iter()
        .find(|v| v.mode == VerifyMode::FromInitial)
        .unwrap();
    let windowed = analysis
        .verifications
        .iter()
        .find(|v| v.mode == VerifyMode::Windowed)
        .unwrap();
    let worst = from_initial.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    let ok = target.pass()
        && (target.condition.t_norm - 0.2).abs() < 1e-12
        && from_initial.skipped.is_none()
        && from_initial.pass
        && from_initial.rows.len() == run.frames.len()
        && worst > 0.0
        && windowed.skipped.is_none()
        && windowed.pass
        && windowed.rows.len() == 3;
    verdict(
        6,
        "gradient bounds",
        ok,
        &format!(
            "coupling norm {:.2} under threshold {:.2}; initial-data bound holds on {} frames, worst margin {:.3e} > 0; windowed bound holds at 3 window lengths",
            target.condition.t_norm,
            target.smallness_threshold,
            from_initial.rows.len(),
            worst
        ),
    );
}

#[test]
fn drift_dominated_run_decays_to_a_constant_map() {
    let lab = load("liouville.cfg");
    let run = lab.flow().unwrap();
    let analysis = lab.analyze(&run.frames).unwrap();
    let decay = analysis
        .verifications
        .iter()
        .find(|v| v.mode == VerifyMode::Liouville)
        .unwrap();
    let last = run.frames.last().unwrap();
    let ok = analysis.constants.constancy_gate
        && decay.skipped.is_none()
        && decay.pass
        && last.sup_grad < 1e-6
        && last.coord_variance < 1e-8;
    verdict(
        7,
        "decay to a constant map",
        ok,
        &format!(
            "constancy gate on; terminal sup grad {:.2e} < 1e-6, terminal variance {:.2e} < 1e-8",
            last.sup_grad, last.coord_variance
        ),
    );
}

#[test]
fn backward_flow_inequality_verdicts_are_exact() {
    let taus = [0.0, 0.5, 1.0];
    let nodes = [0usize, 10, 30];
    let flat = DomainChart::flat_torus(2, 8).unwrap();
    let flat_rep = flat.check_backward_super_ricci(&taus, &nodes).unwrap();

    let grid = PeriodicGrid::square(2, 8).unwrap();
    let equality =
        DomainChart::new(grid, MetricFamily::ScaledSphere { radius: 1.0, rate: 2.0 }).unwrap();
    let eq_rep = equality.check_backward_super_ricci(&taus, &nodes).unwrap();

    let grid = PeriodicGrid::square(2, 8).unwrap();
    let expanding = DomainChart::new(grid, MetricFamily::ConformalTorus { rate: 1.0 }).unwrap();
    let exp_rep = expanding.check_backward_super_ricci(&taus, &nodes).unwrap();

    let ok = flat_rep.pass
        && flat_rep.worst_margin.abs() < 1e-12
        && eq_rep.pass
        && eq_rep.worst_margin.abs() < 1e-10
        && !exp_rep.pass
        && exp_rep.worst_margin < 0.0;
    verdict(
        8,
        "backward flow inequality",
        ok,
        &format!(
            "static margin {:.1e}, equality-case margin {:.1e}, expanding chart rejected (margin {:.2})",
            flat_rep.worst_margin, eq_rep.worst_margin, exp_rep.worst_margin
        ),
    );
}

#[test]
fn constants_engine_reproduces_the_arithmetic_oracles() {
    let forward = ConstantsInputs {
        a: 1.0,
        m1: 0.8660254037844386,
        m3: 0.5,
        q: 0.3,
        sup_grad_u0: 1.0,
        ..ConstantsInputs::default()
    };
    let rep = evaluate_constants(&forward).unwrap();
    let backward = ConstantsInputs {
        q: 0.5,
        m3: 0.3,
        eps: Some(0.05),
        r: 1e3,
        lambda: 1e3,
        ..ConstantsInputs::default()
    };
    let back = evaluate_constants(&backward).unwrap();

    let worst = [
        rel(rep.k1, 1.5216835016835017),
        rel(rep.k2, 0.51961524227066319),
        rel(rep.bound_windowed.unwrap(), 40.392587404435005),
        rel(rep.bound_from_initial.unwrap(), 5.4364260191275036),
        rel(rep.bound_complete.unwrap(), 1.7112805919528822),
        rel(back.bound_backward_omega.unwrap(), 0.0067809376290125476),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);

    // forward fixture has no coupling tensor, so the decoupled closed form
    // must hold bit for bit
    let bitwise = rep.k2.to_bits() == (2.0 * forward.q * forward.m1).to_bits();

    let ok = worst <= 1e-9 && bitwise;
    verdict(
        9,
        "constants engine",
        ok,
        &format!("worst relative error {worst:.2e} <= 1e-9 over 6 pinned values; decoupled reduction bitwise"),
    );
}

#[test]
fn repeated_runs_write_identical_artifact_bytes() {
    let base = std::env::temp_dir().join(format!("vtflow-acceptance-{}", std::process::id()));
    let dirs = [base.join("first"), base.join("second")];
    for dir in &dirs {
        std::fs::create_dir_all(dir).unwrap();
        let lab = load("s2_gradient.cfg");
        run_all(&lab, dir).unwrap();
    }
    let files =
        [FRAMES_FILE, FINAL_STATE_FILE, CONSTANTS_FILE, VERIFICATION_FILE, SUMMARY_FILE];
    let identical = files.iter().all(|file| {
        let a = std::fs::read(dirs[0].join(file)).unwrap();
        let b = std::fs::read(dirs[1].join(file)).unwrap();
        a == b
    });
    std::fs::remove_dir_all(&base).ok();
    verdict(
        10,
        "artifact determinism",
        identical,
        &format!("{} artifacts byte-identical across repeated runs of the same scenario", files.len()),
    );
}
