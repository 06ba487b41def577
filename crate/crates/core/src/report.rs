use crate::cutoff::CutoffCertificate;
use crate::domain::DomainChart;
use crate::error::{Error, Result};
use crate::estimate::{ConstantsReport, VerificationReport};
use crate::flow::{FrameRow, MapState};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// First line of every CSV artifact; the reader rejects files without it.
pub const CSV_MAGIC: &str = "# vtflow-csv v1";

pub const FRAMES_HEADER: &str = "time,sup_e,sup_omega,sup_omega_half_rball,total_energy,\
sup_grad,sup_grad_rball,sup_grad_half_rball,coord_variance,bochner_residual";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn parse_opt(field: &str, line: usize, col: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse { line, col, msg: format!("bad float `{field}`") })
}

fn parse_field(field: &str, line: usize, col: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Parse { line, col, msg: format!("bad float `{field}`") })
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| Error::invariant(format!("cannot write {}: {e}", path.display())))
}

pub fn frames_to_csv(frames: &[FrameRow]) -> String {
    let mut out = String::new();
    out.push_str(CSV_MAGIC);
    out.push('\n');
    out.push_str(FRAMES_HEADER);
    out.push('\n');
    for f in frames {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            f.time,
            f.sup_e,
            fmt_opt(f.sup_omega),
            fmt_opt(f.sup_omega_half_rball),
            f.total_energy,
            f.sup_grad,
            f.sup_grad_rball,
            f.sup_grad_half_rball,
            f.coord_variance,
            fmt_opt(f.bochner),
        );
    }
    out
}

pub fn write_frames_csv(path: &Path, frames: &[FrameRow]) -> Result<()> {
    write_file(path, &frames_to_csv(frames))
}

pub fn read_frames_csv(path: &Path) -> Result<Vec<FrameRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        line: 0,
        col: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    frames_from_csv(&text)
}

pub fn frames_from_csv(text: &str) -> Result<Vec<FrameRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == CSV_MAGIC => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                col: 1,
                msg: format!("missing `{CSV_MAGIC}` marker"),
            })
        }
    }
    match lines.next() {
        Some((_, header)) if header == FRAMES_HEADER => {}
        _ => {
            return Err(Error::Parse { line: 2, col: 1, msg: "unexpected frame header".into() })
        }
    }
    let mut frames = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                col: 1,
                msg: format!("expected 10 columns, found {}", fields.len()),
            });
        }
        frames.push(FrameRow {
            time: parse_field(fields[0], line_no, 1)?,
            sup_e: parse_field(fields[1], line_no, 2)?,
            sup_omega: parse_opt(fields[2], line_no, 3)?,
            sup_omega_half_rball: parse_opt(fields[3], line_no, 4)?,
            total_energy: parse_field(fields[4], line_no, 5)?,
            sup_grad: parse_field(fields[5], line_no, 6)?,
            sup_grad_rball: parse_field(fields[6], line_no, 7)?,
            sup_grad_half_rball: parse_field(fields[7], line_no, 8)?,
            coord_variance: parse_field(fields[8], line_no, 9)?,
            bochner: parse_opt(fields[9], line_no, 10)?,
        });
    }
    Ok(frames)
}

pub fn constants_to_csv(report: &ConstantsReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_MAGIC);
    out.push('\n');
    out.push_str("name,value\n");
    let mut kv = |name: &str, value: String| {
        let _ = writeln!(out, "{name},{}", csv_field(&value));
    };
    let i = &report.inputs;
    kv("m", format!("{}", i.m));
    kv("a", format!("{}", i.a));
    kv("k", format!("{}", i.k));
    kv("m1", format!("{}", i.m1));
    kv("m2", format!("{}", i.m2));
    kv("m3", format!("{}", i.m3));
    kv("q", format!("{}", i.q));
    kv("norm_t", format!("{}", i.norm_t));
    kv("norm_grad_t", format!("{}", i.norm_grad_t));
    kv("v_sup", format!("{}", i.v_sup));
    kv("eps1", format!("{}", i.eps1));
    kv("eps2", format!("{}", i.eps2));
    kv("r", format!("{}", i.r));
    kv("lambda", format!("{}", i.lambda));
    kv("c0", format!("{}", i.c0));
    kv("c_half", format!("{}", i.c_half));
    kv("c_three_quarters", format!("{}", i.c_three_quarters));
    kv("d_temporal", format!("{}", i.d_temporal));
    kv("v_at_r", format!("{}", i.v_at_r));
    kv("sup_grad_u0", format!("{}", i.sup_grad_u0));
    kv("strict_proof", format!("{}", i.strict_proof));
    kv("k1", format!("{}", report.k1));
    kv("k2", format!("{}", report.k2));
    kv("c1", format!("{}", report.c1));
    kv("c2", format!("{}", report.c2));
    kv("c3", format!("{}", report.c3));
    kv("c4", format!("{}", report.c4));
    kv("c1_back", format!("{}", report.c1_back));
    kv("c2_back", format!("{}", report.c2_back));
    kv("eps3", format!("{}", report.eps3));
    kv("eps_used", format!("{}", report.eps_used));
    kv("bound_windowed", fmt_opt(report.bound_windowed));
    kv("bound_from_initial", fmt_opt(report.bound_from_initial));
    kv("bound_backward_omega", fmt_opt(report.bound_backward_omega));
    kv("bound_ball", fmt_opt(report.bound_ball));
    kv("bound_complete", fmt_opt(report.bound_complete));
    kv("k1_clamped", format!("{}", report.k1_clamped));
    kv("disc_clamped", format!("{}", report.disc_clamped));
    kv("m3_term_dropped", format!("{}", report.m3_term_dropped));
    kv("constancy_gate", format!("{}", report.constancy_gate));
    for note in &report.notes {
        kv("note", note.clone());
    }
    out
}

pub fn write_constants_csv(path: &Path, report: &ConstantsReport) -> Result<()> {
    write_file(path, &constants_to_csv(report))
}

pub fn verification_to_csv(reports: &[VerificationReport]) -> String {
    let mut out = String::new();
    out.push_str(CSV_MAGIC);
    out.push('\n');
    out.push_str("mode,check,time,measured,bound,margin,verdict\n");
    for rep in reports {
        if let Some(reason) = &rep.skipped {
            let _ = writeln!(out, "{},skipped,,,,,{}", rep.mode, csv_field(reason));
            continue;
        }
        for row in &rep.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rep.mode,
                row.check,
                row.time,
                row.measured,
                row.bound,
                row.margin,
                if row.pass { "pass" } else { "fail" }
            );
        }
    }
    out
}

pub fn write_verification_csv(path: &Path, reports: &[VerificationReport]) -> Result<()> {
    write_file(path, &verification_to_csv(reports))
}

pub fn final_state_to_csv(chart: &DomainChart, target_dim: usize, state: &MapState) -> String {
    let m = chart.dim();
    let mut out = String::new();
    out.push_str(CSV_MAGIC);
    out.push('\n');
    out.push_str("node");
    for a in 0..m {
        let _ = write!(out, ",x{a}");
    }
    for i in 0..target_dim {
        let _ = write!(out, ",u{i}");
    }
    out.push('\n');
    for flat in 0..chart.grid.len() {
        let _ = write!(out, "{flat}");
        let pos = chart.grid.position(flat);
        for v in pos {
            let _ = write!(out, ",{v}");
        }
        for v in state.node(target_dim, flat) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_final_state_csv(
    path: &Path,
    chart: &DomainChart,
    target_dim: usize,
    state: &MapState,
) -> Result<()> {
    write_file(path, &final_state_to_csv(chart, target_dim, state))
}

pub fn cutoff_to_csv(cert: &CutoffCertificate) -> String {
    let mut out = String::new();
    out.push_str(CSV_MAGIC);
    out.push('\n');
    out.push_str("alpha,c_alpha,c_half,c_three_quarters,d_temporal,c_base,samples,verdict\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        cert.alpha,
        cert.c_alpha,
        cert.c_half,
        cert.c_three_quarters,
        cert.d_temporal,
        cert.c_base,
        cert.samples,
        if cert.pass { "pass" } else { "fail" }
    );
    out
}

pub fn write_cutoff_csv(path: &Path, cert: &CutoffCertificate) -> Result<()> {
    write_file(path, &cutoff_to_csv(cert))
}

/// One probe row of the space-time distance table.
#[derive(Debug, Clone)]
pub struct ReducedRow {
    pub x: Vec<f64>,
    pub tau_bar: f64,
    pub l: f64,
    pub ell: f64,
    pub dfrak: f64,
    pub residual: f64,
    pub converged: bool,
}

pub fn reduced_to_csv(dim: usize, rows: &[ReducedRow]) -> String {
    let mut out = String::new();
    out.push_str(CSV_MAGIC);
    out.push('\n');
    for a in 0..dim {
        let _ = write!(out, "x{a},");
    }
    out.push_str("tau_bar,l_value,reduced_distance,parabolic_distance,residual,converged\n");
    for row in rows {
        for v in &row.x {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.tau_bar, row.l, row.ell, row.dfrak, row.residual, row.converged
        );
    }
    out
}

pub fn write_reduced_csv(path: &Path, dim: usize, rows: &[ReducedRow]) -> Result<()> {
    write_file(path, &reduced_to_csv(dim, rows))
}

pub fn write_summary(path: &Path, text: &str) -> Result<()> {
    write_file(path, text)
}
