use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vtflow_core::pipeline::{self, Lab};
use vtflow_core::report;
use vtflow_core::{Error, Result};

/// Laboratory for VT-harmonic map heat flow: marches the flow on periodic
/// chart families, certifies the geometric hypotheses behind the explicit
/// gradient bounds, and verifies recorded runs against those bounds.
#[derive(Parser)]
#[command(name = "vtflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Use the tighter backward denominator (6 eps instead of 5 eps).
    #[arg(long, global = true)]
    strict_proof: bool,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory artifacts are written into.
    #[arg(long, default_value = ".", global = true)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Certify, march the flow, assemble constants, verify, write artifacts.
    Run { scenario: PathBuf },
    /// Run the certification stages and print their verdicts.
    Certify { scenario: PathBuf },
    /// Certify the cutoff profile and write cutoff.csv.
    Cutoff { scenario: PathBuf },
    /// March the flow and write frames.csv and final_state.csv.
    Flow { scenario: PathBuf },
    /// Probe space-time distances from the base point and write reduced.csv.
    Reduced { scenario: PathBuf },
    /// Recompute constants and verify previously recorded frames.
    Verify { scenario: PathBuf, frames: PathBuf },
}

fn load(cli: &Cli, scenario: &Path) -> Result<Lab> {
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::invariant(format!("cannot create {}: {e}", cli.out.display())))?;
    Lab::load(scenario, cli.strict_proof, cli.seed)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { scenario } => {
            let lab = load(cli, scenario)?;
            let (_, analysis) = pipeline::run_all(&lab, &cli.out)?;
            print!("{}", analysis.summary);
            analysis.verification_error()
        }
        Command::Certify { scenario } => {
            let lab = load(cli, scenario)?;
            let certs = lab.certify()?;
            print!("{}", pipeline::certificates_text(&lab, &certs));
            certs.verdict()
        }
        Command::Cutoff { scenario } => {
            let lab = load(cli, scenario)?;
            let cert = lab.cutoff_certificate()?;
            report::write_cutoff_csv(&cli.out.join(pipeline::CUTOFF_FILE), &cert)?;
            println!(
                "cutoff: pass={} alpha={} c_alpha={} c_half={} c_three_quarters={} d_temporal={} c0={}",
                cert.pass,
                cert.alpha,
                cert.c_alpha,
                cert.c_half,
                cert.c_three_quarters,
                cert.d_temporal,
                cert.c_base
            );
            if cert.pass {
                Ok(())
            } else {
                Err(Error::Certification("cutoff certificate failed".into()))
            }
        }
        Command::Flow { scenario } => {
            let lab = load(cli, scenario)?;
            let certs = lab.certify()?;
            certs.verdict()?;
            let run = lab.flow()?;
            pipeline::write_flow_output(&cli.out, &lab, &run)?;
            println!(
                "frames: {} final_time={} final_sup_grad={}",
                run.frames.len(),
                run.final_state.time,
                run.frames.last().map(|f| f.sup_grad).unwrap_or(0.0)
            );
            Ok(())
        }
        Command::Reduced { scenario } => {
            let lab = load(cli, scenario)?;
            let rows = lab.reduced_table()?;
            report::write_reduced_csv(&cli.out.join(pipeline::REDUCED_FILE), lab.chart.dim(), &rows)?;
            for row in &rows {
                println!(
                    "probe x0={} tau_bar={} l={} ell={} dfrak={} converged={}",
                    row.x[0], row.tau_bar, row.l, row.ell, row.dfrak, row.converged
                );
            }
            Ok(())
        }
        Command::Verify { scenario, frames } => {
            let lab = load(cli, scenario)?;
            let rows = report::read_frames_csv(frames)?;
            let analysis = lab.analyze(&rows)?;
            pipeline::write_analysis(&cli.out, &lab, &analysis)?;
            print!("{}", analysis.summary);
            analysis.verification_error()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
