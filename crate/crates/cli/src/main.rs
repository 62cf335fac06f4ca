use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use membrane_ident::plate_model::{build_parameter_matrix, SensorDesign};
use membrane_ident::static_correlate::StaticSweep;
use membrane_ident::surrogate::{fit_inverse, InverseSurrogate, DEFAULT_MAX_DEGREE};
use membrane_ident::units::{parse_grid, parse_quantity, Dimension, MEGAPASCAL, MICROMETRE};
use membrane_ident::wafer::{
    export_report, read_report_csv, run_characterization, run_wafer, Calibration, ReportFormat, WaferSpec,
};
use membrane_ident::Error;

#[derive(Parser)]
#[command(
    name = "membrane-ident",
    version,
    about = "Wafer-level identification of pressure-sensor membranes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the inverse surrogate over a thickness/stress grid.
    BuildSurrogate {
        /// sensor design JSON; the built-in 1300 um design when omitted
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long, default_value = "14:16:0.25um")]
        z_grid: String,
        #[arg(long, default_value = "25:75:6.25MPa")]
        s_grid: String,
        #[arg(long, default_value_t = 4)]
        modes: usize,
        #[arg(long, default_value_t = 0.001)]
        accuracy: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_DEGREE)]
        max_degree: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the passivation stress on a subset of dies.
    Characterize {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long, default_value_t = 24)]
        dies: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify the thickness of every die and classify it.
    WaferTest {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Static pressure sweeps of the valid dies of a report, with gain adaptation.
    StaticCorrelate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// sweep end pressure, e.g. 0.5bar
        #[arg(long)]
        max_pressure: Option<String>,
    },
    /// Write the simulated spectrum of one die.
    SimulateResponse {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        die: String,
        #[arg(long)]
        out: PathBuf,
        /// e.g. 10kHz
        #[arg(long)]
        f_min: Option<String>,
        /// e.g. 1MHz
        #[arg(long)]
        f_max: Option<String>,
    },
}

/// Outcome of a command that ran to completion.
enum Verdict {
    Pass,
    Fail(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail(msg)) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<Verdict, Error> {
    match cmd {
        Command::BuildSurrogate {
            design,
            z_grid,
            s_grid,
            modes,
            accuracy,
            max_degree,
            out,
        } => build_surrogate(design.as_deref(), &z_grid, &s_grid, modes, accuracy, max_degree, &out),
        Command::Characterize {
            spec,
            surrogate,
            dies,
            out,
        } => {
            let spec = WaferSpec::load(&spec)?;
            let surrogate = InverseSurrogate::load(&surrogate)?;
            let cal = run_characterization(&spec, &surrogate, dies)?;
            cal.save(&out)?;
            println!(
                "calibrated stress {:.3} MPa from {} valid of {} dies",
                cal.calibrated_stress_mpa, cal.valid_dies, cal.dies_used
            );
            if let Some(e) = cal.recommended_max_eie_um {
                println!("recommended thickness EIE limit {e:.4} um");
            }
            Ok(Verdict::Pass)
        }
        Command::WaferTest {
            spec,
            surrogate,
            calibration,
            report,
            json,
        } => {
            let spec = WaferSpec::load(&spec)?;
            let surrogate = InverseSurrogate::load(&surrogate)?;
            let cal = Calibration::load(&calibration)?;
            let rep = run_wafer(&spec, &surrogate, &cal)?;
            export_report(&rep, ReportFormat::Csv, &report)?;
            if let Some(j) = json {
                export_report(&rep, ReportFormat::Json, &j)?;
            }
            let s = &rep.summary;
            for (status, n) in &s.counts {
                println!("{status:>18}: {n}");
            }
            if let (Some(m), Some(sd)) = (s.thickness_mean_um, s.thickness_std_um) {
                println!("thickness of valid dies: {m:.4} um +- {sd:.4} um");
            }
            println!(
                "false positives {}, false negatives {}",
                s.false_positives, s.false_negatives
            );
            let errors = s.counts.get("error").copied().unwrap_or(0);
            Ok(if errors > 0 {
                Verdict::Fail(format!("{errors} dies could not be processed"))
            } else {
                Verdict::Pass
            })
        }
        Command::StaticCorrelate {
            spec,
            report,
            out,
            max_pressure,
        } => static_correlate(&spec, &report, &out, max_pressure.as_deref()),
        Command::SimulateResponse {
            spec,
            die,
            out,
            f_min,
            f_max,
        } => {
            let mut spec = WaferSpec::load(&spec)?;
            if let Some(f) = f_min {
                spec.file.acquisition.f_min_hz = parse_quantity(&f, Dimension::Frequency)?;
            }
            if let Some(f) = f_max {
                spec.file.acquisition.f_max_hz = parse_quantity(&f, Dimension::Frequency)?;
            }
            let site = spec.site(&die)?;
            spec.simulate(site)?.save_csv(&out)?;
            Ok(Verdict::Pass)
        }
    }
}

fn build_surrogate(
    design: Option<&Path>,
    z_grid: &str,
    s_grid: &str,
    modes: usize,
    accuracy: f64,
    max_degree: u32,
    out: &Path,
) -> Result<Verdict, Error> {
    let design = match design {
        Some(p) => SensorDesign::load(p)?,
        None => SensorDesign::default(),
    };
    let z = parse_grid(z_grid, Dimension::Length)?;
    let s = parse_grid(s_grid, Dimension::Pressure)?;
    let pm = build_parameter_matrix(&design, &z, &s, modes)?;
    let fit = fit_inverse(&pm, accuracy, max_degree)?;
    fit.surrogate.save(out)?;
    let sur = &fit.surrogate;
    println!(
        "{} combinations over {} x {} nodes, max training error {:.3e}",
        sur.combos.len(),
        z.len(),
        s.len(),
        sur.max_fit_error()
    );
    for c in &sur.combos {
        println!(
            "  modes {:?}: degree {}",
            c.combo.modes,
            c.surfaces.iter().map(|s| s.degree).max().unwrap_or(0)
        );
    }
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if fit.is_clean() {
        Verdict::Pass
    } else {
        Verdict::Fail(format!("{} fit warnings", fit.warnings.len()))
    })
}

fn static_correlate(spec: &Path, report: &Path, out: &Path, max_pressure: Option<&str>) -> Result<Verdict, Error> {
    let mut spec = WaferSpec::load(spec)?;
    if let Some(p) = max_pressure {
        spec.file.static_test.max_pressure_bar = parse_quantity(p, Dimension::Pressure)? / 1e5;
        spec.file.static_test.validate()?;
    }
    let rows = read_report_csv(report)?;
    let file = std::fs::File::create(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(StaticSweep::csv_header(true))?;
    let limit = spec.file.static_test.max_error;
    let (mut count, mut worst, mut failing) = (0usize, 0.0f64, Vec::new());
    for row in rows.iter().filter(|r| r.status == "valid") {
        let (Some(z), Some(s)) = (row.thickness_um, row.stress_mpa) else {
            continue;
        };
        let site = spec.site(&row.die_id)?;
        let (sweep, rep) = spec.static_correlate(site, (z * MICROMETRE, s * MEGAPASCAL))?;
        sweep.write_csv(&mut w, Some(&row.die_id))?;
        count += 1;
        worst = worst.max(rep.max_rel_voltage_error);
        if rep.max_rel_voltage_error >= limit {
            failing.push(row.die_id.clone());
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    println!(
        "{count} valid dies correlated, worst relative voltage error {:.2} %",
        100.0 * worst
    );
    Ok(if failing.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail(format!(
            "{} dies exceed {:.1} %: {}",
            failing.len(),
            100.0 * limit,
            failing.join(", ")
        ))
    })
}
