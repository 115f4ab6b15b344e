use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sia_core::config::{ExperimentConfig, Mode};
use sia_core::controller::phi_dot_min;
use sia_core::feasibility::{run_feasibility, FeasibilityReport, FeasibilityTable};
use sia_core::safety_index::SafetyIndexParam;
use sia_core::sim::{emit_outputs, measure_delta_d_max, run_all, summary_table, RunRecord};
use sia_core::sos::{CertificateDocument, CertificateMetadata, CertificateModel, CertificatePoint, DEFAULT_TOL};
use sia_core::synthesis::{adapt, synthesize, DgaTrace, SynthesisError};
use sia_core::sysid::{fit_params, generate_excitation, synthesize_log, ExcitationSpec, TrajectoryLog, DEFAULT_FRAC};

/// Exit status when a simulation records safety-failure events.
const EXIT_SAFETY_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "sia", version, about = "Safety index synthesis, adaptation and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); the shipped default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adapted,
    NonAdapted,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adapted => Mode::Adapted,
            ModeArg::NonAdapted => Mode::NonAdapted,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Search a certificate from the heuristic start for one payload.
    Synthesize {
        #[arg(long)]
        payload: Option<String>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Re-certify an existing certificate for another payload.
    Adapt {
        /// Certificate to start from.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        payload: String,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Sampled FI/FTC feasibility of a safety index under some dynamics.
    Feasibility {
        /// Certificate supplying k; defaults to the index payload's configured k.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Explicit gain, overriding everything else.
        #[arg(long)]
        k: Option<f64>,
        /// Payload whose safety index is evaluated.
        #[arg(long)]
        index: Option<String>,
        /// Payload whose dynamics are assumed; defaults to the index payload.
        #[arg(long)]
        dynamics: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Fit gains and drifts from a trajectory log.
    SysidFit {
        /// CSV log; when absent a synthetic log is generated.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Payload used for the synthetic log.
        #[arg(long, default_value = "3.5")]
        synthetic: String,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        /// Velocity noise of the synthetic log.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// LOWESS fraction; omit for the raw fit.
        #[arg(long)]
        frac: Option<f64>,
    },
    /// Run the configured courses.
    Simulate {
        /// Restrict to one course.
        #[arg(long)]
        course: Option<String>,
    },
    /// Both modes on every course plus the feasibility matrix.
    Report {
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::builtin(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.dga.seed = seed;
    }
    if let Some(m) = common.mode {
        cfg.mode = m.into();
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn save_certificate(
    out: &Path,
    name: &str,
    cp: &CertificatePoint,
    model: &CertificateModel,
    trace: &DgaTrace,
    payload: &str,
    source: &str,
) -> Result<bool> {
    let minima = model.min_minors(cp);
    let min_minor = minima.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let valid = model.is_valid(cp, DEFAULT_TOL);
    let meta = CertificateMetadata {
        payload: Some(payload.to_string()),
        valid,
        min_minor,
        iterations: trace.iterations(),
        wall_ms: trace.duration.as_secs_f64() * 1e3,
        source: source.to_string(),
    };
    let doc = CertificateDocument::new(cp, model, DEFAULT_TOL, meta);
    fs::create_dir_all(out)?;
    doc.save(out.join(format!("{name}.json")))?;
    write(&out.join(format!("{name}_trace.csv")), trace.to_csv())?;
    println!(
        "{name}: k = {:.5}, min minor = {min_minor:.4e}, valid = {valid}, {} iterations, {:.2} s",
        cp.k,
        trace.iterations(),
        trace.duration.as_secs_f64()
    );
    Ok(valid)
}

fn finish_dga(
    out: &Path,
    name: &str,
    model: &CertificateModel,
    payload: &str,
    source: &str,
    result: Result<(CertificatePoint, DgaTrace), SynthesisError>,
) -> Result<()> {
    match result {
        Ok((cp, trace)) => {
            save_certificate(out, name, &cp, model, &trace, payload, source)?;
            Ok(())
        }
        Err(SynthesisError::NonConvergence { best, trace, target, .. }) => {
            save_certificate(out, name, &best, model, &trace, payload, source)?;
            bail!("no certificate reached the target minor {target:.1e}; best point saved as invalid")
        }
    }
}

fn cmd_synthesize(cfg: &ExperimentConfig, out: &Path, payload: Option<String>, max_iters: Option<usize>) -> Result<()> {
    let label = payload.unwrap_or_else(|| cfg.baseline.clone());
    let rho = cfg.payload(&label)?.rho;
    let mut dga = cfg.dga;
    if let Some(n) = max_iters {
        dga.max_iters = n;
    }
    let model = CertificateModel::new(rho, cfg.bounds);
    let name = format!("certificate_{label}");
    finish_dga(out, &name, &model, &label, "synthesize", synthesize(&rho, &cfg.bounds, &dga, None))
}

fn cmd_adapt(cfg: &ExperimentConfig, out: &Path, from: &Path, label: &str, max_iters: Option<usize>) -> Result<()> {
    let prev = CertificateDocument::load(from).with_context(|| format!("loading {}", from.display()))?;
    let rho = cfg.payload(label)?.rho;
    let mut dga = cfg.dga;
    if let Some(n) = max_iters {
        dga.max_iters = n;
    }
    let model = CertificateModel::new(rho, cfg.bounds);
    let name = format!("certificate_{label}");
    let result = adapt(&prev.point(), &rho, &cfg.bounds, &dga);
    finish_dga(out, &name, &model, label, "adapt", result)
}

fn feasibility_report(cfg: &ExperimentConfig, k: f64, index: &str, dynamics: &str, n: usize) -> Result<FeasibilityReport> {
    let rho = cfg.payload(dynamics)?.rho;
    let mut p = SafetyIndexParam::new(k).with_d_min(cfg.bounds.d_min);
    p.eta = cfg.eta;
    let mut report = run_feasibility(&p, &rho, &cfg.bounds, n, cfg.seed);
    report.label = Some(format!("phi_{index} | rho_{dynamics}"));
    Ok(report)
}

fn cmd_feasibility(
    cfg: &ExperimentConfig,
    out: &Path,
    certificate: Option<PathBuf>,
    k: Option<f64>,
    index: Option<String>,
    dynamics: Option<String>,
    samples: Option<usize>,
) -> Result<()> {
    let index = index.unwrap_or_else(|| cfg.baseline.clone());
    let k = match (k, certificate) {
        (Some(k), _) => k,
        (None, Some(path)) => CertificateDocument::load(&path)?.k,
        (None, None) => cfg.payload(&index)?.k,
    };
    let dynamics = dynamics.unwrap_or_else(|| index.clone());
    let n = samples.unwrap_or(cfg.feasibility_samples);
    let start = Instant::now();
    let report = feasibility_report(cfg, k, &index, &dynamics, n)?;
    log::info!("feasibility of {n} samples took {:?}", start.elapsed());
    let table = FeasibilityTable(std::slice::from_ref(&report)).to_string();
    print!("{table}");
    write(&out.join("feasibility.json"), serde_json::to_string_pretty(&report)?)?;
    write(&out.join("feasibility.txt"), table)?;
    Ok(())
}

fn cmd_sysid(
    cfg: &ExperimentConfig,
    out: &Path,
    log_path: Option<PathBuf>,
    synthetic: &str,
    duration: f64,
    noise: f64,
    frac: Option<f64>,
) -> Result<()> {
    let log = match log_path {
        Some(p) => TrajectoryLog::load(&p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let rho = cfg.payload(synthetic)?.rho;
            let log = synthesize_log(&rho, &generate_excitation(duration, &ExcitationSpec::default()), noise, cfg.seed);
            fs::create_dir_all(out)?;
            log.save(out.join("synthetic_log.csv"))?;
            log
        }
    };
    // noisy data without an explicit fraction gets the default smoother
    let frac = frac.or((noise > 0.0).then_some(DEFAULT_FRAC));
    let fit = fit_params(&log, frac)?;
    println!("rho = {:?}", fit.rho.to_array());
    println!("R^2 = {:?} (mean {:.3})", fit.r2_per_row, fit.mean_r2());
    write(&out.join("fit.json"), serde_json::to_string_pretty(&fit)?)?;
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, out: &Path, mode: Mode, course: Option<&str>) -> Result<Vec<RunRecord>> {
    let records = match course {
        Some(name) => {
            let c = cfg.course(name).with_context(|| format!("no course named {name:?}"))?;
            vec![sia_core::sim::run_course(cfg, c, mode)?]
        }
        None => run_all(cfg, mode)?,
    };
    for rec in &records {
        emit_outputs(rec, &out.join(mode.to_string()).join(&rec.course))?;
        log::info!("{}: measured per-step distance change {:.4} m", rec.course, measure_delta_d_max(rec));
    }
    Ok(records)
}

fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, course: Option<String>) -> Result<ExitCode> {
    let records = simulate(cfg, out, cfg.mode, course.as_deref())?;
    let table = summary_table(&records);
    print!("{table}");
    write(&out.join(cfg.mode.to_string()).join("summary.txt"), &table)?;
    let events: usize = records.iter().map(|r| r.events.len()).sum();
    if events > 0 {
        eprintln!("{events} safety-failure event(s) recorded");
        return Ok(ExitCode::from(EXIT_SAFETY_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(cfg: &ExperimentConfig, out: &Path, samples: Option<usize>) -> Result<()> {
    let mut text = String::new();
    let mut all = Vec::new();
    for mode in [Mode::Adapted, Mode::NonAdapted] {
        all.extend(simulate(cfg, out, mode, None)?);
    }
    text.push_str(&summary_table(&all));
    text.push('\n');

    let n = samples.unwrap_or(cfg.feasibility_samples);
    let base = cfg.baseline_payload()?;
    let mut reports = Vec::new();
    for p in &cfg.payloads {
        reports.push(feasibility_report(cfg, base.k, &base.label, &p.label, n)?);
        if p.label != base.label {
            reports.push(feasibility_report(cfg, p.k, &p.label, &p.label, n)?);
        }
    }
    text.push_str(&FeasibilityTable(&reports).to_string());

    // worst-case phi_dot at rest next to the obstacle, per payload
    text.push('\n');
    for p in &cfg.payloads {
        let s = sia_core::dynamics::State::new(cfg.bounds.d_min, 0.0, 0.0, 0.0, 0.0);
        let (m, _) = phi_dot_min(&s, &p.rho, p.k, &cfg.bounds);
        text.push_str(&format!("payload {:>4}: k = {:.5}, min phi_dot at rest on the clearance circle = {m:.4}\n", p.label, p.k));
    }
    print!("{text}");
    write(&out.join("report.txt"), text)?;
    write(&out.join("feasibility.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Synthesize { payload, max_iters } => cmd_synthesize(&cfg, out, payload, max_iters)?,
        Command::Adapt { from, payload, max_iters } => cmd_adapt(&cfg, out, &from, &payload, max_iters)?,
        Command::Feasibility { certificate, k, index, dynamics, samples } => {
            cmd_feasibility(&cfg, out, certificate, k, index, dynamics, samples)?
        }
        Command::SysidFit { log, synthetic, duration, noise, frac } => {
            cmd_sysid(&cfg, out, log, &synthetic, duration, noise, frac)?
        }
        Command::Simulate { course } => return cmd_simulate(&cfg, out, course),
        Command::Report { samples } => cmd_report(&cfg, out, samples)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
