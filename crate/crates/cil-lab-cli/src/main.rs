//! Command-line driver for the class-incremental learning laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cil_lab::data::{gaussian_mixture, MixtureSpec};
use cil_lab::engine::{
    run_oracle_experiment, run_protocol, run_spectrum_sweep, ProtocolConfig, SweepValues,
};
use cil_lab::error::Error;
use cil_lab::report::{fmt_f64, spectra_csv, write_atomic, write_json, write_run_artifacts};

mod checks;

#[derive(Parser)]
#[command(
    name = "cil-lab",
    about = "Desk-scale class-incremental learning experiments with class-wise decorrelation",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one class-incremental protocol and write its artifacts.
    Run(RunArgs),
    /// Run the protocol across decorrelation coefficients and seeds.
    Sweep(SweepArgs),
    /// Train an oracle jointly, then compare regularized vs plain runs.
    Oracle(OracleArgs),
    /// Single-phase spectrum sweeps over class counts or coefficients.
    Spectrum(SpectrumArgs),
    /// Generate a synthetic dataset as CSV (train file plus .test.csv).
    GenData(GenDataArgs),
    /// Check analytic gradients of every loss against finite differences.
    GradCheck(GradCheckArgs),
    /// Verify the spectrum-variance identity on random correlation matrices.
    PropCheck(PropCheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file mirroring the protocol config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the decorrelation coefficient.
    #[arg(long)]
    eta: Option<f64>,
    /// Overrides the oracle-mimic coefficient.
    #[arg(long)]
    beta: Option<f64>,
    /// Overrides epochs per phase.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<ProtocolConfig, Error> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?
            }
            None => {
                return Err(Error::Config(
                    "this command needs --config pointing at a TOML protocol file".into(),
                ))
            }
        };
        apply_overrides(&mut config, self);
        Ok(config)
    }
}

fn apply_overrides(config: &mut ProtocolConfig, args: &ConfigArgs) {
    if let Some(seed) = args.seed {
        config.run_seed = seed;
    }
    if let Some(eta) = args.eta {
        config.objective.eta = eta;
    }
    if let Some(beta) = args.beta {
        config.objective.beta = beta;
    }
    if let Some(epochs) = args.epochs {
        config.epochs_per_phase = epochs;
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Also write unit-normalized representation coordinates.
    #[arg(long)]
    export_embeddings: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated decorrelation coefficients to compare.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
    etas: Vec<f64>,
    /// Seeds per coefficient; member k offsets every seed by k.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// What to vary: "classes" or "eta".
    #[arg(long)]
    variable: String,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Train CSV path; the test split lands next to it as `<out>.test.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PropCheckArgs {
    /// Largest matrix dimension to test (dimensions 2..=dim are drawn).
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 1993)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (including bare invocation) exit 1; clap's
            // successful help/version paths exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::GradCheck(args) => checks::cmd_grad_check(args.trials, args.seed),
        Command::PropCheck(args) => checks::cmd_prop_check(args.dim, args.trials, args.seed),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let config = args.common.load()?;
    let output = run_protocol(&config)?;
    write_run_artifacts(&args.common.out, &output, args.export_embeddings)?;
    println!(
        "run complete: {} phases, average incremental accuracy {:.4}% ({:.1}s)",
        output.report.phases.len(),
        output.report.average_incremental_accuracy,
        output.report.wall_clock_secs,
    );
    println!("artifacts in {}", args.common.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let base = args.common.load()?;
    if args.etas.len() < 2 {
        return Err(Error::Config("sweep needs at least two --etas values".into()));
    }
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let mut rows = String::from("eta,seed,phase,accuracy,avg_incremental_accuracy\n");
    let mut reports = Vec::new();
    let mut means = Vec::new();
    for &eta in &args.etas {
        let mut abars = Vec::new();
        for k in 0..args.seeds {
            let mut cfg = base.with_seed_offset(k);
            cfg.objective.eta = eta;
            let report = run_protocol(&cfg)?.report;
            for phase in &report.phases {
                rows.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fmt_f64(eta),
                    k,
                    phase.phase,
                    fmt_f64(phase.accuracy),
                    fmt_f64(report.average_incremental_accuracy),
                ));
            }
            abars.push(report.average_incremental_accuracy);
            reports.push(report);
        }
        means.push(abars.iter().sum::<f64>() / abars.len() as f64);
    }
    std::fs::create_dir_all(&args.common.out)?;
    write_atomic(&args.common.out.join("sweep.csv"), rows.as_bytes())?;
    let mut summary = String::from("eta,mean_avg_incremental_accuracy,delta_vs_first\n");
    for (i, &eta) in args.etas.iter().enumerate() {
        summary.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(eta),
            fmt_f64(means[i]),
            fmt_f64(means[i] - means[0]),
        ));
    }
    write_atomic(&args.common.out.join("sweep_summary.csv"), summary.as_bytes())?;
    write_json(&args.common.out.join("sweep.json"), &reports)?;
    for (i, &eta) in args.etas.iter().enumerate() {
        println!(
            "eta {eta}: mean avg incremental accuracy {:.4}% (delta {:+.4})",
            means[i],
            means[i] - means[0]
        );
    }
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Error> {
    let base = args.common.load()?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let mut experiments = Vec::new();
    let mut rows = String::from("seed,oracle_accuracy,phase,baseline,regularized,delta\n");
    for k in 0..args.seeds {
        let cfg = base.with_seed_offset(k);
        let exp = run_oracle_experiment(&cfg)?;
        for (i, delta) in exp.phase_deltas.iter().enumerate() {
            rows.push_str(&format!(
                "{},{},{},{},{},{}\n",
                k,
                fmt_f64(exp.oracle_accuracy),
                i,
                fmt_f64(exp.baseline.phases[i].accuracy),
                fmt_f64(exp.regularized.phases[i].accuracy),
                fmt_f64(*delta),
            ));
        }
        experiments.push(exp);
    }
    let mean_phase0 = experiments.iter().map(|e| e.initial_phase_delta).sum::<f64>()
        / experiments.len() as f64;
    let mean_later = experiments
        .iter()
        .map(|e| e.mean_later_phase_delta)
        .sum::<f64>()
        / experiments.len() as f64;
    std::fs::create_dir_all(&args.common.out)?;
    write_atomic(&args.common.out.join("oracle.csv"), rows.as_bytes())?;
    write_json(&args.common.out.join("oracle.json"), &experiments)?;
    println!(
        "oracle experiment over {} seeds: initial-phase delta {mean_phase0:+.4}, later-phase delta {mean_later:+.4}",
        args.seeds
    );
    Ok(())
}

fn cmd_spectrum(args: SpectrumArgs) -> Result<(), Error> {
    let base = args.common.load()?;
    let sweep = match args.variable.as_str() {
        "classes" => {
            let counts = args
                .values
                .iter()
                .map(|&v| {
                    if v.fract() != 0.0 || v < 0.0 {
                        Err(Error::Config(format!("class count {v} is not a whole number")))
                    } else {
                        Ok(v as usize)
                    }
                })
                .collect::<Result<Vec<usize>, Error>>()?;
            SweepValues::TrainClassCount(counts)
        }
        "eta" => SweepValues::Eta(args.values.clone()),
        other => {
            return Err(Error::Config(format!(
                "unknown sweep variable {other:?}; use \"classes\" or \"eta\""
            )))
        }
    };
    let report = run_spectrum_sweep(&base, &sweep, args.seeds)?;
    std::fs::create_dir_all(&args.common.out)?;

    let mut labeled = Vec::new();
    for points in &report.points {
        for p in points {
            labeled.push((format!("value{}_seed{}", p.value, p.seed_index), p));
        }
    }
    let csv = spectra_csv(labeled.iter().map(|(id, p)| (id.as_str(), p.spectra.as_slice())));
    write_atomic(&args.common.out.join("spectra.csv"), csv.as_bytes())?;

    let mut summary = String::from("value,mean_alpha_quarter,mean_conditional_mi\n");
    let values: Vec<f64> = match &report.values {
        SweepValues::TrainClassCount(c) => c.iter().map(|&v| v as f64).collect(),
        SweepValues::Eta(e) => e.clone(),
    };
    for (i, v) in values.iter().enumerate() {
        summary.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(*v),
            fmt_f64(report.mean_alpha_quarter[i]),
            fmt_f64(report.mean_conditional_mi[i]),
        ));
    }
    write_atomic(&args.common.out.join("spectrum_summary.csv"), summary.as_bytes())?;
    write_json(&args.common.out.join("spectrum.json"), &report)?;
    for (i, v) in values.iter().enumerate() {
        println!(
            "value {v}: alpha_(d/4) {:.4}, conditional-MI proxy {:.4}",
            report.mean_alpha_quarter[i], report.mean_conditional_mi[i]
        );
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let spec = MixtureSpec {
        num_classes: args.classes,
        input_dim: args.dim,
        train_per_class: args.per_class,
        test_per_class: args.test_per_class,
        center_scale: args.center_scale,
        noise_scale: args.noise_scale,
        seed: args.seed,
    };
    let (train, test) = gaussian_mixture(&spec)?;
    train.write_csv(&args.out)?;
    let test_path = test_companion_path(&args.out);
    test.write_csv(&test_path)?;
    println!(
        "wrote {} train rows to {} and {} test rows to {}",
        train.len(),
        args.out.display(),
        test.len(),
        test_path.display()
    );
    Ok(())
}

fn test_companion_path(train_path: &Path) -> PathBuf {
    let mut name = train_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    name.push_str(".test.csv");
    train_path.with_file_name(name)
}
