//! Command-line frontend: dataset generation, training, simulation
//! presets, kernel benchmarking and dumps, and the verification suite.
//!
//! Exit-code contract: 0 on success (including runs that end in a
//! recorded instability), 1 on numerical failure, 2 on usage, format,
//! or IO errors. A `--config FILE` of `key=value` lines can stand in
//! for flags; flags given explicitly win. `GSNO_THREADS` caps the
//! worker count of parallel sections.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_kernel, loglog_slope, to_csv, BenchConfig};
use crate::control::{
    decay_check, lyapunov_trace, sandwich_check, ControllerSpec, LyapunovVariant, RunSummary,
};
use crate::error::{Error, Result};
use crate::formats::{
    dataset_to_bytes, kernel_table_to_bytes, load_dataset, load_model, metrics_to_csv, save_model,
    snapshots_to_bytes, trajectory_to_csv, write_atomic, KernelField, KernelTableFile,
};
use crate::grid::SpatialGrid;
use crate::kernels::{solve_k, VolterraConfig};
use crate::operator::{
    approximation_report, gen_dataset, train, DatasetConfig, LossSpec, ModelSpec, TargetVariant,
    TrainConfig,
};
use crate::plant::{inverse_transform, transform, SimConfig, Termination};
use crate::recirc::RecircFamily;
use crate::{control, kernels};

// ----- argument surface -------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "gsno",
    version,
    about = "Gain-scheduled backstepping workbench for a transport PDE with nonlinear recirculation"
)]
struct Cli {
    /// key=value file; each entry fills in the matching --key flag
    /// unless that flag was given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a kernel dataset over a (gamma, nu) sweep.
    GenDataset(GenDatasetArgs),
    /// Train the operator surrogate on a dataset file.
    Train(TrainArgs),
    /// Simulate the plant under a feedback law or a figure preset.
    Simulate(SimulateArgs),
    /// Time exact kernel solves against operator inference.
    Bench(BenchArgs),
    /// Dump exact and/or inferred kernel fields over an (x, nu) grid.
    Kernel(KernelArgs),
    /// Run the numerical property suites and emit a JSON report.
    Verify(VerifyArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VariantArg {
    KOnly,
    GainOnly,
    Full,
}

impl VariantArg {
    fn to_variant(self) -> TargetVariant {
        match self {
            VariantArg::KOnly => TargetVariant::KOnly,
            VariantArg::GainOnly => TargetVariant::GainOnly,
            VariantArg::Full => TargetVariant::Full,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LawArg {
    Open,
    Linear,
    ExactGs,
    NeuralGs,
    TableGs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LossArg {
    Mse,
    DerivPenalty,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PresetArg {
    Fig1OpenLoop,
    Fig2Roa,
    Fig3Linear,
    Fig5NeuralGs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FamilyArg {
    Constant,
    Chebyshev,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SourceArg {
    Exact,
    Neural,
    Both,
}

#[derive(Args, Debug)]
struct GenDatasetArgs {
    #[arg(long, default_value_t = 100)]
    n_gamma: usize,
    #[arg(long, default_value_t = 200)]
    n_nu: usize,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    gamma_min: f64,
    #[arg(long, default_value_t = 8.0, allow_hyphen_values = true)]
    gamma_max: f64,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    nu_min: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    nu_max: f64,
    #[arg(long, default_value_t = 101)]
    n_grid: usize,
    #[arg(long, default_value_t = 5.0)]
    amplitude: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::KOnly)]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    #[arg(long, short = 'o')]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, short = 'o')]
    output: PathBuf,
    /// Per-epoch train/test L2 CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LossArg::Mse)]
    loss: LossArg,
    /// Weight of the derivative penalty term (deriv-penalty loss only).
    #[arg(long, default_value_t = 0.1)]
    deriv_weight: f64,
    /// Target channels; must match the dataset when given.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Branch hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    branch_hidden: Option<Vec<usize>>,
    /// Trunk hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    trunk_hidden: Option<Vec<usize>>,
    /// Latent width of the branch/trunk readout.
    #[arg(long)]
    p: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario preset supplying law, gamma, u0, and horizon defaults.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    law: Option<LawArg>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Constant initial state u(x, 0) = u0.
    #[arg(long, allow_hyphen_values = true)]
    u0: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    amplitude: f64,
    /// Scheduling box half-width B: runs end when |u(0,t)| > B.
    #[arg(long, default_value_t = 5.0)]
    nu_box: f64,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    #[arg(long, default_value_t = 1e-2)]
    dx: f64,
    #[arg(long)]
    t_end: Option<f64>,
    /// Record every Nth step; default keeps about one record per 0.01
    /// time units.
    #[arg(long)]
    record_stride: Option<usize>,
    /// Trained operator file (neural-gs only).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of precomputed kernel slices (table-gs only).
    #[arg(long, default_value_t = 2001)]
    n_nu_table: usize,
    /// Trajectory CSV: t, control, trace, omega.
    #[arg(long, short = 'o')]
    output: PathBuf,
    /// Optional binary full-field snapshot dump.
    #[arg(long)]
    snapshots: Option<PathBuf>,
    /// Optional JSON run summary (also printed to stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Trained operator file for the inference side.
    #[arg(long)]
    model: PathBuf,
    /// Grid spacings to benchmark, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-2, 1e-3, 5e-4, 1e-4])]
    dx_list: Vec<f64>,
    #[arg(long, default_value_t = 5.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    nu: f64,
    #[arg(long, default_value_t = 5.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 11)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmups: usize,
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Fail (exit 1) unless the speedup column is strictly increasing.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct KernelArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Chebyshev)]
    family: FamilyArg,
    /// Constant family value beta(x, nu) = b.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    b: f64,
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 5.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 5.0)]
    nu_box: f64,
    #[arg(long, default_value_t = 1e-2)]
    dx: f64,
    /// Single scheduling value; ignored when --n-nu > 1.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    nu: f64,
    /// Number of nu samples spanning [--nu-min, --nu-max].
    #[arg(long, default_value_t = 1)]
    n_nu: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    nu_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    nu_max: f64,
    #[arg(long, value_enum, default_value_t = SourceArg::Exact)]
    source: SourceArg,
    /// Also write the exact-minus-neural difference field.
    #[arg(long)]
    diff: bool,
    /// Trained operator file (neural or both sources).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, short = 'o')]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Trained operator file; without it the neural suites are SKIPPED.
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON report path (always printed to stdout too).
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

// ----- entry points -----------------------------------------------------

/// Process entry point; returns the exit code.
pub fn run() -> i32 {
    run_with(std::env::args().collect())
}

/// Testable entry point over an explicit argv.
pub fn run_with(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Splice `key=value` config-file entries into argv as `--key value`
/// pairs, skipping keys whose flag is already present: explicit flags
/// always win.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(v) = a.strip_prefix("--config=") {
            path = Some(v.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path)?;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config file line {}: '{}' is not key=value",
                ln + 1,
                raw.trim()
            )));
        };
        let flag = format!("--{}", k.trim().replace('_', "-"));
        let assigned = format!("{flag}=");
        if !argv.iter().any(|a| *a == flag || a.starts_with(&assigned)) {
            argv.push(flag);
            argv.push(v.trim().to_string());
        }
    }
    Ok(argv)
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::GenDataset(a) => cmd_gen_dataset(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Kernel(a) => cmd_kernel(a),
        Cmd::Verify(a) => cmd_verify(a),
    }
}

// ----- gen-dataset -------------------------------------------------------

fn cmd_gen_dataset(a: GenDatasetArgs) -> Result<i32> {
    if a.gamma_min > a.gamma_max || a.nu_min > a.nu_max {
        return Err(Error::Config("empty parameter range".into()));
    }
    if !(0.0..=1.0).contains(&a.train_frac) {
        return Err(Error::Config(format!(
            "train fraction {} outside [0, 1]",
            a.train_frac
        )));
    }
    let cfg = DatasetConfig {
        n_gamma: a.n_gamma,
        n_nu: a.n_nu,
        gamma_range: (a.gamma_min, a.gamma_max),
        nu_range: (a.nu_min, a.nu_max),
        n_grid: a.n_grid,
        amplitude: a.amplitude,
        variant: a.variant.to_variant(),
        seed: a.seed,
        train_frac: a.train_frac,
    };
    let ds = gen_dataset(&cfg)?;
    write_atomic(&a.output, &dataset_to_bytes(&ds))?;
    println!(
        "wrote {} records ({} train, {} test, {} dropped) to {}",
        ds.records.len(),
        ds.train_idx.len(),
        ds.test_idx.len(),
        ds.dropped,
        a.output.display()
    );
    Ok(0)
}

// ----- train --------------------------------------------------------------

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let ds = load_dataset(&a.dataset)?;
    if let Some(v) = a.variant {
        if v.to_variant() != ds.variant {
            return Err(Error::Config(format!(
                "--variant {:?} does not match the dataset's target channels",
                v
            )));
        }
    }
    let mut spec = ModelSpec::reference(ds.variant);
    if let Some(b) = a.branch_hidden {
        spec.branch_hidden = b;
    }
    if let Some(t) = a.trunk_hidden {
        spec.trunk_hidden = t;
    }
    if let Some(p) = a.p {
        spec.p = p;
    }
    let loss = match a.loss {
        LossArg::Mse => LossSpec::Mse,
        LossArg::DerivPenalty => LossSpec::DerivativePenalty {
            weight: a.deriv_weight,
        },
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        lr_decay: a.lr_decay,
        seed: a.seed,
        loss,
        ..TrainConfig::default()
    };
    // On divergence this returns Err before anything is written, so a
    // previously trained model at the output path is left untouched.
    let (model, history) = train(&ds, &spec, &cfg)?;
    save_model(&model, &a.output)?;
    if let Some(m) = &a.metrics {
        write_atomic(m, metrics_to_csv(&history).as_bytes())?;
    }
    let last = history.last();
    println!(
        "trained {} parameters, {} epochs; final train L2 {:.3e}, test L2 {:.3e}; model at {}",
        model.param_count(),
        history.len(),
        last.map_or(f64::NAN, |h| h.train_l2),
        last.map_or(f64::NAN, |h| h.test_l2),
        a.output.display()
    );
    Ok(0)
}

// ----- simulate -----------------------------------------------------------

struct Scenario {
    law: LawArg,
    gamma: f64,
    u0: f64,
    t_end: f64,
}

/// Resolve the law/gamma/u0/horizon for a simulate invocation. Presets
/// provide defaults; any explicit flag overrides its preset value, and
/// the preset's initial constant follows the chosen gamma (3 or 5).
fn resolve_scenario(a: &SimulateArgs) -> Result<Scenario> {
    let (p_law, u0_for, p_gamma, p_t_end) = match a.preset {
        Some(PresetArg::Fig1OpenLoop) => {
            (Some(LawArg::Open), [0.38, 0.04], 3.0, 10.0)
        }
        Some(PresetArg::Fig2Roa) => (Some(LawArg::ExactGs), [0.37, 0.03], 3.0, 5.0),
        Some(PresetArg::Fig3Linear) => (Some(LawArg::Linear), [0.37, 0.03], 5.0, 5.0),
        Some(PresetArg::Fig5NeuralGs) => {
            (Some(LawArg::NeuralGs), [0.37, 0.03], 3.0, 5.0)
        }
        None => (None, [f64::NAN, f64::NAN], f64::NAN, 5.0),
    };
    let law = a.law.or(p_law).ok_or_else(|| {
        Error::Config("--law is required unless a preset is given".into())
    })?;
    let gamma = match a.gamma {
        Some(g) => g,
        None if a.preset.is_some() => p_gamma,
        None => return Err(Error::Config("--gamma is required unless a preset is given".into())),
    };
    let u0 = match a.u0 {
        Some(u) => u,
        None if a.preset.is_some() => {
            // Preset initial constants are keyed to the figure's two
            // plants, gamma = 3 and gamma = 5.
            if (gamma - 5.0).abs() < (gamma - 3.0).abs() {
                u0_for[1]
            } else {
                u0_for[0]
            }
        }
        None => return Err(Error::Config("--u0 is required unless a preset is given".into())),
    };
    let t_end = a.t_end.unwrap_or(p_t_end);
    Ok(Scenario { law, gamma, u0, t_end })
}

fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let sc = resolve_scenario(&a)?;
    if !(a.dx > 0.0 && a.dx <= 0.5) || !(a.dt > 0.0) || !(sc.t_end > 0.0) {
        return Err(Error::Config("dt, dx, and t-end must be positive (dx <= 0.5)".into()));
    }
    let n = (1.0 / a.dx).round() as usize + 1;
    let grid = SpatialGrid::new(n)?;
    let family = RecircFamily::chebyshev(a.amplitude, sc.gamma, a.nu_box);
    let vcfg = VolterraConfig::default();
    let spec = match sc.law {
        LawArg::Open => ControllerSpec::open_loop(),
        LawArg::Linear => ControllerSpec::linear(&family, &grid, &vcfg)?,
        LawArg::ExactGs => ControllerSpec::exact_gs(vcfg),
        LawArg::NeuralGs => {
            let path = a.model.as_ref().ok_or_else(|| {
                Error::Config("--model is required for the neural-gs law".into())
            })?;
            ControllerSpec::neural_gs(load_model(path)?)
        }
        LawArg::TableGs => ControllerSpec::table_gs(&family, &grid, &vcfg, a.n_nu_table)?,
    };
    let stride = a
        .record_stride
        .unwrap_or_else(|| ((0.01 / a.dt).round() as usize).max(1));
    let cfg = SimConfig::new(a.dt, sc.t_end).with_record_stride(stride);
    let u0 = vec![sc.u0; n];
    let run = control::run_closed_loop(u0, &family, &spec, &cfg)?;
    write_atomic(&a.output, trajectory_to_csv(&run.trajectory).as_bytes())?;
    if let Some(s) = &a.snapshots {
        write_atomic(s, &snapshots_to_bytes(&run.trajectory))?;
    }
    let summary = RunSummary::new(&spec, &run);
    let json = summary.to_json()?;
    if let Some(p) = &a.summary {
        write_atomic(p, json.as_bytes())?;
    }
    println!("{json}");
    // Instability is a recorded outcome, not a failure.
    Ok(0)
}

// ----- bench ----------------------------------------------------------------

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let model = load_model(&a.model)?;
    if a.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    let family = RecircFamily::chebyshev(a.amplitude, a.gamma, 5.0);
    let cfg = BenchConfig {
        repetitions: a.reps,
        warmups: a.warmups,
    };
    let rows = bench_kernel(&family, a.nu, &model, &a.dx_list, &cfg)?;
    let csv = to_csv(&rows);
    match &a.output {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if rows.len() >= 2 {
        println!(
            "exact-time log-log slope {:.3}, neural {:.3}",
            loglog_slope(&rows, |r| r.t_exact_s),
            loglog_slope(&rows, |r| r.t_neural_s)
        );
    }
    if a.check {
        let increasing = rows.windows(2).all(|w| w[1].speedup > w[0].speedup);
        if !increasing {
            eprintln!(
                "speedup column is not strictly increasing: {:?}",
                rows.iter().map(|r| r.speedup).collect::<Vec<_>>()
            );
            return Ok(1);
        }
        println!("speedup strictly increasing over {} rows", rows.len());
    }
    Ok(0)
}

// ----- kernel ----------------------------------------------------------------

fn cmd_kernel(a: KernelArgs) -> Result<i32> {
    if !(a.dx > 0.0 && a.dx <= 0.5) {
        return Err(Error::Config(format!("dx = {} out of range", a.dx)));
    }
    let n = (1.0 / a.dx).round() as usize + 1;
    let grid = SpatialGrid::new(n)?;
    let family = match a.family {
        FamilyArg::Constant => RecircFamily::constant(a.b, a.nu_box),
        FamilyArg::Chebyshev => RecircFamily::chebyshev(a.amplitude, a.gamma, a.nu_box),
    };
    let nus: Vec<f64> = if a.n_nu <= 1 {
        vec![a.nu]
    } else {
        if a.nu_min > a.nu_max {
            return Err(Error::Config("empty nu range".into()));
        }
        (0..a.n_nu)
            .map(|j| a.nu_min + (a.nu_max - a.nu_min) * j as f64 / (a.n_nu - 1) as f64)
            .collect()
    };
    let want_exact = a.source != SourceArg::Neural || a.diff;
    let want_neural = a.source != SourceArg::Exact || a.diff;
    let model = if want_neural {
        let path = a.model.as_ref().ok_or_else(|| {
            Error::Config("--model is required for neural kernel output".into())
        })?;
        Some(load_model(path)?)
    } else {
        None
    };
    let vcfg = VolterraConfig::default();
    let xs = grid.points();
    let cells = nus.len() * n;
    let mut exact_vals = Vec::with_capacity(if want_exact { cells } else { 0 });
    let mut neural_vals = Vec::with_capacity(if want_neural { cells } else { 0 });
    for &nu in &nus {
        let beta = family.beta_slice(&grid, nu)?;
        if want_exact {
            exact_vals.extend(solve_k(&beta, &grid, &vcfg)?);
        }
        if let Some(m) = &model {
            neural_vals.extend(m.infer_k(&beta, &xs)?);
        }
    }
    let mut fields = Vec::new();
    if a.diff {
        let diff: Vec<f64> = exact_vals
            .iter()
            .zip(&neural_vals)
            .map(|(e, p)| e - p)
            .collect();
        let scale = exact_vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let max = diff.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        println!(
            "max |k - k_hat| = {:.3e} ({:.1}% of kernel scale {:.3e})",
            max,
            100.0 * max / scale.max(f64::MIN_POSITIVE),
            scale
        );
        fields.push(KernelField {
            name: "diff".into(),
            values: diff,
        });
    }
    if want_exact {
        fields.insert(
            0,
            KernelField {
                name: "k_exact".into(),
                values: exact_vals,
            },
        );
    }
    if want_neural {
        let at = usize::from(want_exact);
        fields.insert(
            at,
            KernelField {
                name: "k_neural".into(),
                values: neural_vals,
            },
        );
    }
    let table = KernelTableFile { xs, nus, fields };
    write_atomic(&a.output, &kernel_table_to_bytes(&table))?;
    println!(
        "wrote {} field(s) over {} x {} grid to {}",
        table.fields.len(),
        table.xs.len(),
        table.nus.len(),
        a.output.display()
    );
    Ok(0)
}

// ----- verify ------------------------------------------------------------------

#[derive(serde::Serialize)]
struct SuiteResult {
    suite: &'static str,
    status: &'static str,
    detail: String,
}

fn suite(name: &'static str, res: Result<(bool, String)>) -> SuiteResult {
    match res {
        Ok((true, detail)) => SuiteResult {
            suite: name,
            status: "PASS",
            detail,
        },
        Ok((false, detail)) => SuiteResult {
            suite: name,
            status: "FAIL",
            detail,
        },
        Err(e) => SuiteResult {
            suite: name,
            status: "FAIL",
            detail: e.to_string(),
        },
    }
}

fn skipped(name: &'static str, why: &str) -> SuiteResult {
    SuiteResult {
        suite: name,
        status: "SKIPPED",
        detail: why.into(),
    }
}

/// Deterministic smooth test states: a few random Fourier modes.
fn smooth_states(grid: &SpatialGrid, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            grid.sample(|x| {
                a[0] + a[1] * (std::f64::consts::PI * x).sin()
                    + a[2] * (2.0 * std::f64::consts::PI * x).cos()
            })
        })
        .collect()
}

fn verify_constant_kernel() -> Result<(bool, String)> {
    let grid = SpatialGrid::new(1001)?;
    let family = RecircFamily::constant(1.0, 5.0);
    let beta = family.beta_slice(&grid, 0.0)?;
    let k = solve_k(&beta, &grid, &VolterraConfig::default())?;
    let err = (0..grid.n())
        .map(|i| (k[i] - (-grid.x(i).exp())).abs())
        .fold(0.0_f64, f64::max)
    ;
    Ok((err <= 1e-5, format!("max |k + e^x| = {err:.3e} (tol 1e-5)")))
}

fn verify_analytic_bounds() -> Result<(bool, String)> {
    let grid = SpatialGrid::new(101)?;
    let vcfg = VolterraConfig::default();
    let mut worst = f64::NEG_INFINITY; // most positive violation of |k| <= bound
    for g in 3..=8 {
        let family = RecircFamily::chebyshev(5.0, g as f64, 5.0)
            .with_deriv_mode(crate::recirc::DerivMode::FiniteDifference);
        let bounds = family.bounds_over_box(201, 201);
        for j in 0..9 {
            let nu = -4.0 + j as f64;
            let bundle =
                kernels::solve_bundle(&family, nu, &grid, &vcfg, kernels::KernelSet::All)?;
            let l = kernels::solve_l(&bundle.k, &grid, &vcfg)?;
            for i in 0..grid.n() {
                let x = grid.x(i);
                worst = worst
                    .max(bundle.k[i].abs() - 1.01 * kernels::bound_k(&bounds, x))
                    .max(
                        bundle.k_nu.as_ref().unwrap()[i].abs()
                            - 1.01 * kernels::bound_k_nu(&bounds, x),
                    )
                    .max(
                        bundle.k_xnu.as_ref().unwrap()[i].abs()
                            - 1.01 * kernels::bound_k_xnu(&bounds, x),
                    )
                    .max(l[i].abs() - 1.01 * kernels::bound_l(&bounds, x));
            }
        }
    }
    Ok((
        worst <= 0.0,
        format!("worst bound margin {worst:.3e} (<= 0 passes; 1% slack)"),
    ))
}

fn verify_transform_roundtrip() -> Result<(bool, String)> {
    // The composed transforms agree up to trapezoid quadrature error,
    // O(dx^2), so the 1e-6 tolerance needs the fine grid.
    // Quadrature error also scales with the kernel magnitude, so this
    // canned suite sticks to the unit constant family.
    let grid = SpatialGrid::new(1001)?;
    let vcfg = VolterraConfig::default();
    let family = RecircFamily::constant(1.0, 5.0);
    let beta = family.beta_slice(&grid, 0.0)?;
    let k = solve_k(&beta, &grid, &vcfg)?;
    let l = kernels::solve_l(&k, &grid, &vcfg)?;
    let mut worst = 0.0_f64;
    for u in smooth_states(&grid, 25, 11) {
        let w = transform(&u, &k, grid.dx());
        let back = inverse_transform(&w, &l, grid.dx());
        let scale = 1.0 + u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let err = u
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        worst = worst.max(err / scale);
    }
    Ok((
        worst <= 1e-6,
        format!("worst relative roundtrip error {worst:.3e} (tol 1e-6)"),
    ))
}

fn verify_agmon_and_sandwich() -> Result<(bool, String)> {
    let grid = SpatialGrid::new(101)?;
    let ws = smooth_states(&grid, 25, 12);
    let agmon = ws.iter().all(|w| control::agmon_check(w, grid.dx()));
    let full = sandwich_check(&ws, grid.dx(), LyapunovVariant::FullKernel { c: 1.0 })?;
    let gain = sandwich_check(&ws, grid.dx(), LyapunovVariant::GainOnly { c: 1.0 })?;
    let ok = agmon && full.holds && gain.holds;
    Ok((
        ok,
        format!(
            "agmon {}; sandwich margins full ({:.3e}, {:.3e}) gain ({:.3e}, {:.3e})",
            agmon,
            full.worst_lower_margin,
            full.worst_upper_margin,
            gain.worst_lower_margin,
            gain.worst_upper_margin
        ),
    ))
}

fn verify_lyapunov_decay() -> Result<(bool, String)> {
    let grid = SpatialGrid::new(101)?;
    let family = RecircFamily::chebyshev(5.0, 3.0, 5.0);
    let spec = ControllerSpec::exact_gs(VolterraConfig::default());
    let cfg = SimConfig::new(grid.dx(), 5.0).with_record_stride(10);
    let run = control::run_closed_loop(vec![0.2; grid.n()], &family, &spec, &cfg)?;
    if run.trajectory.termination != Termination::Completed {
        return Ok((
            false,
            format!("run ended early: {}", run.trajectory.termination.label()),
        ));
    }
    let samples = lyapunov_trace(
        &run.trajectory,
        &family,
        &VolterraConfig::default(),
        LyapunovVariant::FullKernel { c: 1.0 },
    )?;
    let report = decay_check(&samples, 1.0, 1e-3);
    Ok((
        report.holds,
        format!(
            "final omega {:.3e}; worst per-step V increase {:.3e} over {} samples",
            run.trajectory.final_omega(),
            report.worst_step_increase,
            report.samples
        ),
    ))
}

fn verify_neural_kernel(model: &crate::operator::OperatorModel) -> Result<(bool, String)> {
    let grid = SpatialGrid::new(101)?;
    let nus: Vec<f64> = (0..9).map(|j| -2.0 + 0.5 * j as f64).collect();
    let mut worst = 0.0_f64;
    for g in [3.0, 5.0] {
        let family = RecircFamily::chebyshev(5.0, g, 5.0);
        let rep = approximation_report(model, &family, &nus, &grid)?;
        worst = worst.max(rep.relative_k_error());
    }
    Ok((
        worst <= 0.2,
        format!("worst relative kernel error {worst:.3e} (tol 0.2)"),
    ))
}

fn verify_neural_gs(model: &crate::operator::OperatorModel) -> Result<(bool, String)> {
    let grid = SpatialGrid::new(101)?;
    let family = RecircFamily::chebyshev(5.0, 3.0, 5.0);
    let spec = ControllerSpec::neural_gs(model.clone());
    let cfg = SimConfig::new(grid.dx(), 5.0).with_record_stride(10);
    let run = control::run_closed_loop(vec![0.37; grid.n()], &family, &spec, &cfg)?;
    let omega = run.trajectory.final_omega();
    let ok = run.trajectory.termination == Termination::Completed && omega <= 1e-2;
    Ok((
        ok,
        format!(
            "termination {}, final omega {:.3e} (tol 1e-2)",
            run.trajectory.termination.label(),
            omega
        ),
    ))
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let mut results = vec![
        suite("kernels/constant-closed-form", verify_constant_kernel()),
        suite("kernels/analytic-bounds", verify_analytic_bounds()),
        suite("plant/transform-roundtrip", verify_transform_roundtrip()),
        suite("control/agmon-and-sandwich", verify_agmon_and_sandwich()),
        suite("control/lyapunov-decay", verify_lyapunov_decay()),
    ];
    match &a.model {
        None => {
            results.push(skipped("operator/kernel-error", "no --model given"));
            results.push(skipped("control/neural-gs-stabilizes", "no --model given"));
        }
        Some(path) => match load_model(path) {
            Ok(model) => {
                results.push(suite("operator/kernel-error", verify_neural_kernel(&model)));
                results.push(suite(
                    "control/neural-gs-stabilizes",
                    verify_neural_gs(&model),
                ));
            }
            Err(e) => {
                let detail = format!("model load failed: {e}");
                results.push(SuiteResult {
                    suite: "operator/kernel-error",
                    status: "FAIL",
                    detail: detail.clone(),
                });
                results.push(SuiteResult {
                    suite: "control/neural-gs-stabilizes",
                    status: "FAIL",
                    detail,
                });
            }
        },
    }
    let json = serde_json::to_string_pretty(&results)?;
    if let Some(p) = &a.output {
        write_atomic(p, json.as_bytes())?;
    }
    println!("{json}");
    let failed = results.iter().filter(|r| r.status == "FAIL").count();
    for r in &results {
        eprintln!("{:<32} {:<7} {}", r.suite, r.status, r.detail);
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<String> {
        std::iter::once("gsno".to_string())
            .chain(s.iter().map(|x| x.to_string()))
            .collect()
    }

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        assert_eq!(run_with(argv(&["no-such-command"])), 2);
        assert_eq!(run_with(argv(&["gen-dataset"])), 2); // missing --output
        assert_eq!(run_with(argv(&["--help"])), 0);
        assert_eq!(run_with(argv(&["--version"])), 0);
    }

    #[test]
    fn config_file_fills_flags_but_explicit_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "n_gamma = 2\nn-nu = 3\nseed = 9 # comment\n").unwrap();
        let expanded = expand_config(argv(&[
            "gen-dataset",
            "--config",
            cfg.to_str().unwrap(),
            "--n-gamma",
            "5",
        ]))
        .unwrap();
        // n-gamma given explicitly: the config value must not appear.
        assert!(!expanded.iter().any(|a| a == "--n-gamma" && false));
        assert_eq!(
            expanded.iter().filter(|a| *a == "--n-gamma").count(),
            1,
            "explicit flag must win: {expanded:?}"
        );
        assert!(expanded.iter().any(|a| a == "--n-nu"));
        assert!(expanded.iter().any(|a| a == "--seed"));
        let si = expanded.iter().position(|a| a == "--seed").unwrap();
        assert_eq!(expanded[si + 1], "9");
    }

    #[test]
    fn gen_dataset_writes_counted_records_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("tiny.ds");
        let args = |p: &std::path::Path| {
            argv(&[
                "gen-dataset",
                "--n-gamma",
                "2",
                "--n-nu",
                "3",
                "--n-grid",
                "21",
                "-o",
                p.to_str().unwrap(),
            ])
        };
        assert_eq!(run_with(args(&out)), 0);
        let ds = load_dataset(&out).unwrap();
        assert_eq!(ds.records.len() + ds.dropped, 6);
        let out2 = dir.path().join("tiny2.ds");
        assert_eq!(run_with(args(&out2)), 0);
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(&out2).unwrap(),
            "rerun with the same seed must be byte-identical"
        );
    }

    #[test]
    fn train_smoke_writes_model_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let ds_path = dir.path().join("tiny.ds");
        assert_eq!(
            run_with(argv(&[
                "gen-dataset",
                "--n-gamma",
                "2",
                "--n-nu",
                "3",
                "--n-grid",
                "21",
                "-o",
                ds_path.to_str().unwrap(),
            ])),
            0
        );
        let model_path = dir.path().join("tiny.model");
        let metrics_path = dir.path().join("metrics.csv");
        assert_eq!(
            run_with(argv(&[
                "train",
                "--dataset",
                ds_path.to_str().unwrap(),
                "--epochs",
                "50",
                "--batch-size",
                "2",
                "--branch-hidden",
                "8,8",
                "--trunk-hidden",
                "8",
                "--p",
                "4",
                "-o",
                model_path.to_str().unwrap(),
                "--metrics",
                metrics_path.to_str().unwrap(),
            ])),
            0
        );
        let model = load_model(&model_path).unwrap();
        assert_eq!(model.trunk.widths.last(), Some(&4));
        let metrics = std::fs::read_to_string(&metrics_path).unwrap();
        assert_eq!(metrics.lines().count(), 51, "header + one row per epoch");
    }

    #[test]
    fn simulate_preset_resolves_and_writes_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("traj.csv");
        // Coarse grid and time step keep the smoke test fast; preset
        // supplies law, gamma, and initial constant.
        assert_eq!(
            run_with(argv(&[
                "simulate",
                "--preset",
                "fig2-roa",
                "--dt",
                "0.01",
                "--dx",
                "0.01",
                "--t-end",
                "2",
                "-o",
                out.to_str().unwrap(),
            ])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("termination=completed"), "{text}");
        // Explicit u0 past the attraction region: instability is a
        // recorded outcome, still exit 0.
        let out2 = dir.path().join("traj2.csv");
        assert_eq!(
            run_with(argv(&[
                "simulate",
                "--preset",
                "fig2-roa",
                "--u0",
                "0.39",
                "--dt",
                "0.01",
                "--dx",
                "0.01",
                "-o",
                out2.to_str().unwrap(),
            ])),
            0
        );
        let text2 = std::fs::read_to_string(&out2).unwrap();
        assert!(!text2.contains("termination=completed"), "{text2}");
    }

    #[test]
    fn scenario_resolution_requires_flags_without_preset() {
        let a = SimulateArgs {
            preset: None,
            law: None,
            gamma: None,
            u0: None,
            amplitude: 5.0,
            nu_box: 5.0,
            dt: 1e-2,
            dx: 1e-2,
            t_end: None,
            record_stride: None,
            model: None,
            n_nu_table: 2001,
            output: PathBuf::from("x"),
            snapshots: None,
            summary: None,
        };
        assert!(resolve_scenario(&a).is_err());
        let b = SimulateArgs {
            preset: Some(PresetArg::Fig1OpenLoop),
            gamma: Some(5.0),
            ..a
        };
        let sc = resolve_scenario(&b).unwrap();
        assert_eq!(sc.law, LawArg::Open);
        assert_eq!(sc.u0, 0.04, "gamma = 5 preset picks the second constant");
        assert_eq!(sc.t_end, 10.0);
    }

    #[test]
    fn kernel_dump_matches_closed_form_and_diff_is_zero_on_exact() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ker.bin");
        assert_eq!(
            run_with(argv(&[
                "kernel",
                "--family",
                "constant",
                "--b",
                "1",
                "--nu",
                "0",
                "--dx",
                "0.01",
                "-o",
                out.to_str().unwrap(),
            ])),
            0
        );
        let table =
            crate::formats::kernel_table_from_bytes(&std::fs::read(&out).unwrap()).unwrap();
        assert_eq!(table.fields[0].name, "k_exact");
        for (i, &x) in table.xs.iter().enumerate() {
            assert!((table.fields[0].values[i] - (-x.exp())).abs() <= 1e-4);
        }
    }

    #[test]
    fn verify_without_model_skips_neural_suites() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.json");
        assert_eq!(
            run_with(argv(&["verify", "-o", out.to_str().unwrap()])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("SKIPPED"));
        assert!(!text.contains("FAIL"));
    }

    #[test]
    fn verify_with_corrupt_model_fails_neural_suites() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.model");
        std::fs::write(&bad, b"not a model").unwrap();
        let out = dir.path().join("report.json");
        assert_eq!(
            run_with(argv(&[
                "verify",
                "--model",
                bad.to_str().unwrap(),
                "-o",
                out.to_str().unwrap(),
            ])),
            1
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("model load failed"));
    }
}
