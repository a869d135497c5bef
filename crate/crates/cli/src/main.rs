//! `ebvs` command-line front end: fit a dataset or run a simulation study.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ebvs_core::data::{self, Role, Schema, Standardization, ZERO_REPLACEMENT};
use ebvs_core::selector::{self, MultiRun, MAX_ROUNDS};
use ebvs_core::sim::{self, ScenarioId, ScenarioSpec};
use ebvs_core::{Dataset64, Family, FitResult64, SelectionMode, SelectorConfig};

/// Worker-thread count for the parallel parts (restarts, screening, studies).
const THREADS_ENV: &str = "EBVS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ebvs", version, about = "Empirical Bayes variable selection for GLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select predictors in a CSV dataset.
    Fit(FitArgs),
    /// Run a replicated simulation study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Normal,
    Binomial,
    Poisson,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Normal => Family::Normal,
            FamilyArg::Binomial => Family::Binomial,
            FamilyArg::Poisson => Family::Poisson,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Weighted,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Column roles, one `name = role` per line. Without it the first column
    /// is the response and the rest are putative.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Defaults to normal, or poisson with --survival.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    /// Minimum log-likelihood improvement for a move.
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs; the one with the smallest refit AIC is reported.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = selector::NEIGHBOR_THRESHOLD)]
    neighbor_threshold: f64,
    /// Repeat the selection with earlier picks locked in.
    #[arg(long)]
    sequential: bool,
    /// Center and scale the putative columns.
    #[arg(long)]
    standardize: bool,
    /// Treat the putative columns as compositions and log-ratio them against this column.
    #[arg(long, value_name = "COL")]
    compositional_ref: Option<String>,
    /// Expand time/event data into the artificial Poisson model.
    #[arg(long)]
    survival: bool,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// N1–N9, B1–B3, P1 or P2.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let outcome = match cli.command {
        Command::Fit(args) => fit_command(&args),
        Command::Simulate(args) => simulate_command(&args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got '{value}'"))?;
    if threads == 0 {
        bail!("{THREADS_ENV} must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn selection_mode(mode: ModeArg) -> SelectionMode {
    match mode {
        ModeArg::Greedy => SelectionMode::Greedy,
        ModeArg::Weighted => SelectionMode::Weighted,
    }
}

/// Returns whether the fit converged.
fn fit_command(args: &FitArgs) -> anyhow::Result<bool> {
    let config = SelectorConfig {
        mode: selection_mode(args.mode),
        delta: args.delta,
        rng_seed: args.seed,
        n_restarts: args.restarts,
        neighbor_threshold: args.neighbor_threshold,
        ..SelectorConfig::default()
    };
    config.validate()?;
    if args.sequential && args.restarts > 1 {
        bail!("cli: --sequential and --restarts > 1 cannot be combined");
    }

    let (data, standardization) = load_dataset(args)?;
    let (fit, restarts) = if args.sequential {
        (selector::sequential_fit(&data, &config, MAX_ROUNDS)?, None)
    } else if args.restarts > 1 {
        let multi = selector::multi_run(&data, &config)?;
        (multi.runs[multi.best].clone(), Some(multi))
    } else {
        let init = selector::initialize_gamma(&data, &config)?;
        (selector::run(&data, &config, &init)?, None)
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cli: cannot create output directory {}", args.out.display()))?;
    let report = fit_report(&data, &fit, restarts.as_ref(), standardization.as_ref());
    write_atomic(&args.out.join("report.txt"), report.as_bytes())?;
    write_atomic(&args.out.join("result.json"), &to_json(&fit)?)?;
    if let Some(multi) = &restarts {
        write_atomic(&args.out.join("restarts.json"), &to_json(multi)?)?;
    }
    if let Some(s) = &standardization {
        write_atomic(&args.out.join("standardization.json"), &to_json(s)?)?;
    }
    print!("{report}");
    Ok(fit.converged)
}

fn load_dataset(args: &FitArgs) -> anyhow::Result<(Dataset64, Option<Standardization>)> {
    let schema = match &args.schema {
        Some(path) => Schema::from_file(path)?,
        None => default_schema(&args.input, args.survival)?,
    };
    let mut table = data::load_csv(&args.input, &schema)?;
    if let Some(reference) = &args.compositional_ref {
        table = data::compositional_logratio(&table, reference, ZERO_REPLACEMENT)?;
    }
    let mut standardization = None;
    if args.standardize {
        let (t, s) = data::standardize_putative(&table)?;
        table = t;
        standardization = Some(s);
    }
    let dataset = if args.survival {
        if let Some(f) = args.family.map(Family::from).filter(|&f| f != Family::Poisson) {
            bail!("cli: --survival fits the Poisson expansion; --family {f} is not allowed");
        }
        data::table_to_survival(&table)?.data
    } else {
        if table.is_survival() {
            bail!("cli: the schema assigns time/event roles; pass --survival");
        }
        let family = args.family.map_or(Family::Normal, Family::from);
        data::table_to_dataset(&table, family)?
    };
    Ok((dataset, standardization))
}

/// First column is the response (or time, event for survival data); the rest are putative.
fn default_schema(input: &Path, survival: bool) -> anyhow::Result<Schema> {
    let mut reader = csv::Reader::from_path(input)
        .with_context(|| format!("data_pipeline: cannot open {}", input.display()))?;
    let headers = reader.headers()?.clone();
    let mut schema = Schema::default();
    let lead: &[Role] = if survival { &[Role::Time, Role::Event] } else { &[Role::Response] };
    for (name, &role) in headers.iter().zip(lead) {
        schema = schema.with(name.trim(), role);
    }
    Ok(schema)
}

fn fit_report(
    data: &Dataset64,
    fit: &FitResult64,
    restarts: Option<&MultiRun<f64>>,
    standardization: Option<&Standardization>,
) -> String {
    let mut r = String::new();
    let _ = writeln!(r, "family: {}", data.spec.family);
    let _ = writeln!(r, "observations: {}  locked-in: {}  putative: {}", data.n(), data.j(), data.k());
    let _ = writeln!(
        r,
        "converged: {}  iterations: {}  moves: {}",
        if fit.converged { "yes" } else { "no" },
        fit.iterations,
        fit.moves.len()
    );
    let _ = writeln!(r, "final log-likelihood: {:.6}", fit.final_loglik());
    let t = &fit.theta_final;
    let _ = writeln!(
        r,
        "mu: {:.6}  sigma2: {:.6}  phi: {:.6}  p(-1, 0, +1): ({:.6}, {:.6}, {:.6})",
        t.mu, t.sigma2, t.phi, t.p[0], t.p[1], t.p[2]
    );

    let _ = writeln!(r, "\nselected predictors: {}", fit.selected().len());
    for &k in fit.selected() {
        let sign = if fit.gamma_final.label(k) > 0 { '+' } else { '-' };
        let _ = writeln!(r, "  {sign} {}", data.z_names[k]);
    }
    for round in &fit.rounds {
        let names: Vec<&str> = round.selected.iter().map(|&(k, _)| data.z_names[k].as_str()).collect();
        let _ = writeln!(r, "  round {}: {}", round.round, names.join(", "));
    }

    match &fit.refit_summary {
        Some(s) => {
            let _ = writeln!(r, "\nrefit coefficients:");
            let _ = writeln!(r, "  {:<24} {:>14} {:>14}", "term", "estimate", "std.error");
            for ((name, coef), se) in s.names.iter().zip(&s.coef).zip(&s.std_err) {
                let _ = writeln!(r, "  {name:<24} {coef:>14.6} {se:>14.6}");
            }
            let _ = writeln!(r, "AIC: {:.4}", s.aic);
            match s.r_squared {
                Some(r2) => {
                    let _ = writeln!(r, "R-squared: {r2:.4}");
                }
                None => {
                    let _ = writeln!(
                        r,
                        "residual deviance: {:.4} on {} df (null deviance {:.4})",
                        s.deviance, s.df_residual, s.null_deviance
                    );
                }
            }
            if let Some(st) = standardization {
                let pairs: Vec<(String, f64)> = s.names.iter().cloned().zip(s.coef.iter().copied()).collect();
                let _ = writeln!(r, "\ncoefficients on the original scale:");
                for (name, coef) in st.back_map(&pairs) {
                    let _ = writeln!(r, "  {name:<24} {coef:>14.6}");
                }
            }
        }
        None => {
            let _ = writeln!(r, "\nrefit: not available");
        }
    }

    let edges = &fit.neighbor_report.edges;
    let _ = writeln!(
        r,
        "\ncorrelated neighbors (|r| >= {}): {}",
        fit.neighbor_report.threshold,
        edges.len()
    );
    for e in edges {
        let _ = writeln!(
            r,
            "  {}\t{}\t{:.4}",
            data.z_names[e.selected], data.z_names[e.neighbor], e.correlation
        );
    }

    if let Some(multi) = restarts {
        let _ = writeln!(r, "\nrestarts: {} (best: run {})", multi.runs.len(), multi.best);
        let names: Vec<&str> = multi.union.iter().map(|&k| data.z_names[k].as_str()).collect();
        let _ = writeln!(r, "selected in any run: {}", names.join(", "));
    }
    if !fit.warnings.is_empty() {
        let _ = writeln!(r, "\nwarnings:");
        for w in &fit.warnings {
            let _ = writeln!(r, "  {w}");
        }
    }
    r
}

fn simulate_command(args: &SimulateArgs) -> anyhow::Result<bool> {
    let id: ScenarioId = args.scenario.parse()?;
    let mut spec = ScenarioSpec::new(id);
    if let Some(reps) = args.reps {
        spec.replications = reps;
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(k) = args.k {
        spec.k = k;
    }
    if let Some(seed) = args.seed {
        spec.rng_seed = seed;
    }
    let config = SelectorConfig {
        mode: selection_mode(args.mode),
        delta: args.delta,
        rng_seed: spec.rng_seed,
        ..SelectorConfig::default()
    };
    let study = sim::run_study(&spec, &config)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cli: cannot create output directory {}", args.out.display()))?;
    let tsv = study.to_tsv();
    write_atomic(&args.out.join("study.tsv"), tsv.as_bytes())?;
    write_atomic(&args.out.join("study.json"), &to_json(&study)?)?;
    print!("{tsv}");
    for rep in study.replications.iter().filter(|r| r.error.is_some()) {
        eprintln!("replication {}: {}", rep.rep, rep.error.as_deref().unwrap_or_default());
    }
    Ok(study.replications.iter().all(|r| r.converged))
}

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).context("cli: cannot serialize the result")?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes to a temporary file in the target directory, then renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cli: cannot write to {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cli: cannot write {}", path.display()))?;
    Ok(())
}
