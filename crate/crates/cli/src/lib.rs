//! `mpq` command-line driver: train or generate an oracle, measure
//! sensitivities into a batch cache, solve for bit-widths, sweep budgets,
//! and check assignments against the oracle.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use mpq_core::linalg::Matrix;
use mpq_core::oracles::{
    train_toy, LossOracle, OracleFile, QuadraticOracle, QuadraticParams, ToyClassifierOracle,
    DEFAULT_EPOCHS,
};
use mpq_core::sensitivity::{
    build_matrix_with, cache, BitMenu, BuildOptions, SameLayerCrossBits, SensitivityMatrix,
};
use mpq_core::solver::{
    self, bits_to_megabytes, BitAssignment, BlockPartition, Method, Problem, SizeBudget,
    SolveOptions, SolveReport, Termination,
};
use mpq_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NO_PROOF: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

pub const CACHE_ENV: &str = "MPQ_CACHE_DIR";

pub const CSV_HEADER: &str = "budget_mb,method,objective,size_mb,bits,optimal,nodes,seconds";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible { .. } => EXIT_INFEASIBLE,
            Error::Io(_) | Error::Format(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "mpq",
    version,
    about = "Cross-layer-aware mixed-precision bit-width allocation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the two-moons MLP and save it as an oracle file.
    TrainToy(TrainToyArgs),
    /// Generate a synthetic quadratic-loss oracle.
    GenQuadratic(GenQuadraticArgs),
    /// Measure sensitivity matrices into the batch cache.
    Measure(MeasureArgs),
    /// Solve for one bit-width per layer under a size budget.
    Solve(SolveArgs),
    /// Solve over several budgets and methods.
    Sweep(SweepArgs),
    /// Compare the measured loss increase of an assignment with its proxy.
    Eval(EvalArgs),
    /// Turn a plain-text symmetric matrix into a cache batch.
    ImportMatrix(ImportArgs),
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenQuadraticArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Share of the Hessian that couples layers, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, default_value_t = 4)]
    pub min_size: usize,
    #[arg(long, default_value_t = 24)]
    pub max_size: usize,
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub baseline: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub oracle: PathBuf,
    /// Bit menu, e.g. `2,4,8`.
    #[arg(long)]
    pub bits: String,
    /// Cache directory.
    #[arg(long, env = CACHE_ENV)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub batches: u64,
    #[arg(long, default_value_t = 0)]
    pub start_batch: u64,
    /// `zero` or `measured`.
    #[arg(long, default_value = "zero")]
    pub same_layer: String,
}

#[derive(Debug, Args, Clone)]
pub struct SolverFlags {
    /// Cache directory.
    #[arg(long, env = CACHE_ENV)]
    pub cache: PathBuf,
    /// Block partition for `--method block`, e.g. `0-1,2-3`.
    #[arg(long)]
    pub blocks: Option<String>,
    /// Solve on the raw matrix instead of its PSD projection.
    #[arg(long)]
    pub no_psd: bool,
    /// Wall-clock limit per solve, in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub node_limit: u64,
    /// Fill the `seconds` column (makes the CSV run-dependent).
    #[arg(long)]
    pub record_time: bool,
    /// CSV output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("budget").required(true).args(["budget_mb", "budget_bits"])))]
pub struct SolveArgs {
    #[arg(long)]
    pub budget_mb: Option<f64>,
    #[arg(long)]
    pub budget_bits: Option<u64>,
    /// clado, diag, block or exhaustive.
    #[arg(long, default_value = "clado")]
    pub method: String,
    #[command(flatten)]
    pub flags: SolverFlags,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("budgets").required(true).args(["budgets_mb", "budgets_bits"])))]
pub struct SweepArgs {
    /// Ascending budgets in megabytes, comma separated.
    #[arg(long)]
    pub budgets_mb: Option<String>,
    /// Ascending budgets in bits, comma separated.
    #[arg(long)]
    pub budgets_bits: Option<String>,
    #[arg(long, default_value = "clado,diag")]
    pub methods: String,
    #[command(flatten)]
    pub flags: SolverFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub oracle: PathBuf,
    #[arg(long, env = CACHE_ENV)]
    pub cache: PathBuf,
    /// Bits per layer, e.g. `2,4,8`.
    #[arg(long)]
    pub assignment: String,
    /// Measure on these sensitivity batches instead of the oracle's default set.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub batches: u64,
    #[arg(long, default_value_t = 0)]
    pub start_batch: u64,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Whitespace-separated rows; `#` starts a comment.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub bits: String,
    /// Weight count per layer, comma separated.
    #[arg(long)]
    pub sizes: String,
    #[arg(long, env = CACHE_ENV)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub sample_count: u64,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::TrainToy(a) => {
            let o = cmd_train_toy(&a)?;
            writeln!(out, "training accuracy {:.4}", o.training_accuracy())?;
            Ok(EXIT_OK)
        }
        Command::GenQuadratic(a) => {
            let o = cmd_gen_quadratic(&a)?;
            writeln!(
                out,
                "wrote {} ({} layers)",
                a.out.display(),
                o.layers().len()
            )?;
            Ok(EXIT_OK)
        }
        Command::Measure(a) => {
            let s = cmd_measure(&a)?;
            writeln!(
                out,
                "measured {} batch(es), skipped {} existing",
                s.written.len(),
                s.skipped.len()
            )?;
            Ok(EXIT_OK)
        }
        Command::Solve(a) => {
            let (row, report) = cmd_solve(&a)?;
            emit_csv(a.flags.out.as_deref(), &[row], out)?;
            writeln!(err, "{}", summary(&report))?;
            Ok(report_code(&report))
        }
        Command::Sweep(a) => {
            let points = cmd_sweep(&a)?;
            let mut rows = Vec::new();
            let mut code = EXIT_OK;
            for p in &points {
                match &p.result {
                    Ok(r) => {
                        rows.push(p.row.clone());
                        code = code.max(report_code(r));
                    }
                    Err(e) => {
                        writeln!(
                            err,
                            "{} at {} bits: {}",
                            p.method, p.budget.limit_bits, e.message
                        )?;
                        code = code.max(e.code);
                    }
                }
            }
            emit_csv(a.flags.out.as_deref(), &rows, out)?;
            Ok(code)
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            writeln!(out, "measured_delta {:.16e}", r.measured_delta)?;
            writeln!(out, "proxy {:.16e}", r.proxy)?;
            match r.ratio() {
                Some(x) => writeln!(out, "ratio {x:.16e}")?,
                None => writeln!(out, "ratio undefined")?,
            }
            Ok(EXIT_OK)
        }
        Command::ImportMatrix(a) => {
            let path = cmd_import_matrix(&a)?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(EXIT_OK)
        }
    }
}

fn report_code(r: &SolveReport) -> i32 {
    if r.optimal {
        EXIT_OK
    } else {
        EXIT_NO_PROOF
    }
}

fn summary(r: &SolveReport) -> String {
    let status = match (r.optimal, r.termination, r.psd_warning) {
        (true, _, _) => "optimal".to_string(),
        (false, Termination::NodeLimit, _) => "node limit reached, no proof".to_string(),
        (false, Termination::TimeLimit, _) => "time limit reached, no proof".to_string(),
        (false, _, true) => "matrix not PSD, no proof".to_string(),
        (false, _, false) => "no proof".to_string(),
    };
    format!(
        "{}: bits [{}] objective {:.6e} size {:.6} MB, {} ({} nodes)",
        r.method,
        r.assignment,
        r.objective,
        bits_to_megabytes(r.size_bits),
        status,
        r.nodes
    )
}

fn emit_csv(path: Option<&Path>, rows: &[String], out: &mut dyn Write) -> CliResult<()> {
    let mut text = String::new();
    let _ = writeln!(text, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(text, "{r}");
    }
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn csv_row(budget: SizeBudget, report: &SolveReport, record_time: bool) -> String {
    let seconds = if record_time {
        format!("{:.6}", report.elapsed.as_secs_f64())
    } else {
        String::new()
    };
    format!(
        "{:.16e},{},{:.16e},{:.16e},{},{},{},{}",
        budget.megabytes(),
        report.method,
        report.objective,
        bits_to_megabytes(report.size_bits),
        report.assignment,
        report.optimal,
        report.nodes,
        seconds
    )
}

pub fn cmd_train_toy(a: &TrainToyArgs) -> CliResult<ToyClassifierOracle> {
    let o = train_toy(a.seed, a.epochs)?;
    OracleFile::Toy(o.clone()).save(&a.out)?;
    Ok(o)
}

pub fn cmd_gen_quadratic(a: &GenQuadraticArgs) -> CliResult<QuadraticOracle> {
    let params = QuadraticParams {
        layers: a.layers,
        min_size: a.min_size,
        max_size: a.max_size,
        rho: a.rho,
        coupling_rank: a.rank,
        baseline: a.baseline,
    };
    let o = QuadraticOracle::generate(&params, a.seed)?;
    OracleFile::Quadratic(o.clone()).save(&a.out)?;
    Ok(o)
}

#[derive(Debug, Default)]
pub struct MeasureSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

/// Measures batches `start_batch..start_batch + batches`, one cache file
/// each. Existing batch files are checked for compatibility and skipped.
pub fn cmd_measure(a: &MeasureArgs) -> CliResult<MeasureSummary> {
    let menu = BitMenu::parse(&a.bits)?;
    let same_layer = SameLayerCrossBits::parse(&a.same_layer)?;
    if a.batch_size == 0 {
        return Err(CliError::validation("--batch-size must be at least 1"));
    }
    let oracle = OracleFile::load(&a.oracle)?;
    let sizes: Vec<usize> = oracle.layers().iter().map(|l| l.count()).collect();
    fs::create_dir_all(&a.out)?;

    let mut summary = MeasureSummary::default();
    for index in a.start_batch..a.start_batch + a.batches {
        let path = a.out.join(cache::batch_file_name(index));
        if path.exists() {
            let existing = cache::read_file(&path)?;
            if existing.menu() != &menu
                || existing.layer_sizes() != sizes.as_slice()
                || existing.same_layer() != same_layer
            {
                return Err(Error::DimensionMismatch(format!(
                    "{} was measured with bits {} / sizes {:?} / same-layer {}, not bits {menu} / sizes {sizes:?} / same-layer {}",
                    path.display(),
                    existing.menu(),
                    existing.layer_sizes(),
                    existing.same_layer().as_str(),
                    same_layer.as_str()
                ))
                .into());
            }
            summary.skipped.push(path);
            continue;
        }
        let batch = oracle.batch(a.batch_size, index)?;
        let g = build_matrix_with(&batch, &menu, BuildOptions { same_layer })?;
        // Write-then-rename so an interrupted run never leaves a partial batch.
        let tmp = path.with_extension("tmp");
        cache::write_file(&tmp, &g)?;
        fs::rename(&tmp, &path)?;
        summary.written.push(path);
    }
    Ok(summary)
}

pub fn parse_method(name: &str, blocks: Option<&str>, layers: usize) -> CliResult<Method> {
    let method = match name {
        "clado" => Method::Clado,
        "diag" => Method::Diagonal,
        "exhaustive" => Method::Exhaustive,
        "block" => {
            let spec =
                blocks.ok_or_else(|| CliError::validation("--method block needs --blocks"))?;
            Method::Block(BlockPartition::parse(spec, layers)?)
        }
        other => {
            return Err(CliError::validation(format!(
                "unknown method {other:?} (expected clado, diag, block or exhaustive)"
            )))
        }
    };
    Ok(method)
}

fn solve_options(f: &SolverFlags) -> CliResult<SolveOptions> {
    let time_limit = match f.time_limit {
        Some(t) if !(t.is_finite() && t > 0.0) => {
            return Err(CliError::validation(
                "--time-limit must be a positive number of seconds",
            ))
        }
        Some(t) => Some(Duration::from_secs_f64(t)),
        None => None,
    };
    Ok(SolveOptions {
        node_limit: f.node_limit,
        time_limit,
        ..SolveOptions::default()
    })
}

/// Masks the merged matrix for the method, then projects it onto the PSD
/// cone unless disabled.
pub fn prepare(problem: &Problem, method: &Method, psd: bool) -> CliResult<Problem> {
    let masked = problem.masked_for(method)?;
    Ok(if psd { masked.psd_projected()? } else { masked })
}

pub fn load_problem(cache_dir: &Path) -> CliResult<(SensitivityMatrix, Problem)> {
    let merged = cache::load_merged(cache_dir)?;
    let problem = Problem::from_sensitivity(&merged);
    Ok((merged, problem))
}

pub fn cmd_solve(a: &SolveArgs) -> CliResult<(String, SolveReport)> {
    let budget = match (a.budget_mb, a.budget_bits) {
        (Some(mb), None) => SizeBudget::from_megabytes(mb)?,
        (None, Some(bits)) => SizeBudget::bits(bits),
        _ => {
            return Err(CliError::validation(
                "give exactly one of --budget-mb and --budget-bits",
            ))
        }
    };
    let opts = solve_options(&a.flags)?;
    let (_, problem) = load_problem(&a.flags.cache)?;
    let method = parse_method(&a.method, a.flags.blocks.as_deref(), problem.num_layers())?;
    let prepared = prepare(&problem, &method, !a.flags.no_psd)?;
    let report = solver::solve(&prepared, budget, &method, &opts)?;
    Ok((csv_row(budget, &report, a.flags.record_time), report))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::validation(format!("bad {what} {t:?}")))
        })
        .collect()
}

pub struct SweepPoint {
    pub method: String,
    pub budget: SizeBudget,
    pub result: CliResult<SolveReport>,
    /// CSV row; empty when the solve failed.
    pub row: String,
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<Vec<SweepPoint>> {
    let budgets: Vec<SizeBudget> = match (&a.budgets_mb, &a.budgets_bits) {
        (Some(mb), None) => parse_list::<f64>(mb, "budget")?
            .into_iter()
            .map(SizeBudget::from_megabytes)
            .collect::<Result<_, _>>()?,
        (None, Some(bits)) => parse_list::<u64>(bits, "budget")?
            .into_iter()
            .map(SizeBudget::bits)
            .collect(),
        _ => {
            return Err(CliError::validation(
                "give exactly one of --budgets-mb and --budgets-bits",
            ))
        }
    };
    if budgets.is_empty() {
        return Err(CliError::validation("no budgets given"));
    }
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::validation("budgets must be in ascending order"));
    }
    let opts = solve_options(&a.flags)?;
    let (_, problem) = load_problem(&a.flags.cache)?;
    let names: Vec<String> = parse_list(&a.methods, "method")?;
    if names.is_empty() {
        return Err(CliError::validation("no methods given"));
    }
    let mut points = Vec::new();
    for name in &names {
        let method = parse_method(name, a.flags.blocks.as_deref(), problem.num_layers())?;
        let prepared = prepare(&problem, &method, !a.flags.no_psd)?;
        let results = solver::sweep(&prepared, &budgets, &method, &opts)?;
        for (&budget, result) in budgets.iter().zip(results) {
            let result = result.map_err(CliError::from);
            let row = match &result {
                Ok(r) => csv_row(budget, r, a.flags.record_time),
                Err(_) => String::new(),
            };
            points.push(SweepPoint {
                method: method.name().to_string(),
                budget,
                result,
                row,
            });
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    /// Loss with every layer quantized as assigned, minus the baseline loss.
    pub measured_delta: f64,
    /// `a^T G a / 2` on the merged, unprojected matrix.
    pub proxy: f64,
}

impl EvalReport {
    pub fn ratio(&self) -> Option<f64> {
        (self.proxy != 0.0).then(|| self.measured_delta / self.proxy)
    }
}

fn loss_delta(oracle: &OracleFile, a: &BitAssignment) -> CliResult<f64> {
    let deltas = a
        .bits
        .iter()
        .enumerate()
        .map(|(l, &b)| oracle.perturbation(l, b))
        .collect::<Result<Vec<_>, _>>()?;
    let pert: Vec<(usize, &[f64])> = deltas
        .iter()
        .enumerate()
        .map(|(l, d)| (l, d.as_slice()))
        .collect();
    Ok(oracle.evaluate(&pert)? - oracle.baseline_loss()?)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let oracle = OracleFile::load(&a.oracle)?;
    let (merged, problem) = load_problem(&a.cache)?;
    let assignment = BitAssignment::parse(&a.assignment)?;
    problem.choices_of(&assignment)?;
    let sizes: Vec<usize> = oracle.layers().iter().map(|l| l.count()).collect();
    if sizes != merged.layer_sizes() {
        return Err(Error::DimensionMismatch(format!(
            "oracle layer sizes {sizes:?} do not match the cache {:?}",
            merged.layer_sizes()
        ))
        .into());
    }
    let measured_delta = match a.batch_size {
        None => loss_delta(&oracle, &assignment)?,
        Some(size) => {
            if a.batches == 0 {
                return Err(CliError::validation("--batches must be at least 1"));
            }
            let mut total = 0.0;
            for index in a.start_batch..a.start_batch + a.batches {
                total += loss_delta(&oracle.batch(size, index)?, &assignment)?;
            }
            total / a.batches as f64
        }
    };
    let proxy = 0.5 * solver::objective(&problem, &assignment)?;
    Ok(EvalReport {
        measured_delta,
        proxy,
    })
}

pub fn parse_matrix_text(text: &str) -> CliResult<Matrix> {
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number {t:?}", no + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Matrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))?)
}

/// Writes a plain-text matrix as cache batch `index`. Same-layer cross-width
/// entries decide the mode: all zero means `zero`, anything else `measured`.
pub fn cmd_import_matrix(a: &ImportArgs) -> CliResult<PathBuf> {
    let menu = BitMenu::parse(&a.bits)?;
    let sizes: Vec<usize> = parse_list(&a.sizes, "layer size")?;
    let mut g = parse_matrix_text(&fs::read_to_string(&a.input)?)?;
    let deviation = g.asymmetry();
    if deviation > mpq_core::spectra::SYMMETRY_TOLERANCE * g.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { deviation }.into());
    }
    g.symmetrize();
    let nb = menu.len();
    let same_layer = if (0..g.dim())
        .any(|p| (0..g.dim()).any(|q| p != q && p / nb == q / nb && g[(p, q)] != 0.0))
    {
        SameLayerCrossBits::Measured
    } else {
        SameLayerCrossBits::Zero
    };
    let s = SensitivityMatrix::new(menu, sizes, g, a.sample_count, same_layer)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(cache::batch_file_name(a.index));
    cache::write_file(&path, &s)?;
    Ok(path)
}
