use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use varband::backtest::{rolling_backtest, BacktestConfig, R0Rule};
use varband::estimator::{build_uncertain_covariance, DEFAULT_EPS_SCALE};
use varband::frontier::{diagnose, sweep_frontier};
use varband::market_data::{load_prices, load_returns, prices_to_returns, validate_panel, write_returns, WideCsv};
use varband::optimizer::{kkt_residual, solve_with_safeguards};
use varband::report::{
    backtest_document, write_frontier_csv, write_json, write_table_csv, write_wealth_csv, ParamsDocument,
    SolutionDocument,
};
use varband::synthetic::{generate_from_spec, PanelSpec};
use varband::{BlockConfig, Error, ProblemSpec, Result, ReturnPanel};

#[derive(Parser)]
#[command(name = "varband", version, about = "Mean-variance portfolios under covariance bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a regime-switching return panel from a JSON spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Master seed; overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate mean and covariance bounds from a return or price panel.
    Estimate {
        #[command(flatten)]
        input: PanelInput,
        #[command(flatten)]
        block: BlockArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve for one risk factor.
    Optimize {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_parser = parse_w)]
        w: f64,
        #[arg(long, default_value = "auto", value_parser = parse_r0)]
        r0: R0Arg,
        #[arg(long, default_value_t = DEFAULT_EPS_SCALE)]
        eps_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the risk factor over [0, 1] and write the frontier.
    Frontier {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 101, value_parser = clap::value_parser!(u32).range(2..=1001))]
        grid: u32,
        #[arg(long, default_value = "auto", value_parser = parse_r0)]
        r0: R0Arg,
        /// Frontier CSV.
        #[arg(long)]
        out: PathBuf,
        /// Diagnostics JSON; defaults to the CSV path with a
        /// `.diagnostics.json` extension.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Rolling-window out-of-sample backtest.
    Backtest {
        #[command(flatten)]
        input: PanelInput,
        #[command(flatten)]
        block: BlockArgs,
        #[arg(long, default_value_t = 252)]
        window: usize,
        /// Number of out-of-sample days; all remaining days by default.
        #[arg(long)]
        horizon: Option<usize>,
        /// One or more risk factors, comma separated.
        #[arg(long, value_parser = parse_w, value_delimiter = ',', default_value = "1")]
        w: Vec<f64>,
        #[arg(long, default_value = "auto", value_parser = parse_r0)]
        r0: R0Arg,
        /// Also run the single-covariance baseline.
        #[arg(long)]
        baseline: bool,
        /// Use the sample covariance as both bounds.
        #[arg(long)]
        inject_sample_covariance: bool,
        #[arg(long, default_value_t = DEFAULT_EPS_SCALE)]
        eps_scale: f64,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Comparison table CSV.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Wealth-path CSV.
        #[arg(long)]
        emit_paths: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PanelInput {
    /// Wide CSV of simple returns.
    #[arg(long, required_unless_present = "prices", conflicts_with = "prices")]
    returns: Option<PathBuf>,
    /// Wide CSV of prices, converted to simple returns.
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Field delimiter.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Args)]
struct BlockArgs {
    /// Block length.
    #[arg(long, default_value_t = BlockConfig::default().n1)]
    n1: usize,
    /// Mini-block length.
    #[arg(long, default_value_t = BlockConfig::default().n2)]
    n2: usize,
}

impl BlockArgs {
    fn config(&self) -> Result<BlockConfig> {
        BlockConfig::new(self.n1, self.n2)
    }
}

#[derive(Clone, Copy)]
enum R0Arg {
    Auto,
    Value(f64),
}

impl R0Arg {
    fn rule(self) -> R0Rule {
        match self {
            R0Arg::Auto => R0Rule::EqualWeightMean,
            R0Arg::Value(v) => R0Rule::Fixed(v),
        }
    }

    fn resolve(self, mu: &[f64]) -> f64 {
        match self {
            R0Arg::Value(v) => v,
            R0Arg::Auto => {
                let mean = mu.iter().sum::<f64>() / mu.len() as f64;
                mean.min(mu.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            }
        }
    }
}

fn parse_w(s: &str) -> std::result::Result<f64, String> {
    let w: f64 = s.trim().parse().map_err(|_| format!("not a number: {s}"))?;
    if !(0.0..=1.0).contains(&w) {
        return Err("w must lie in [0,1]".into());
    }
    Ok(w)
}

fn parse_r0(s: &str) -> std::result::Result<R0Arg, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(R0Arg::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(R0Arg::Value(v)),
        _ => Err(format!("expected a number or \"auto\", got {s}")),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write through a temporary file in the target directory, then rename.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    {
        let mut buf = BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush().map_err(|e| io_err(path, e))?;
    }
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn load_panel(input: &PanelInput) -> Result<ReturnPanel> {
    let delimiter = u8::try_from(input.delimiter)
        .map_err(|_| Error::InvalidArgument("delimiter must be a single-byte character".into()))?;
    let format = WideCsv { delimiter };
    match (&input.returns, &input.prices) {
        (Some(path), None) => Ok(load_returns(path, format)?.panel),
        (None, Some(path)) => prices_to_returns(&load_prices(path, format)?.panel),
        _ => Err(Error::InvalidArgument("give exactly one of --returns and --prices".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, seed, out } => {
            let mut spec: PanelSpec = read_json(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let panel = generate_from_spec(&spec)?;
            write_atomic(&out, |w| write_returns(&panel, w))
        }
        Command::Estimate { input, block, out } => {
            let panel = load_panel(&input)?;
            let cfg = block.config()?;
            let (params, cov) = build_uncertain_covariance(&panel, &cfg)?;
            let mut doc = ParamsDocument::new(&panel.assets, &params, &cov, &cfg, panel.n_periods());
            let validation = validate_panel(&panel)?;
            doc.warnings.extend(
                validation
                    .suspicious
                    .iter()
                    .map(|s| format!("{} on {}: return {} exceeds 100%", s.asset, s.date, s.value)),
            );
            for w in &doc.warnings {
                log::warn!("{w}");
            }
            write_atomic(&out, |w| write_json(&doc, w))
        }
        Command::Optimize { params, w, r0, eps_scale, out } => {
            let doc: ParamsDocument = read_json(&params)?;
            let mu = doc.mu();
            let r0 = r0.resolve(&mu);
            let problem = ProblemSpec::new(mu, r0, doc.covariance()?, w)?;
            let (solution, used, trace) = solve_with_safeguards(problem, eps_scale)?;
            if trace.repaired {
                log::warn!("covariance bounds were repaired to positive definiteness");
            }
            if trace.fallback {
                log::warn!("active-set solve failed; used the projected-gradient fallback");
            }
            let kkt = kkt_residual(&used, &solution);
            let result = SolutionDocument::new(&solution, w, r0, kkt, trace);
            write_atomic(&out, |wr| write_json(&result, wr))
        }
        Command::Frontier { params, grid, r0, out, diagnostics } => {
            let doc: ParamsDocument = read_json(&params)?;
            let mu = doc.mu();
            let r0 = r0.resolve(&mu);
            let mut cov = doc.covariance()?;
            let repaired = cov.ensure_positive_definite(DEFAULT_EPS_SCALE)? || cov.repaired;
            let template = ProblemSpec::new(mu, r0, cov, 0.0)?;
            let points = sweep_frontier(&template, grid as usize)?;
            let diag = diagnose(&points, repaired)?;
            if !diag.dominance_violations.is_empty() {
                log::warn!("{} dominance violations on the frontier", diag.dominance_violations.len());
            }
            let diag_path = diagnostics.unwrap_or_else(|| out.with_extension("diagnostics.json"));
            write_atomic(&out, |w| write_frontier_csv(&points, w))?;
            write_atomic(&diag_path, |w| write_json(&diag, w))
        }
        Command::Backtest {
            input,
            block,
            window,
            horizon,
            w,
            r0,
            baseline,
            inject_sample_covariance,
            eps_scale,
            out,
            table,
            emit_paths,
        } => {
            let panel = load_panel(&input)?;
            let cfg = BacktestConfig {
                window,
                horizon,
                ws: w,
                r0_rule: r0.rule(),
                block: block.config()?,
                baseline,
                inject_sample_covariance,
                eps_scale,
            };
            let report = rolling_backtest(&panel, &cfg)?;
            for m in &report.models {
                if !m.carried_days.is_empty() {
                    log::warn!(
                        "w = {:?}: {} days kept the previous weights",
                        m.w,
                        m.carried_days.len()
                    );
                }
            }
            let doc = backtest_document(&report)?;
            write_atomic(&out, |wr| write_json(&doc, wr))?;
            if let Some(path) = table {
                write_atomic(&path, |wr| write_table_csv(&doc.table, wr))?;
            }
            if let Some(path) = emit_paths {
                write_atomic(&path, |wr| write_wealth_csv(&report, wr))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VARBAND_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.origin());
            ExitCode::from(1)
        }
    }
}
