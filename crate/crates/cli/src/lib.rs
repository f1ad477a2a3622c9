//! Command-line front end: scenario files in, CSV / JSON-lines results out.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use activeloc::consensus::SchemeKind;
use activeloc::linmodel::WeightMode;
use activeloc::metrics::{self, EstimateKind, Format, Record};
use activeloc::sim::experiments::{centeredness_study, compare_consensus, variance_study};
use activeloc::sim::{run_monte_carlo, ScenarioConfig, TrialTrace};
use activeloc::sensing::write_measurement_log;
use activeloc::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "activeloc", version, about = "Distributed active range-only target localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write MAE, estimates and decisions.
    Run(RunArgs),
    /// Run a scenario once per point of a parameter grid.
    Sweep(SweepArgs),
    /// Normalized-error CDFs of every consensus scheme after T rounds.
    CompareConsensus(RunArgs),
    /// τ·var of one agent's estimate per round, plus centeredness checks.
    Variance(RunArgs),
    /// MAE of raw, refined and box-projected refined estimates.
    RefineStudy(RunArgs),
    /// Parse and check a scenario without running it.
    Validate(SourceArgs),
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct SourceArgs {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// Built-in scenario (fig2, fig3, fig45, fig8, fig10-11).
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "M")]
    pub trials: Option<usize>,
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<SchemeKind>,
    #[arg(long, value_enum)]
    pub weight_mode: Option<WeightModeArg>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `dotted.key=v1,v2,...`; repeat for a Cartesian grid. Values are TOML.
    #[arg(long = "param", value_name = "KEY=VALUES", required = true)]
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightModeArg {
    Unbiased,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Jsonl,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Jsonl => Format::Jsonl,
        }
    }
}

fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    SchemeKind::parse(s).ok_or_else(|| format!("unknown scheme `{s}` (iseeu, c, ci, mci)"))
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad scenario, flag value or output location (exit 2).
    Config(String),
    /// Failure while simulating or writing results (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn config_err(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn load_source(src: &SourceArgs) -> Result<ScenarioConfig, CliError> {
    match (&src.scenario, &src.preset) {
        (Some(p), None) => ScenarioConfig::load(p).map_err(config_err),
        (None, Some(name)) => ScenarioConfig::preset(name).map_err(config_err),
        _ => Err(CliError::Config("exactly one of --scenario and --preset is required".into())),
    }
}

/// Scenario with the command-line overrides applied and validated.
pub fn resolve(args: &RunArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg = load_source(&args.source)?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(m) = args.trials {
        cfg.run.trials = m;
    }
    if let Some(s) = args.scheme {
        cfg.estimation.scheme = s;
        cfg.study.schemes = vec![s];
    }
    if let Some(w) = args.weight_mode {
        cfg.estimation.weight_mode = match w {
            WeightModeArg::Unbiased => WeightMode::Unbiased,
            WeightModeArg::Quadratic => WeightMode::Quadratic,
        };
    }
    cfg.validate().map_err(config_err)?;
    if args.threads == Some(0) {
        return Err(CliError::Config("--threads must be ≥ 1".into()));
    }
    Ok(cfg)
}

/// Creates `dir` and checks it is writable.
pub fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Config(format!("{}: output directory not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".activeloc-write-test");
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(runtime_err)?;
    Ok(pool.install(f))
}

fn out_file(dir: &Path, stem: &str, format: Format) -> PathBuf {
    dir.join(format!("{stem}.{}", format.extension()))
}

fn export<T: Record>(dir: &Path, stem: &str, rows: &[T], format: Format) -> Result<(), CliError> {
    metrics::export(&out_file(dir, stem, format), rows, format).map_err(runtime_err)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let ctx = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(fs::File::create(path).map_err(ctx)?);
    f(&mut w).map_err(ctx)?;
    w.flush().map_err(ctx)
}

fn write_scenario(dir: &Path, cfg: &ScenarioConfig) -> Result<(), CliError> {
    let path = dir.join("scenario.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn execute(cmd: &Command) -> Result<String, CliError> {
    match cmd {
        Command::Validate(src) => {
            load_source(src)?;
            Ok("ok".into())
        }
        Command::Run(args) => {
            let cfg = resolve(args)?;
            prepare_out_dir(&args.out)?;
            let traces = with_pool(args.threads, || run_monte_carlo(&cfg))?.map_err(runtime_err)?;
            write_run(&args.out, &cfg, &traces, args.format.into())?;
            Ok(String::new())
        }
        Command::Sweep(args) => sweep(args),
        Command::CompareConsensus(args) => {
            let cfg = resolve(args)?;
            prepare_out_dir(&args.out)?;
            let format = args.format.into();
            let cmp = with_pool(args.threads, || compare_consensus(&cfg))?.map_err(runtime_err)?;
            write_scenario(&args.out, &cfg)?;
            for (s, scheme) in cmp.schemes.iter().enumerate() {
                for (label, errors) in [("P", &cmp.info_errors[s]), ("z", &cmp.vector_errors[s])] {
                    let cdf = metrics::cdf_of_info_errors(errors).map_err(runtime_err)?;
                    export(&args.out, &format!("cdf_{label}_{}", scheme.short_name()), &metrics::cdf_rows(&cdf), format)?;
                }
            }
            Ok(String::new())
        }
        Command::Variance(args) => {
            let cfg = resolve(args)?;
            prepare_out_dir(&args.out)?;
            let format = args.format.into();
            let (ensembles, center) = with_pool(args.threads, || {
                Ok::<_, Error>((variance_study(&cfg)?, centeredness_study(&cfg)?))
            })?
            .map_err(runtime_err)?;
            write_scenario(&args.out, &cfg)?;
            for e in &ensembles {
                let v = metrics::ensemble_variance(e, 0);
                export(&args.out, &format!("variance_{}", e.scheme.short_name()), &metrics::variance_rows(&v), format)?;
            }
            export(&args.out, "centeredness", &metrics::centeredness(&center), format)?;
            Ok(String::new())
        }
        Command::RefineStudy(args) => {
            let mut cfg = resolve(args)?;
            if cfg.refine.is_none() {
                cfg.refine = Some(Default::default());
            }
            prepare_out_dir(&args.out)?;
            let format = args.format.into();
            let traces = with_pool(args.threads, || run_monte_carlo(&cfg))?.map_err(runtime_err)?;
            write_scenario(&args.out, &cfg)?;
            for (stem, kind) in [
                ("mae_raw", EstimateKind::Raw),
                ("mae_refined", EstimateKind::Refined),
                ("mae_projected", EstimateKind::RefinedProjected),
            ] {
                let m = metrics::mae(&traces, 0, kind).map_err(runtime_err)?;
                export(&args.out, stem, &metrics::mae_rows(&m), format)?;
            }
            Ok(String::new())
        }
    }
}

/// Writes the outputs of a Monte Carlo run.
pub fn write_run(dir: &Path, cfg: &ScenarioConfig, traces: &[TrialTrace], format: Format) -> Result<(), CliError> {
    write_scenario(dir, cfg)?;
    let n_targets = cfg.targets.len();
    for k in 0..n_targets {
        let m = metrics::mae(traces, k, EstimateKind::Raw).map_err(runtime_err)?;
        let stem = if n_targets == 1 { "mae".to_string() } else { format!("mae_target{k}") };
        export(dir, &stem, &metrics::mae_rows(&m), format)?;
    }
    match format {
        Format::Csv => {
            export(dir, "estimates", &metrics::estimate_rows(traces), format)?;
            export(dir, "decisions", &metrics::decision_rows(traces), format)?;
        }
        Format::Jsonl => {
            write_with(&dir.join("trace.jsonl"), |w| metrics::write_trace_jsonl(w, traces))?;
        }
    }
    for tr in traces {
        if cfg.logging.measurements {
            let path = dir.join(format!("measurements_trial{}.csv", tr.trial));
            write_with(&path, |w| write_measurement_log(w, &tr.measurement_log))?;
        }
        if cfg.logging.messages {
            let path = dir.join(format!("messages_trial{}.jsonl", tr.trial));
            write_with(&path, |w| {
                for m in &tr.message_log {
                    serde_json::to_writer(&mut *w, m)?;
                    w.write_all(b"\n")?;
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}

/// One row per (run, parameter) of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub param: String,
    pub value: String,
}

impl Record for SweepRow {
    const HEADER: &'static [&'static str] = &["run", "param", "value"];
}

/// Splits `v1,v2,...` on commas outside brackets and quotes.
fn split_values(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quoted = false;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '"' => quoted = !quoted,
            '[' | '{' if !quoted => depth += 1,
            ']' | '}' if !quoted => depth -= 1,
            ',' if depth == 0 && !quoted => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    out
}

pub fn parse_param(arg: &str) -> Result<(String, Vec<toml::Value>), CliError> {
    let (key, values) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--param `{arg}`: expected KEY=V1,V2,...")))?;
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(CliError::Config(format!("--param `{arg}`: empty key")));
    }
    let values = split_values(values)
        .into_iter()
        .map(|v| {
            let doc: Result<toml::Table, _> = toml::from_str(&format!("v = {v}"));
            match doc {
                Ok(mut t) => Ok(t.remove("v").expect("parsed key")),
                Err(_) if !v.is_empty() => Ok(toml::Value::String(v)),
                Err(_) => Err(CliError::Config(format!("--param `{key}`: empty value"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((key, values))
}

/// Returns a copy of `cfg` with the dotted `key` set to `value`.
pub fn apply_param(cfg: &ScenarioConfig, key: &str, value: &toml::Value) -> Result<ScenarioConfig, CliError> {
    let mut root = toml::Table::try_from(cfg).map_err(runtime_err)?;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut table = &mut root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--param `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value.clone());
    let src = toml::to_string(&root).map_err(runtime_err)?;
    ScenarioConfig::from_toml_str(&src, Path::new(&format!("--param {key}"))).map_err(config_err)
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn sweep(args: &SweepArgs) -> Result<String, CliError> {
    let base = resolve(&args.run)?;
    let params = args.params.iter().map(|p| parse_param(p)).collect::<Result<Vec<_>, _>>()?;
    // validate every grid point before running any
    let mut points: Vec<(ScenarioConfig, Vec<(String, String)>)> = vec![(base, Vec::new())];
    for (key, values) in &params {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (cfg, assigned) in &points {
            for v in values {
                let c = apply_param(cfg, key, v)?;
                let mut a = assigned.clone();
                a.push((key.clone(), display_value(v)));
                next.push((c, a));
            }
        }
        points = next;
    }
    prepare_out_dir(&args.run.out)?;
    let format: Format = args.run.format.into();
    let mut index = Vec::new();
    for (i, (cfg, assigned)) in points.iter().enumerate() {
        let name = format!("run_{i:03}");
        let dir = args.run.out.join(&name);
        prepare_out_dir(&dir)?;
        let traces = with_pool(args.run.threads, || run_monte_carlo(cfg))?.map_err(runtime_err)?;
        write_run(&dir, cfg, &traces, format)?;
        for (param, value) in assigned {
            index.push(SweepRow {
                run: name.clone(),
                param: param.clone(),
                value: value.clone(),
            });
        }
    }
    export(&args.run.out, "sweep", &index, format)?;
    Ok(String::new())
}
