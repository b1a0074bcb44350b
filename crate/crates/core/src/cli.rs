//! Command-line front end.
//!
//! Exit codes: 0 success, 1 assertion or numerical failure, 2 usage or
//! configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use crate::anchor::Space;
use crate::benchgen::{self, Prepared};
use crate::config::RunConfig;
use crate::error::Error;
use crate::models::write_model;
use crate::rng;
use crate::simplex::{kl, random_simplex_point};
use crate::trainers::{exact_projection_recursion, TrainConfig, SUMMARY_HEADER};
use crate::verify::{self, Suite, BOUND_TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Caps the sweep thread pool.
pub const THREADS_ENV: &str = "ANCHORLAB_THREADS";

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MODEL_FILE: &str = "model.txt";

#[derive(Debug, Parser)]
#[command(name = "anchorlab", version, about = "Anchored fine-tuning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run randomized bound and identity checks.
    Verify {
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write the reports to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Iterate the exact-projection recursion on a random pair and check its
    /// decay bound.
    Simulate {
        #[arg(long)]
        alpha: f64,
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "V", default_value_t = 8)]
        v: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one pipeline from a config file.
    Train { config: PathBuf, out_dir: PathBuf },
    /// Run the pipeline once per value (or grid point) of the swept keys.
    Sweep {
        config: PathBuf,
        /// Repeat to sweep a grid; pairs with `--values` by position.
        #[arg(long = "key", required = true)]
        keys: Vec<SweepKey>,
        /// Comma-separated values for the matching `--key`.
        #[arg(long = "values", required = true)]
        values: Vec<String>,
        /// Interpolation spaces to run each point in, comma-separated.
        /// Defaults to the config's space.
        #[arg(long)]
        spaces: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKey {
    #[value(name = "alpha")]
    Alpha,
    #[value(name = "T")]
    T,
    #[value(name = "K")]
    K,
}

impl SweepKey {
    fn config_key(self) -> &'static str {
        match self {
            SweepKey::Alpha => "anchor.alpha",
            SweepKey::T => "anchor.outer_iters",
            SweepKey::K => "anchor.inner_epochs",
        }
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(err: Error) -> CliError {
    CliError::Usage(err.to_string())
}

/// Config and argument problems are usage errors; everything raised while
/// running is a failure.
fn failure(err: Error) -> CliError {
    match err {
        Error::Config { .. } | Error::InvalidCoefficient { .. } => CliError::Usage(err.to_string()),
        other => CliError::Failure(other.to_string()),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Reproduction record written next to every CSV. Metadata lines are
/// comments, so the file parses as a config for the same run.
pub struct Manifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub outputs: Vec<String>,
    pub extra: Vec<(String, String)>,
    pub params: Option<RunConfig>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# anchorlab run manifest");
        let _ = writeln!(out, "# tool_version: {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "# started_unix: {}", unix_time());
        let _ = writeln!(out, "# command: {}", self.command);
        if let Some(p) = &self.config_path {
            let _ = writeln!(out, "# config_path: {}", p.display());
        }
        for o in &self.outputs {
            let _ = writeln!(out, "# output: {o}");
        }
        for (k, v) in &self.extra {
            let _ = writeln!(out, "# {k}: {v}");
        }
        if self.params.is_some() {
            let _ = writeln!(
                out,
                "# streams: teacher_general = scramble(seed, 0), teacher_domain = scramble(seed, 1), \
                 splits general_train..domain_test = scramble(seed, 2..5), sweep run i = scramble(seed, i)"
            );
        }
        if let Some(p) = &self.params {
            out.push_str(&p.render());
        }
        out
    }
}

// ---------------------------------------------------------------------------

pub fn cmd_verify(suite: &str, trials: usize, seed: u64, report: Option<&Path>) -> CliResult<()> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(usage)?]
    };
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let mut text = String::new();
    let mut failed = Vec::new();
    for s in suites {
        let r = verify::fuzz_bounds(s, trials, seed).map_err(failure)?;
        if !r.passed() {
            failed.push(r.suite.clone());
        }
        let block = r.to_text();
        println!("{block}");
        text.push_str(&block);
        text.push('\n');
    }
    if let Some(path) = report {
        write_file(path, &text)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("failing suites: {}", failed.join(", "))))
    }
}

/// Rows of `t,kl_to_sft,decay_bound` for the recursion on a random pair.
pub fn simulate_csv(alpha: f64, iters: usize, vocab: usize, seed: u64) -> crate::Result<(String, usize)> {
    if iters == 0 {
        return Err(Error::InvalidInput("T must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidCoefficient {
            name: "alpha",
            value: alpha,
            reason: "must lie in the open interval (0, 1)",
        });
    }
    if vocab < 2 {
        return Err(Error::InvalidInput("V must be at least 2".into()));
    }
    let mut r = rng::seeded(seed);
    let base = random_simplex_point(&mut r, vocab)?;
    let sft = random_simplex_point(&mut r, vocab)?;
    let rec = exact_projection_recursion(std::slice::from_ref(&base), std::slice::from_ref(&sft), alpha, iters)?;
    let mut csv = String::from("t,kl_to_sft,decay_bound\n");
    let mut violations = 0;
    let mut kl0 = 0.0;
    for (t, iterate) in rec.iterates.iter().enumerate() {
        let d = kl(&iterate[0], &sft)?;
        if t == 0 {
            kl0 = d;
        }
        let bound = (1.0 - alpha).powi(t as i32) * kl0;
        if d > bound + BOUND_TOLERANCE {
            violations += 1;
        }
        let _ = writeln!(csv, "{t},{d},{bound}");
    }
    Ok((csv, violations))
}

pub fn cmd_simulate(alpha: f64, iters: usize, vocab: usize, seed: u64, out: &Path) -> CliResult<()> {
    let (csv, violations) = simulate_csv(alpha, iters, vocab, seed).map_err(|e| match e {
        Error::InvalidInput(_) | Error::InvalidCoefficient { .. } => usage(e),
        other => CliError::Failure(other.to_string()),
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, &csv)?;
    let manifest = Manifest {
        command: format!("simulate --alpha {alpha:?} --T {iters} --V {vocab} --seed {seed}"),
        config_path: None,
        outputs: vec![out.display().to_string()],
        extra: vec![("streams".into(), "base, sft drawn in order from seeded(seed)".into())],
        params: None,
    };
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".manifest");
    write_file(Path::new(&manifest_path), &manifest.render())?;
    if violations > 0 {
        return Err(CliError::Failure(format!("{violations} rows exceed the decay bound")));
    }
    Ok(())
}

pub fn cmd_train(config_path: &Path, out_dir: &Path) -> CliResult<()> {
    let cfg = read_config(config_path)?;
    let train = cfg.train_config().map_err(usage)?;
    let spec = cfg.pipeline_spec().map_err(usage)?;
    let outcome = benchgen::run_pipeline(&spec, &train).map_err(failure)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join(TRAJECTORY_FILE), &outcome.trajectory.to_csv())?;
    write_file(
        &out_dir.join(SUMMARY_FILE),
        &format!("{SUMMARY_HEADER}\n{}\n", outcome.summary.csv_line()),
    )?;
    write_file(&out_dir.join(MODEL_FILE), &write_model(&outcome.model))?;
    let manifest = Manifest {
        command: "train".into(),
        config_path: Some(config_path.to_path_buf()),
        outputs: [TRAJECTORY_FILE, SUMMARY_FILE, MODEL_FILE].map(String::from).to_vec(),
        extra: Vec::new(),
        params: Some(cfg),
    };
    write_file(&out_dir.join(MANIFEST_FILE), &manifest.render())
}

/// One grid point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub assignments: Vec<(SweepKey, String)>,
    pub space: Space,
    pub config: RunConfig,
}

fn split_values(raw: &str) -> Vec<String> {
    raw.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}

/// Expands keys × values (first key slowest) × spaces into configs.
pub fn sweep_points(
    base: &RunConfig,
    keys: &[SweepKey],
    values: &[String],
    spaces: &[Space],
) -> crate::Result<Vec<SweepPoint>> {
    if keys.len() != values.len() {
        return Err(Error::InvalidInput(format!(
            "{} --key flags but {} --values lists",
            keys.len(),
            values.len()
        )));
    }
    if base.method != "anchored" {
        return Err(Error::InvalidInput(format!(
            "sweeps vary anchored hyperparameters; config method is `{}`",
            base.method
        )));
    }
    let mut grid: Vec<Vec<(SweepKey, String)>> = vec![Vec::new()];
    for (key, raw) in keys.iter().zip(values) {
        let vals = split_values(raw);
        if vals.is_empty() {
            return Err(Error::InvalidInput(format!("no values given for {}", key.config_key())));
        }
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((*key, v.clone()));
                    p
                })
            })
            .collect();
    }
    let mut points = Vec::new();
    for assignments in grid {
        for &space in spaces {
            let mut config = base.clone();
            config.anchor.space = space;
            for (key, value) in &assignments {
                config
                    .set(key.config_key(), value)
                    .map_err(|message| Error::Config { line: 0, message })?;
            }
            points.push(SweepPoint {
                assignments: assignments.clone(),
                space,
                config,
            });
        }
    }
    Ok(points)
}

/// Thread count from `ANCHORLAB_THREADS`; `None` means rayon's default.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))),
        },
    }
}

/// Summary CSV for the points, in point order, with a `status` column.
pub fn run_sweep(base: &RunConfig, points: &[SweepPoint], threads: Option<usize>) -> crate::Result<(String, usize)> {
    let prepared: Prepared = benchgen::prepare(&base.pipeline_spec()?)?;
    let configs: Vec<crate::Result<TrainConfig>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.config.train_config().map(|c| TrainConfig {
                seed: rng::scramble(base.seed, i as u64),
                ..c
            })
        })
        .collect();
    let run = || {
        use rayon::prelude::*;
        configs
            .par_iter()
            .map(|c| c.as_ref().map_err(Clone::clone).and_then(|c| benchgen::run_method(&prepared, c)))
            .collect::<Vec<_>>()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut csv = format!("{SUMMARY_HEADER},status\n");
    let mut failed = 0;
    for (point, result) in points.iter().zip(results) {
        match result {
            Ok(outcome) => {
                let _ = writeln!(csv, "{},ok", outcome.summary.csv_line());
            }
            Err(err) => {
                failed += 1;
                let a = &point.config.anchor;
                let status = err.to_string().replace([',', '\n'], ";");
                let _ = writeln!(
                    csv,
                    "anchored,{},{},{},{},,,,,{},error: {status}",
                    point.space, a.alpha, a.outer_iters, a.inner_epochs, base.seed
                );
            }
        }
    }
    Ok((csv, failed))
}

pub fn cmd_sweep(
    config_path: &Path,
    keys: &[SweepKey],
    values: &[String],
    spaces: Option<&str>,
    out_dir: &Path,
) -> CliResult<()> {
    let base = read_config(config_path)?;
    let spaces: Vec<Space> = match spaces {
        None => vec![base.anchor.space],
        Some(raw) => split_values(raw)
            .iter()
            .map(|s| s.parse::<Space>())
            .collect::<crate::Result<_>>()
            .map_err(usage)?,
    };
    if spaces.is_empty() {
        return Err(CliError::Usage("--spaces lists no space".into()));
    }
    let points = sweep_points(&base, keys, values, &spaces).map_err(usage)?;
    let threads = thread_cap()?;
    let (csv, failed) = run_sweep(&base, &points, threads).map_err(failure)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join(SUMMARY_FILE), &csv)?;
    let described: Vec<String> = keys
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{}={v}", k.config_key()))
        .collect();
    let manifest = Manifest {
        command: "sweep".into(),
        config_path: Some(config_path.to_path_buf()),
        outputs: vec![SUMMARY_FILE.into()],
        extra: vec![
            ("sweep".into(), described.join(" x ")),
            (
                "spaces".into(),
                spaces.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("runs".into(), points.len().to_string()),
        ],
        params: Some(base),
    };
    write_file(&out_dir.join(MANIFEST_FILE), &manifest.render())?;
    if failed == points.len() {
        Err(CliError::Failure("every sweep run failed".into()))
    } else {
        Ok(())
    }
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Verify {
            suite,
            trials,
            seed,
            report,
        } => cmd_verify(suite, *trials, *seed, report.as_deref()),
        Command::Simulate { alpha, t, v, seed, out } => cmd_simulate(*alpha, *t, *v, *seed, out),
        Command::Train { config, out_dir } => cmd_train(config, out_dir),
        Command::Sweep {
            config,
            keys,
            values,
            spaces,
            out_dir,
        } => cmd_sweep(config, keys, values, spaces.as_deref(), out_dir),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("anchorlab: {e}");
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_rows_and_bound_column() {
        let (csv, violations) = simulate_csv(0.5, 10, 8, 42).unwrap();
        assert_eq!(violations, 0);
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 11);
        let kl0 = rows[0][1];
        for (t, r) in rows.iter().enumerate() {
            assert_eq!(r[0], t as f64);
            assert_eq!(r[2], 0.5f64.powi(t as i32) * kl0);
            if t > 0 {
                assert!(r[1] < rows[t - 1][1]);
            }
        }
        assert!(matches!(simulate_csv(0.5, 0, 8, 42), Err(Error::InvalidInput(_))));
        assert!(simulate_csv(1.0, 3, 8, 42).is_err());
    }

    #[test]
    fn sweep_grid_order() {
        let base = RunConfig::default();
        let pts = sweep_points(
            &base,
            &[SweepKey::T, SweepKey::K],
            &["1,3".into(), "2,4".into()],
            &[Space::Logit, Space::Probability],
        )
        .unwrap();
        let got: Vec<(usize, usize, Space)> = pts
            .iter()
            .map(|p| (p.config.anchor.outer_iters, p.config.anchor.inner_epochs, p.space))
            .collect();
        assert_eq!(got.len(), 8);
        assert_eq!(got[0], (1, 2, Space::Logit));
        assert_eq!(got[1], (1, 2, Space::Probability));
        assert_eq!(got[2], (1, 4, Space::Logit));
        assert_eq!(got[7], (3, 4, Space::Probability));
    }

    #[test]
    fn sweep_rejects_bad_values() {
        let base = RunConfig::default();
        assert!(sweep_points(&base, &[SweepKey::Alpha], &["0.5,1.5".into()], &[Space::Logit]).is_err());
        assert!(sweep_points(&base, &[SweepKey::Alpha], &[], &[Space::Logit]).is_err());
        assert!(sweep_points(&base, &[SweepKey::K], &[",".into()], &[Space::Logit]).is_err());
        let sft = RunConfig {
            method: "sft".into(),
            ..RunConfig::default()
        };
        assert!(sweep_points(&sft, &[SweepKey::Alpha], &["0.5".into()], &[Space::Logit]).is_err());
    }

    #[test]
    fn manifest_parses_as_config() {
        let cfg = RunConfig::default();
        let m = Manifest {
            command: "train".into(),
            config_path: Some("x.conf".into()),
            outputs: vec!["a.csv".into()],
            extra: Vec::new(),
            params: Some(cfg.clone()),
        };
        let again = RunConfig::parse(&m.render()).unwrap();
        assert_eq!(again.train_config().unwrap(), cfg.train_config().unwrap());
        assert_eq!(again.pipeline_spec().unwrap(), cfg.pipeline_spec().unwrap());
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(run(["anchorlab", "verify", "--suite", "nosuch"]), EXIT_USAGE);
        assert_eq!(run(["anchorlab", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["anchorlab", "verify", "--suite", "lemma1", "--trials", "50"]), EXIT_OK);
        assert_eq!(failure(Error::NumericalDivergence { step: 1, detail: String::new() }).code(), EXIT_FAILURE);
        assert_eq!(failure(Error::Config { line: 1, message: String::new() }).code(), EXIT_USAGE);
    }
}
