//! Command implementations behind the `proxyfed` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{check_key, parse_value, split_assignment, RawConfig, RunConfig};
use crate::error::{Error, Result};
use crate::federation::{run_federation, FederationRun, RoundMetrics};
use crate::gradcheck::{run_suite, LossKind, SuiteRow, SUITE_TOLERANCE};

/// Caps worker threads when set to a positive integer.
pub const THREADS_ENV: &str = "PROXYFED_THREADS";

pub const METRICS_HEADER: &str = "round,test_accuracy,pseudo_label_accuracy,excluded_count,\
loss_s,loss_u,loss_icpl,loss_gpt,comm_cost,wall_time";

/// Runs `f` on a pool sized by [`THREADS_ENV`], or on the global pool.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?
                .install(f)
        }
        Err(_) => f(),
    }
}

/// 17 significant digits.
fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

/// Per-round CSV. With `omit_wall_time` the wall_time column is written
/// as 0 so that repeated runs compare byte for byte.
pub fn metrics_csv(metrics: &[RoundMetrics], omit_wall_time: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let wall = if omit_wall_time { 0.0 } else { m.wall_time };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.round,
            real(m.test_accuracy),
            opt_real(m.pseudo_label_accuracy),
            m.excluded_count,
            real(m.loss_s),
            real(m.loss_u),
            real(m.loss_icpl),
            opt_real(m.loss_gpt),
            m.comm_cost,
            real(wall),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_test_accuracy: Option<f64>,
    pub final_pseudo_label_accuracy: Option<f64>,
    pub master_seed: u64,
    pub rounds: usize,
    pub param_count: usize,
    pub wall_time_seconds: f64,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub omit_wall_time: bool,
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        let (k, v) = split_assignment(o)?;
        raw.set(k, parse_value(v))?;
    }
    raw.resolve()
}

fn execute(cfg: &RunConfig, dir: &Path, omit_wall_time: bool) -> Result<(FederationRun, RunSummary)> {
    let fed = cfg.federation()?;
    let started = Instant::now();
    let run = with_thread_pool(|| run_federation(&fed))?;
    let wall = if omit_wall_time { 0.0 } else { started.elapsed().as_secs_f64() };
    let last = run.metrics.last();
    let summary = RunSummary {
        final_test_accuracy: last.map(|m| m.test_accuracy),
        final_pseudo_label_accuracy: last.and_then(|m| m.pseudo_label_accuracy),
        master_seed: fed.master_seed,
        rounds: run.metrics.len(),
        param_count: run.param_count,
        wall_time_seconds: wall,
        config: cfg.clone(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&run.metrics, omit_wall_time))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((run, summary))
}

pub fn cmd_run(opts: &RunOptions) -> Result<RunSummary> {
    let cfg = load_config(&opts.config, &opts.overrides)?;
    let dir = opts.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let (_, summary) = execute(&cfg, &dir, opts.omit_wall_time)?;
    Ok(summary)
}

/// One swept key and its values, from `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Splits on commas outside brackets, so list values such as `[32,16]`
/// stay whole.
fn split_top_level(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    parts.push(cur);
    parts
}

pub fn parse_sweep(spec: &str) -> Result<SweepAxis> {
    let (key, rest) = split_assignment(spec)?;
    check_key(key)?;
    let values: Vec<String> = split_top_level(rest)
        .into_iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over `{key}` has no values")));
    }
    Ok(SweepAxis {
        key: key.to_string(),
        values,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub config: PathBuf,
    pub axes: Vec<String>,
    pub seeds: usize,
    pub out: Option<PathBuf>,
    pub omit_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub values: Vec<String>,
    pub accuracies: Vec<f64>,
}

impl SweepCell {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation; 0 for a single run.
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let ss: f64 = self.accuracies.iter().map(|a| (a - m) * (a - m)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

fn cell_label(axes: &[SweepAxis], values: &[String]) -> String {
    axes.iter()
        .zip(values)
        .map(|(a, v)| {
            let v: String = v
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            format!("{}-{v}", a.key)
        })
        .collect::<Vec<_>>()
        .join("_")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_sweep(opts: &SweepOptions) -> Result<Vec<SweepCell>> {
    if opts.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    if opts.axes.is_empty() {
        return Err(Error::Config("at least one --sweep axis is required".into()));
    }
    let axes: Vec<SweepAxis> = opts.axes.iter().map(|a| parse_sweep(a)).collect::<Result<_>>()?;
    let base = RawConfig::load(&opts.config)?;
    let base_seed = base
        .resolve()?
        .master_seed
        .ok_or_else(|| Error::Config("missing required key `master_seed`".into()))?;

    // cross product, first axis outermost
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for axis in &axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }

    // Resolve every run before starting any of them.
    let mut plan = Vec::new();
    for values in &combos {
        for s in 0..opts.seeds {
            let mut raw = base.clone();
            for (axis, v) in axes.iter().zip(values) {
                raw.set(&axis.key, parse_value(v))?;
            }
            let seed = base_seed.wrapping_add(s as u64);
            raw.set("master_seed", seed.into())?;
            plan.push((values.clone(), seed, raw.resolve()?));
        }
    }

    let root = opts
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&plan[0].2.out_dir));
    let mut cells: Vec<SweepCell> = combos
        .iter()
        .map(|v| SweepCell {
            values: v.clone(),
            accuracies: Vec::new(),
        })
        .collect();
    for (i, (values, seed, cfg)) in plan.iter().enumerate() {
        let dir = root
            .join("runs")
            .join(format!("{}_seed{seed}", cell_label(&axes, values)));
        let (_, summary) = execute(cfg, &dir, opts.omit_wall_time)?;
        let acc = summary.final_test_accuracy.unwrap_or(f64::NAN);
        cells[i / opts.seeds].accuracies.push(acc);
    }

    let mut csv = String::new();
    for axis in &axes {
        csv.push_str(&axis.key);
        csv.push(',');
    }
    csv.push_str("runs,mean_final_accuracy,std_final_accuracy\n");
    for cell in &cells {
        for v in &cell.values {
            csv.push_str(&csv_field(v));
            csv.push(',');
        }
        let _ = writeln!(csv, "{},{},{}", cell.accuracies.len(), real(cell.mean()), real(cell.std()));
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("sweep_summary.csv"), csv)?;
    Ok(cells)
}

/// Prints one line per loss; returns the rows so callers can decide the
/// exit status.
pub fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<SuiteRow>> {
    let corrupt = match corrupt {
        Some(name) => Some(
            LossKind::from_name(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown loss `{name}`")))?,
        ),
        None => None,
    };
    let rows = run_suite(seed, corrupt)?;
    for r in &rows {
        println!(
            "{:<12} max_rel_error={:.3e} worst_seed={} {}",
            r.loss.name(),
            r.max_rel_error,
            r.worst_seed,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    for r in rows.iter().filter(|r| !r.passed()) {
        eprintln!(
            "gradient check failed for loss `{}` (tolerance {SUITE_TOLERANCE:e}); failing instance seeds: {:?}",
            r.loss.name(),
            r.failed_seeds
        );
    }
    Ok(rows)
}
