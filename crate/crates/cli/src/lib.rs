//! Operator commands behind the `fedloc` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fedloc_core::config::{load_config, ConfigError, ExperimentConfig, Mode, ModeSelection};
use fedloc_core::filter::{self, KfModel, StateEstimate};
use fedloc_core::ledger::{Chain, LedgerError, VerifyReport};
use fedloc_core::metrics::{self, MetricReport, MetricsError, REPORT_CSV_HEADER};
use fedloc_core::simnet::{self, RoundTrace, SimError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const TRACE_CSV_HEADER: &str =
    "round,fog_id,raw_rssi_dbm,filtered_rssi_dbm,est_distance_m,true_distance_m,fix_x_m,fix_y_m,rejections";

/// Minimum number of rounds a benchmark times.
pub const MIN_BENCH_ROUNDS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("no config files found under {0}")]
    NoConfigs(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("ledger verification failed: {0}")]
    Tampered(VerifyReport),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A loaded config and the label its outputs are named after.
#[derive(Debug, Clone)]
pub struct LabeledConfig {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Loads each path; a directory contributes its `*.json` files in name order.
pub fn load_configs(paths: &[PathBuf]) -> Result<Vec<LabeledConfig>, CliError> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(path)
                .map_err(io_err(path))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            if found.is_empty() {
                return Err(CliError::NoConfigs(path.display().to_string()));
            }
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    files
        .into_iter()
        .map(|file| {
            let config = load_config(&file).map_err(|source| CliError::Config {
                path: file.display().to_string(),
                source,
            })?;
            let label = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "config".into());
            Ok(LabeledConfig { label, config })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| (v + 0.0).to_string()).unwrap_or_default()
}

/// Per-round trace rows. Fogs that only rejected something get a row with
/// empty numeric fields so no rejection is lost.
pub fn trace_csv(traces: &[RoundTrace], comment: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{comment}").unwrap();
    writeln!(out, "{TRACE_CSV_HEADER}").unwrap();
    for trace in traces {
        let rejections_at = |node: &str| {
            trace
                .rejections
                .iter()
                .filter(|r| r.at_node == node)
                .map(|r| format!("{}:{}", r.device_id, r.reason.as_str()))
                .collect::<Vec<_>>()
                .join(";")
        };
        let mut seen = Vec::new();
        for edge in &trace.edges {
            let (fx, fy) = match edge.fix {
                Some(fix) => (Some(fix.p.x), Some(fix.p.y)),
                None => (None, None),
            };
            for r in &edge.readings {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    trace.k,
                    r.fog_id,
                    r.raw_rssi_dbm,
                    r.filtered_rssi_dbm,
                    r.est_distance_m,
                    r.true_distance_m,
                    fmt_opt(fx),
                    fmt_opt(fy),
                    rejections_at(&r.fog_id)
                )
                .unwrap();
                seen.push(r.fog_id.as_str());
            }
        }
        let mut nodes: Vec<&str> = trace
            .rejections
            .iter()
            .map(|r| r.at_node.as_str())
            .collect();
        nodes.dedup();
        for node in nodes {
            if !seen.contains(&node) {
                writeln!(out, "{},{},,,,,,,{}", trace.k, node, rejections_at(node)).unwrap();
                seen.push(node);
            }
        }
    }
    out
}

fn comment_line(configs: &[LabeledConfig]) -> String {
    configs
        .iter()
        .map(|c| {
            format!(
                "# config={} config_hash={} seed={}",
                c.label,
                c.config.config_hash(),
                c.config.seed
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn metrics_csv(reports: &[MetricReport], configs: &[LabeledConfig]) -> String {
    let mut out = String::new();
    writeln!(out, "{}", comment_line(configs)).unwrap();
    writeln!(out, "{REPORT_CSV_HEADER}").unwrap();
    for report in reports {
        for row in report.csv_rows() {
            writeln!(out, "{row}").unwrap();
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Pooled report per mode, in run order.
    pub reports: Vec<MetricReport>,
    /// File name and contents, written under the output directory.
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    pub fn comparison_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<6} {:>14} {:>18} {:>9}",
            "mode", "mean_rmse_m", "mean_accuracy_pct", "samples"
        )
        .unwrap();
        for r in &self.reports {
            writeln!(
                out,
                "{:<6} {:>14.6} {:>18.4} {:>9}",
                r.mode.as_str(),
                r.mean_rmse_m,
                r.mean_accuracy_pct,
                r.samples
            )
            .unwrap();
        }
        out
    }
}

/// Runs every config in the selected modes and renders all output files in
/// memory. Nothing touches the filesystem here.
pub fn run_configs(
    configs: &[LabeledConfig],
    mode: Option<ModeSelection>,
    seed: Option<u64>,
) -> Result<(Vec<LabeledConfig>, RunOutput), CliError> {
    let configs: Vec<LabeledConfig> = configs
        .iter()
        .cloned()
        .map(|mut c| {
            if let Some(seed) = seed {
                c.config.seed = seed;
            }
            if let Some(mode) = mode {
                c.config.mode = mode;
            }
            c
        })
        .collect();

    let mut files = Vec::new();
    let mut per_mode: Vec<(Mode, Vec<MetricReport>)> = Vec::new();
    for c in &configs {
        let comment = comment_line(std::slice::from_ref(c));
        for m in c.config.mode.modes() {
            let traces = simnet::run_experiment(&c.config, m)?;
            let report = metrics::report(&traces, &c.config.channel, c.config.burn_in, m)?;
            files.push((
                format!("{}_{}_trace.csv", c.label, m),
                trace_csv(&traces, &comment),
            ));
            match per_mode.iter_mut().find(|(mm, _)| *mm == m) {
                Some((_, list)) => list.push(report),
                None => per_mode.push((m, vec![report])),
            }
        }
    }
    let reports = per_mode
        .iter()
        .map(|(m, list)| metrics::combine(*m, list))
        .collect::<Result<Vec<_>, _>>()?;
    files.push(("metrics.csv".into(), metrics_csv(&reports, &configs)));
    Ok((configs, RunOutput { reports, files }))
}

/// Writes every file or none: on failure, already written files are removed.
pub fn write_all(out_dir: &Path, files: &[(String, String)]) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = out_dir.join(name);
        if let Err(source) = fs::write(&path, contents) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(CliError::Io {
                path: path.display().to_string(),
                source,
            });
        }
        written.push(path);
    }
    Ok(())
}

pub fn cmd_run(
    configs: &[LabeledConfig],
    out_dir: &Path,
    mode: Option<ModeSelection>,
    seed: Option<u64>,
) -> Result<RunOutput, CliError> {
    let (_, output) = run_configs(configs, mode, seed)?;
    write_all(out_dir, &output.files)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerAction {
    Init,
    Add(Vec<String>),
    Verify,
    Show,
}

fn read_chain(path: &Path) -> Result<Chain, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Chain::from_text(&text)?)
}

/// Returns the text to print. A failed verification is an error.
pub fn cmd_ledger(
    action: &LedgerAction,
    chain_path: &Path,
    timestamp: u64,
) -> Result<String, CliError> {
    match action {
        LedgerAction::Init => {
            let chain = Chain::genesis(timestamp);
            fs::write(chain_path, chain.to_text()).map_err(io_err(chain_path))?;
            Ok(format!("initialized {}", chain_path.display()))
        }
        LedgerAction::Add(ids) => {
            if ids.is_empty() {
                return Err(CliError::Usage("ledger add needs at least one id".into()));
            }
            let chain = read_chain(chain_path)?;
            let next = chain.append_block(ids, timestamp)?;
            fs::write(chain_path, next.to_text()).map_err(io_err(chain_path))?;
            Ok(format!(
                "appended block {} with {} ids",
                next.len() - 1,
                ids.len()
            ))
        }
        LedgerAction::Verify => {
            let chain = read_chain(chain_path)?;
            let report = chain.verify();
            if report.ok {
                Ok(format!(
                    "ok: {} blocks, tip {}",
                    chain.len(),
                    chain.tip_hash().unwrap_or("")
                ))
            } else {
                Err(CliError::Tampered(report))
            }
        }
        LedgerAction::Show => {
            let chain = read_chain(chain_path)?;
            let report = chain.verify();
            if !report.ok {
                return Err(CliError::Tampered(report));
            }
            Ok(chain.authorized_ids().join("\n"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: String,
    pub phase: String,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rounds: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn get(&self, mode: &str, phase: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.phase == phase)
            .map(|r| r.mean_ns)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("# rounds={}\nmode,phase,mean_ns\n", self.rounds);
        for r in &self.rows {
            writeln!(out, "{},{},{:.1}", r.mode, r.phase, r.mean_ns).unwrap();
        }
        out
    }
}

fn per_round_ns(d: Duration, rounds: u64) -> f64 {
    d.as_nanos() as f64 / rounds as f64
}

/// Mean time of one predict+update step for an `n`-dimensional random walk
/// observed through its first component.
pub fn time_filter_step(n: usize, iterations: u64) -> Result<f64, CliError> {
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;
    let model = KfModel::new(
        DMatrix::identity(n, n),
        DMatrix::zeros(n, 0),
        c,
        DMatrix::identity(n, n) * 0.5,
        DMatrix::from_element(1, 1, 4.0),
    )
    .map_err(SimError::from)?;
    let mut state = StateEstimate::new(DVector::zeros(n), DMatrix::identity(n, n), 0)
        .map_err(SimError::from)?;
    let z = DVector::from_element(1, -60.0);
    let start = Instant::now();
    for _ in 0..iterations {
        state = filter::step(&state, &model, &z).map_err(SimError::from)?;
    }
    let elapsed = start.elapsed();
    std::hint::black_box(&state);
    Ok(per_round_ns(elapsed, iterations))
}

/// Times the local and global phases of both modes over `rounds` rounds.
pub fn cmd_bench(config: &ExperimentConfig, rounds: u64) -> Result<BenchReport, CliError> {
    let rounds = rounds.max(MIN_BENCH_ROUNDS);
    let mut rows = Vec::new();
    for mode in [Mode::Fkf, Mode::Skf] {
        let mut topology = simnet::build_topology(config, mode)?;
        let mut rng = simnet::rng_for(config.seed);
        for k in 0..rounds {
            topology.run_round(k, &mut rng)?;
        }
        let t = topology.timings;
        let local = per_round_ns(t.local, t.rounds);
        let global = per_round_ns(t.global, t.rounds);
        for (phase, v) in [
            ("local", local),
            ("global", global),
            ("total", local + global),
        ] {
            rows.push(BenchRow {
                mode: mode.as_str().into(),
                phase: phase.into(),
                mean_ns: v,
            });
        }
    }
    for n in [1usize, 4] {
        rows.push(BenchRow {
            mode: "kf".into(),
            phase: format!("step_nx{n}"),
            mean_ns: time_filter_step(n, rounds)?,
        });
    }
    Ok(BenchReport { rounds, rows })
}
