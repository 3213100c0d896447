//! Command-line harness: trace simulation, Monte Carlo experiments, and
//! boundary-function classification, with reproducible run manifests.
//!
//! Exit codes: 0 success (or `bounded` verdict), 10 unbounded verdict,
//! 20 inconclusive verdict, 1 usage error, 2 runtime error.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use sle::criterion::{integral_test, BoundaryFunction, Classification};
use sle::loewner::{generate_driving, trace_points, DrivingPath, SimParams};
use sle::mc::{
    estimate_dimension, estimate_graph_hit, estimate_interval_hit, estimate_pair_prob,
    estimate_point_prob, estimate_strip_hit, frostman_stats, ExperimentSpec,
};
use sle::observables::{q_normalization, run_q_trial, run_stopped_m_adaptive, AdaptiveProfile};
use sle::s_kappa;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "SLE_OUT_DIR";
const MANIFEST_VERSION: &str = "1";

#[derive(Parser)]
#[command(
    name = "sle-cli",
    about = "Chordal SLE boundary-proximity laboratory",
    after_help = "CONFIG\n  Flat key=value file via --config, overridden by trailing key=value\n  arguments (later wins). The run manifest echoes the resolved\n  configuration and can itself be passed back as --config to reproduce\n  the outputs byte for byte.\n\nFAMILY GRAMMAR\n  name(key=value,...) with name in {powlog, itloglog, const, custom}:\n    powlog(beta=B)      h(x) = x / (log x)^B\n    itloglog(alpha=A)   h(x) = x^(1 - (log log x)^A)\n    const(c=C)          h(x) = C\n    custom(expr=E)      E over x with + - * / ^, log, exp, sqrt\n                        (commas are not available inside E)"
)]
struct Cli {
    /// Flat key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config key `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $SLE_OUT_DIR, then ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also emit an SVG rendering where supported
    #[arg(long, global = true)]
    svg: bool,
    /// Rayon thread count (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one driving path and reconstruct the trace to CSV
    Simulate {
        /// Deterministic driving W = 0 (trace is the vertical slit 2i*sqrt(t))
        #[arg(long)]
        w_zero: bool,
        /// key=value overrides (kappa, dt, t_max, seed, run_index, n_samples)
        overrides: Vec<String>,
    },
    /// Run a Monte Carlo experiment and write results CSV + manifest
    Experiment {
        /// One of: point_prob, pair_prob, interval_hit, strip_hit,
        /// graph_hit, dimension, energy, q_statistic, drift
        kind: String,
        /// key=value overrides (see the kind's defaults in the manifest)
        overrides: Vec<String>,
    },
    /// Classify the graph-intersection criterion integral for a family
    Criterion {
        /// Family expression, e.g. powlog(beta=0.6)
        family: String,
        #[arg(long)]
        kappa: f64,
        /// Domain start r (default: family-specific)
        #[arg(long)]
        r: Option<f64>,
        /// Condensation blocks per scale
        #[arg(long, default_value_t = 48)]
        blocks: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

type AnyError = Box<dyn std::error::Error>;
type AnyResult<T> = Result<T, AnyError>;

fn run(cli: Cli) -> AnyResult<i32> {
    let out_dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Simulate { w_zero, overrides } => {
            let cfg = Config::resolve(cli.config.as_deref(), overrides, cli.seed)?;
            cmd_simulate(&cfg, *w_zero, &out_dir, cli.svg)?;
            Ok(0)
        }
        Command::Experiment { kind, overrides } => {
            let cfg = Config::resolve(cli.config.as_deref(), overrides, cli.seed)?;
            cmd_experiment(kind, cfg, &out_dir)?;
            Ok(0)
        }
        Command::Criterion { family, kappa, r, blocks } => cmd_criterion(family, *kappa, *r, *blocks),
    }
}

/// Flat key=value configuration with later-wins override semantics.
struct Config {
    values: BTreeMap<String, String>,
    /// keys actually consumed, echoed into the manifest
    used: std::cell::RefCell<BTreeMap<String, String>>,
}

impl Config {
    fn resolve(file: Option<&Path>, overrides: &[String], seed_flag: Option<u64>) -> AnyResult<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
                let k = k.trim();
                // manifest bookkeeping keys are not configuration
                if k.starts_with("manifest.") || k.starts_with("digest.") {
                    continue;
                }
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| format!("override `{ov}`: expected key=value"))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(seed) = seed_flag {
            values.insert("seed".to_string(), seed.to_string());
        }
        Ok(Config { values, used: Default::default() })
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> AnyResult<T>
    where
        T: ToString,
    {
        let v = match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| format!("config key `{key}`: cannot parse `{raw}`"))?,
            None => default,
        };
        self.used.borrow_mut().insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn get_str(&self, key: &str, default: &str) -> String {
        let v = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.used.borrow_mut().insert(key.to_string(), v.clone());
        v
    }

    fn get_list(&self, key: &str, default: &str) -> AnyResult<Vec<f64>> {
        let raw = self.get_str(key, default);
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("config key `{key}`: cannot parse `{p}`").into())
            })
            .collect()
    }
}

/// f64 -> shortest string that round-trips, the fixed CSV float format.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_output(path: &Path, bytes: &[u8]) -> AnyResult<String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(
    out_dir: &Path,
    name: &str,
    command: &str,
    kind: &str,
    cfg: &Config,
    digests: &[(String, String)],
    started: Instant,
) -> AnyResult<()> {
    let mut text = String::new();
    writeln!(text, "manifest.version={MANIFEST_VERSION}")?;
    writeln!(text, "manifest.command={command}")?;
    if !kind.is_empty() {
        writeln!(text, "manifest.kind={kind}")?;
    }
    writeln!(text, "manifest.duration_ms={}", started.elapsed().as_millis())?;
    for (file, digest) in digests {
        writeln!(text, "digest.{file}={digest}")?;
    }
    for (k, v) in cfg.used.borrow().iter() {
        writeln!(text, "{k}={v}")?;
    }
    let path = out_dir.join(format!("{name}.manifest.txt"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(cfg: &Config, w_zero: bool, out_dir: &Path, svg: bool) -> AnyResult<()> {
    let started = Instant::now();
    let kappa: f64 = cfg.get("kappa", 2.0)?;
    let dt: f64 = cfg.get("dt", 1e-3)?;
    let t_max: f64 = cfg.get("t_max", 1.0)?;
    let seed: u64 = cfg.get("seed", 1)?;
    let run_index: u64 = cfg.get("run_index", 0)?;
    let n_samples: usize = cfg.get("n_samples", 100)?;
    let w_zero = w_zero || cfg.get("w_zero", false)?;

    let params = SimParams::new(kappa, dt, t_max, seed, run_index)?;
    let path = if w_zero {
        let n = params.n_steps();
        DrivingPath {
            times: (0..=n).map(|k| k as f64 * dt).collect(),
            values: vec![0.0; n + 1],
            kappa,
            seed,
            run_index,
        }
    } else {
        generate_driving(&params)?
    };
    let n = path.n_steps();
    let mut steps: Vec<usize> = (0..=n_samples.max(1))
        .map(|i| i * n / n_samples.max(1))
        .collect();
    steps.dedup();
    if n == 0 {
        steps = vec![0];
    }
    let samples = trace_points(&path, &steps)?;

    let mut csv = String::from("step,t,re,im\n");
    for s in &samples {
        writeln!(
            csv,
            "{},{},{},{}",
            s.step,
            fmt_f64(path.times[s.step]),
            fmt_f64(s.point.re),
            fmt_f64(s.point.im)
        )?;
    }
    let csv_path = out_dir.join("trace.csv");
    let digest = write_output(&csv_path, csv.as_bytes())?;
    println!("wrote {}", csv_path.display());
    let mut digests = vec![("trace.csv".to_string(), digest)];

    if svg {
        let pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.point.re, s.point.im)).collect();
        let svg_text = polyline_svg(&pts);
        let svg_path = out_dir.join("trace.svg");
        let d = write_output(&svg_path, svg_text.as_bytes())?;
        println!("wrote {}", svg_path.display());
        digests.push(("trace.svg".to_string(), d));
    }
    write_manifest(out_dir, "trace", "simulate", "", cfg, &digests, started)
}

/// Minimal hand-emitted SVG: one polyline fitted into a 640x480 view box.
fn polyline_svg(pts: &[(f64, f64)]) -> String {
    let (w, h, pad) = (640.0, 480.0, 20.0);
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let max_y = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = max_y.max(1e-12);
    let scale = ((w - 2.0 * pad) / span_x).min((h - 2.0 * pad) / span_y);
    let mut points = String::new();
    for (x, y) in pts {
        let px = pad + (x - min_x) * scale;
        let py = h - pad - y * scale;
        let _ = write!(points, "{px:.2},{py:.2} ");
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n</svg>\n",
        points.trim_end()
    )
}

// ---------------------------------------------------------------------------
// experiment

struct Row {
    params: Vec<(&'static str, String)>,
    estimate: f64,
    stderr: f64,
    exact_or_bound: f64,
}

impl Row {
    fn new(params: Vec<(&'static str, String)>, estimate: f64, stderr: f64, exact: f64) -> Self {
        Row { params, estimate, stderr, exact_or_bound: exact }
    }
}

fn rows_to_csv(rows: &[Row]) -> String {
    let mut csv = String::new();
    let header: Vec<&str> = rows
        .first()
        .map(|r| r.params.iter().map(|(k, _)| *k).collect())
        .unwrap_or_default();
    csv.push_str(&header.join(","));
    if !header.is_empty() {
        csv.push(',');
    }
    csv.push_str("estimate,stderr,exact_or_bound,ratio\n");
    for row in rows {
        for (_, v) in &row.params {
            csv.push_str(v);
            csv.push(',');
        }
        let ratio = row.estimate / row.exact_or_bound;
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt_f64(row.estimate),
            fmt_f64(row.stderr),
            fmt_f64(row.exact_or_bound),
            fmt_f64(ratio)
        );
    }
    csv
}

fn base_spec(cfg: &Config, kappa_default: f64, lambda_default: f64) -> AnyResult<ExperimentSpec> {
    Ok(ExperimentSpec {
        kappa: cfg.get("kappa", kappa_default)?,
        n_runs: cfg.get("n", 10_000u64)?,
        seed: cfg.get("seed", 1u64)?,
        dt: cfg.get("dt", 2e-3)?,
        t_max: cfg.get("t_max", 60.0)?,
        lambda: cfg.get("lambda", lambda_default)?,
    })
}

fn cmd_experiment(kind: &str, cfg: Config, out_dir: &Path) -> AnyResult<()> {
    let started = Instant::now();
    let rows = match kind {
        "point_prob" => exp_point_prob(&cfg)?,
        "pair_prob" => exp_pair_prob(&cfg)?,
        "interval_hit" => exp_interval_hit(&cfg)?,
        "strip_hit" => exp_strip_hit(&cfg)?,
        "graph_hit" => exp_graph_hit(&cfg)?,
        "dimension" => exp_dimension(&cfg)?,
        "energy" => exp_energy(&cfg)?,
        "q_statistic" => exp_q_statistic(&cfg)?,
        "drift" => exp_drift(&cfg)?,
        other => {
            eprintln!("error: unknown experiment kind `{other}`");
            std::process::exit(1);
        }
    };
    let csv = rows_to_csv(&rows);
    let file = format!("{kind}.csv");
    let csv_path = out_dir.join(&file);
    let digest = write_output(&csv_path, csv.as_bytes())?;
    println!("wrote {}", csv_path.display());
    print!("{csv}");
    write_manifest(out_dir, kind, "experiment", kind, &cfg, &[(file, digest)], started)
}

fn exp_point_prob(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 6.0, 5e-3)?;
    let xs = cfg.get_list("x", "1")?;
    let eps = cfg.get_list("eps", "0.5")?;
    let mut rows = Vec::new();
    for &x in &xs {
        for &e in &eps {
            let est = estimate_point_prob(&spec, x, e)?;
            rows.push(Row::new(
                vec![
                    ("kappa", fmt_f64(spec.kappa)),
                    ("x", fmt_f64(x)),
                    ("eps", fmt_f64(e)),
                ],
                est.value,
                est.stderr,
                est.exact,
            ));
        }
    }
    Ok(rows)
}

fn exp_pair_prob(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 6.0, 5e-3)?;
    let x: f64 = cfg.get("x", 1.0)?;
    let y: f64 = cfg.get("y", 2.0)?;
    let eps_x: f64 = cfg.get("eps_x", 0.2)?;
    let eps_y: f64 = cfg.get("eps_y", 0.2)?;
    let est = estimate_pair_prob(&spec, x, y, eps_x, eps_y)?;
    Ok(vec![Row::new(
        vec![
            ("kappa", fmt_f64(spec.kappa)),
            ("x", fmt_f64(x)),
            ("y", fmt_f64(y)),
            ("eps_x", fmt_f64(eps_x)),
            ("eps_y", fmt_f64(eps_y)),
        ],
        est.value,
        est.stderr,
        est.exact,
    )])
}

fn exp_interval_hit(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 6.0, 5e-4)?;
    let xs = cfg.get_list("x", "1")?;
    let eps = cfg.get_list("eps", "1")?;
    let mut rows = Vec::new();
    for &x in &xs {
        for &e in &eps {
            let est = estimate_interval_hit(&spec, x, e)?;
            rows.push(Row::new(
                vec![
                    ("kappa", fmt_f64(spec.kappa)),
                    ("x", fmt_f64(x)),
                    ("eps", fmt_f64(e)),
                ],
                est.value,
                est.stderr,
                est.exact,
            ));
        }
    }
    Ok(rows)
}

fn exp_strip_hit(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 2.0, 5e-3)?;
    let eps = cfg.get_list("eps", "0.25,0.125,0.0625,0.03125")?;
    let fit = estimate_strip_hit(&spec, &eps)?;
    let mut rows = Vec::new();
    for (e, est) in &fit.rows {
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("quantity", format!("P eps={}", fmt_f64(*e))),
            ],
            est.value,
            est.stderr,
            est.exact,
        ));
    }
    if let Some((slope, se)) = fit.slope {
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("quantity", "slope".to_string()),
            ],
            slope,
            se,
            8.0 / spec.kappa - 2.0,
        ));
    }
    for ((e, _), scaled) in fit.rows.iter().zip(&fit.scaled) {
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("quantity", format!("P*log(1/eps) eps={}", fmt_f64(*e))),
            ],
            *scaled,
            f64::NAN,
            f64::NAN,
        ));
    }
    Ok(rows)
}

fn exp_graph_hit(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 3.0, 5e-3)?;
    let family = cfg.get_str("family", "powlog(beta=0.8)");
    let r: f64 = cfg.get("r", 8.0)?;
    let x_stop: f64 = cfg.get("x_stop", 100.0)?;
    let h = BoundaryFunction::parse(&family, Some(r.min(8.0)))?;
    let hit = estimate_graph_hit(&spec, &h, r, x_stop)?;
    Ok(vec![Row::new(
        vec![
            ("kappa", fmt_f64(spec.kappa)),
            ("family", h.describe()),
            ("r", fmt_f64(r)),
            ("x_stop", fmt_f64(x_stop)),
        ],
        hit.estimate,
        hit.stderr,
        hit.integral_clamped,
    )])
}

fn exp_dimension(cfg: &Config) -> AnyResult<Vec<Row>> {
    let mut spec = base_spec(cfg, 6.0, 1.25e-3)?;
    spec.n_runs = cfg.get("n", 200u64)?;
    let scale_min: i32 = cfg.get("scale_min", 4)?;
    let scale_max: i32 = cfg.get("scale_max", 8)?;
    let fit = estimate_dimension(&spec, scale_min, scale_max)?;
    let mut rows = vec![Row::new(
        vec![
            ("kappa", fmt_f64(spec.kappa)),
            ("quantity", format!("dimension scales 2^-{scale_min}..2^-{scale_max}")),
        ],
        fit.estimate,
        fit.ci / 2.0,
        2.0 - 8.0 / spec.kappa,
    )];
    for (scale, count) in &fit.counts {
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("quantity", format!("E[N(2^-{scale})]")),
            ],
            *count,
            f64::NAN,
            f64::NAN,
        ));
    }
    Ok(rows)
}

fn exp_energy(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 6.0, 5e-3)?;
    let eps = cfg.get_list("eps", "0.0625,0.015625")?;
    let delta: f64 = cfg.get("delta", 0.1)?;
    let grid_n: usize = cfg.get("grid_n", 64)?;
    let mut rows = Vec::new();
    for &e in &eps {
        let st = frostman_stats(&spec, e, delta, grid_n)?;
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("quantity", format!("mass eps={}", fmt_f64(e))),
            ],
            st.mean_mass,
            st.mass_stderr,
            st.exact_mean,
        ));
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("quantity", format!("energy eps={}", fmt_f64(e))),
            ],
            st.mean_energy,
            st.energy_stderr,
            f64::NAN,
        ));
    }
    Ok(rows)
}

fn exp_q_statistic(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 6.0, 5e-3)?;
    let family = cfg.get_str("family", "custom(expr=x/(2*log(x)))");
    let r: f64 = cfg.get("r", 2.0)?;
    let a_list = cfg.get_list("a", "10,100")?;
    let x_max: f64 = cfg.get("x_max", 1e9)?;
    let ratio: f64 = cfg.get("grid_ratio", 1.02)?;
    let h = BoundaryFunction::parse(&family, Some(r))?;
    let profile = AdaptiveProfile { lambda: spec.lambda, ..AdaptiveProfile::default() };
    let mut rows = Vec::new();
    for &a in &a_list {
        let setup = q_normalization(&h, spec.kappa, a, x_max, ratio)?;
        let qs: Vec<f64> = {
            use rayon::prelude::*;
            (0..spec.n_runs)
                .into_par_iter()
                .map(|i| run_q_trial(spec.kappa, spec.seed, i, &setup, &profile))
                .collect::<Result<_, _>>()?
        };
        let n = qs.len() as f64;
        let m1 = qs.iter().sum::<f64>() / n;
        let m2 = qs.iter().map(|q| q * q).sum::<f64>() / n;
        let se1 = (qs.iter().map(|q| (q - m1).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let se2 = (qs.iter().map(|q| (q * q - m2).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("family", h.describe()),
                ("quantity", format!("E[Q] a={}", fmt_f64(a))),
            ],
            m1,
            se1,
            1.0,
        ));
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("family", h.describe()),
                ("quantity", format!("E[Q^2] a={}", fmt_f64(a))),
            ],
            m2,
            se2,
            f64::NAN,
        ));
    }
    Ok(rows)
}

fn exp_drift(cfg: &Config) -> AnyResult<Vec<Row>> {
    let spec = base_spec(cfg, 3.0, 5e-3)?;
    let x: f64 = cfg.get("x", 1.0)?;
    let eps: f64 = cfg.get("eps", 0.3)?;
    let checkpoints = cfg.get_list("checkpoints", "0.4,0.8,1.2,1.6,2.0")?;
    let profile = AdaptiveProfile { lambda: spec.lambda, ..AdaptiveProfile::default() };
    let per_run: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..spec.n_runs)
            .into_par_iter()
            .map(|i| {
                run_stopped_m_adaptive(spec.kappa, spec.seed, i, x, eps, &checkpoints, &profile)
            })
            .collect::<Result<_, _>>()?
    };
    let exact = x.powf(-s_kappa(spec.kappa));
    let n = per_run.len() as f64;
    let mut rows = Vec::new();
    for (ci, &t) in checkpoints.iter().enumerate() {
        let mean = per_run.iter().map(|v| v[ci]).sum::<f64>() / n;
        let var = per_run.iter().map(|v| (v[ci] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.push(Row::new(
            vec![
                ("kappa", fmt_f64(spec.kappa)),
                ("x", fmt_f64(x)),
                ("eps", fmt_f64(eps)),
                ("quantity", format!("E[M stopped] t={}", fmt_f64(t))),
            ],
            mean,
            (var / n).sqrt(),
            exact,
        ));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// criterion

fn cmd_criterion(family: &str, kappa: f64, r: Option<f64>, blocks: usize) -> AnyResult<i32> {
    let h = match BoundaryFunction::parse(family, r) {
        Ok(h) => h,
        Err(e) => {
            // malformed family expressions are usage errors
            eprintln!("error: {e}");
            return Ok(1);
        }
    };
    let verdict = integral_test(&h, kappa, r.unwrap_or(h.r), blocks)?;
    println!("family:     {}", h.describe());
    println!("kappa:      {kappa}");
    println!("regularity: {}", fmt_f64(verdict.regularity_sup));
    println!("verdict:    {:?} ({})", verdict.classification, verdict.note);
    for series in &verdict.blocks {
        let label = match series.level {
            0 => "dyadic x",
            1 => "dyadic log x",
            _ => "dyadic log log x",
        };
        let vals: Vec<String> = series
            .log_integrals
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect();
        println!(
            "blocks[{label}] slope={} log-integrals: {}",
            series.slope.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".to_string()),
            vals.join(" ")
        );
    }
    Ok(match verdict.classification {
        Classification::Bounded => 0,
        Classification::Unbounded => 10,
        Classification::Inconclusive => 20,
    })
}
