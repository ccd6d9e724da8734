//! Replicated experiments over finite-chain models, as driven by `smc-lab`.
//!
//! A config names one model file, a list of schemes and reference sizes, a replicate
//! count and a master seed. Replicate `r` of scheme `i` at size index `k` runs on
//! the stream `stream_key(seed, [i, k, r])`, so reports do not depend on how
//! replicates are scheduled across worker threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{run, run_with_options, stream_key, RunOptions, SmcError};
use crate::matrix::MatrixError;
use crate::oracle::{
    exact_eta_squared, exact_feynman_kac, load_model, variance_upper_bound, FiniteChainModel, OracleError,
    OracleScheme,
};
use crate::schemes::{SchemeError, SchemeSpec, SortKey};

/// Label appended to the stream key of the frozen reference trajectory used by
/// scheme comparisons.
const REFERENCE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Smc(#[from] SmcError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub path: PathBuf,
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub schemes: Vec<String>,
    pub n0: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub trim: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub run: RunSection,
    pub output: Option<OutputSection>,
}

/// A parsed config plus everything resolved from it.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schemes: Vec<SchemeSpec>,
    pub model: FiniteChainModel,
    /// SHA-256 of the config file bytes, hex encoded.
    pub config_hash: String,
    /// Directory that relative paths in the config resolve against.
    pub base_dir: PathBuf,
}

impl Experiment {
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let run = &config.run;
        if run.replicates == 0 {
            return Err(ExperimentError::Config("replicates must be at least 1".into()));
        }
        if run.n0.is_empty() || run.n0.contains(&0) {
            return Err(ExperimentError::Config("n0 must be a nonempty list of positive sizes".into()));
        }
        if run.schemes.is_empty() {
            return Err(ExperimentError::Config("schemes must not be empty".into()));
        }
        if !(0.0..=0.01).contains(&run.trim) {
            return Err(ExperimentError::Config(format!("trim must lie in [0, 0.01], got {}", run.trim)));
        }
        let schemes = run
            .schemes
            .iter()
            .map(|s| s.parse::<SchemeSpec>())
            .collect::<Result<Vec<_>, _>>()?;
        let model_path = base_dir.join(&config.model.path);
        let (model, file_horizon) = load_model(&model_path)?;
        let horizon = config.model.horizon.or(file_horizon).unwrap_or(model.horizon());
        let model = model.with_horizon(horizon)?;
        let config_hash = hex(&Sha256::digest(text.as_bytes()));
        Ok(Self {
            config,
            schemes,
            model,
            config_hash,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_text(&text, base)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.run.seed = seed;
        self
    }

    /// Output path from the config, resolved against the config directory.
    pub fn output_path(&self) -> Option<PathBuf> {
        self.config
            .output
            .as_ref()
            .and_then(|o| o.path.as_ref())
            .map(|p| self.base_dir.join(p))
    }

    fn header(&self, command: &str) -> String {
        format!(
            "# smc-lab {command}\n# config_sha256: {}\n# seed: {}\n",
            self.config_hash, self.config.run.seed
        )
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// The exact-constant family of a scheme and its sort coordinate, when defined.
pub fn oracle_scheme(spec: &SchemeSpec) -> Option<(OracleScheme, Option<SortKey>)> {
    match spec {
        SchemeSpec::Multinomial => Some((OracleScheme::Multinomial, None)),
        SchemeSpec::MultinomialResidual => Some((OracleScheme::MultinomialResidual, None)),
        SchemeSpec::Bernoulli => Some((OracleScheme::Bernoulli, None)),
        SchemeSpec::Stratified => Some((OracleScheme::Stratified, None)),
        SchemeSpec::SortedStratified { key } => Some((OracleScheme::Stratified, Some(*key))),
        SchemeSpec::StratifiedResidual { sort } => Some((OracleScheme::StratifiedResidual, *sort)),
        _ => None,
    }
}

/// Exact asymptotic constant for `spec` on `model`, if the scheme has one.
pub fn eta_squared_for(
    model: &FiniteChainModel,
    spec: &SchemeSpec,
) -> Option<Result<crate::oracle::EtaSquared, OracleError>> {
    let (kind, key) = oracle_scheme(spec)?;
    let theta = key.map(|k| model.theta_for(k));
    Some(exact_eta_squared(model, kind, theta.as_deref()))
}

/// Summary statistics of a sample, summed in index order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub mean: f64,
    pub variance: f64,
}

pub fn sample_stats(xs: &[f64]) -> SampleStats {
    let m = xs.len();
    if m == 0 {
        return SampleStats {
            mean: 0.0,
            variance: 0.0,
        };
    }
    let mean = xs.iter().sum::<f64>() / m as f64;
    let variance = if m > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    SampleStats { mean, variance }
}

/// Sample variance after dropping `k = ceil(trim * M)` replicates: `floor(k/2)` of
/// the smallest and `ceil(k/2)` of the largest.
pub fn trimmed_variance(xs: &[f64], trim: f64) -> f64 {
    let m = xs.len();
    let k = ((trim * m as f64).ceil() as usize).min(m.saturating_sub(1));
    if k == 0 {
        return sample_stats(xs).variance;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = k / 2;
    let hi = k - lo;
    sample_stats(&sorted[lo..m - hi]).variance
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scheme: String,
    pub n0: usize,
    pub replicates: usize,
    pub mean: f64,
    pub std_error: f64,
    pub variance: f64,
    pub trimmed_variance: f64,
    pub n0_variance: f64,
    pub n0_trimmed_variance: f64,
    pub exact: f64,
    pub eta_sq: Option<f64>,
    pub variance_bound: Option<f64>,
    pub noncoffin_mean: f64,
    pub noncoffin_var: f64,
    pub status: String,
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "scheme",
    "n0",
    "replicates",
    "mean",
    "std_error",
    "variance",
    "trimmed_variance",
    "n0_variance",
    "n0_trimmed_variance",
    "exact",
    "eta_sq",
    "variance_bound",
    "noncoffin_mean",
    "noncoffin_var",
    "status",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.scheme.clone(),
            self.n0.to_string(),
            self.replicates.to_string(),
            self.mean.to_string(),
            self.std_error.to_string(),
            self.variance.to_string(),
            self.trimmed_variance.to_string(),
            self.n0_variance.to_string(),
            self.n0_trimmed_variance.to_string(),
            self.exact.to_string(),
            opt(self.eta_sq),
            opt(self.variance_bound),
            self.noncoffin_mean.to_string(),
            self.noncoffin_var.to_string(),
            self.status.clone(),
        ]
    }
}

/// Per-replicate outcome.
struct Replicate {
    estimate: f64,
    /// Non-coffin offspring count per step (missing steps of degenerate runs are 0).
    non_coffin: Vec<f64>,
}

fn run_replicates(
    model: &FiniteChainModel,
    spec: &SchemeSpec,
    n0: usize,
    seeds: &[u64],
) -> Result<Vec<Replicate>, SmcError> {
    let horizon = model.horizon();
    seeds
        .par_iter()
        .map(|&seed| {
            let r = run(model, spec, n0, horizon, seed)?;
            let mut non_coffin = vec![0.0; horizon];
            for s in &r.snapshots {
                non_coffin[s.t] = s.non_coffin as f64;
            }
            Ok(Replicate {
                estimate: r.estimate,
                non_coffin,
            })
        })
        .collect()
}

/// Runs every `(scheme, n0)` pair of the experiment and returns one row each.
pub fn replicate(exp: &Experiment) -> Vec<ReportRow> {
    let run_cfg = &exp.config.run;
    let model = &exp.model;
    let horizon = model.horizon();
    let exact = exact_feynman_kac(model);
    let mut rows = Vec::new();
    for (si, spec) in exp.schemes.iter().enumerate() {
        let eta = eta_squared_for(model, spec).and_then(|r| r.ok()).map(|e| e.total);
        for (ki, &n0) in run_cfg.n0.iter().enumerate() {
            let bound = spec
                .assumption_constants(n0, horizon)
                .ok()
                .and_then(|c| variance_upper_bound(model, &c, n0).ok());
            let seeds: Vec<u64> = (0..run_cfg.replicates as u64)
                .map(|r| stream_key(run_cfg.seed, &[si as u64, ki as u64, r]))
                .collect();
            let mut row = ReportRow {
                scheme: spec.to_string(),
                n0,
                replicates: run_cfg.replicates,
                mean: f64::NAN,
                std_error: f64::NAN,
                variance: f64::NAN,
                trimmed_variance: f64::NAN,
                n0_variance: f64::NAN,
                n0_trimmed_variance: f64::NAN,
                exact,
                eta_sq: eta,
                variance_bound: bound,
                noncoffin_mean: f64::NAN,
                noncoffin_var: f64::NAN,
                status: "ok".into(),
            };
            match run_replicates(model, spec, n0, &seeds) {
                Ok(reps) => {
                    let estimates: Vec<f64> = reps.iter().map(|r| r.estimate).collect();
                    let stats = sample_stats(&estimates);
                    let trimmed = trimmed_variance(&estimates, run_cfg.trim);
                    let mut nc_mean = 0.0;
                    let mut nc_var: f64 = 0.0;
                    for t in 0..horizon {
                        let counts: Vec<f64> = reps.iter().map(|r| r.non_coffin[t]).collect();
                        let s = sample_stats(&counts);
                        nc_mean += s.mean / horizon as f64;
                        nc_var = nc_var.max(s.variance);
                    }
                    row.mean = stats.mean;
                    row.variance = stats.variance;
                    row.std_error = (stats.variance / run_cfg.replicates as f64).sqrt();
                    row.trimmed_variance = trimmed;
                    row.n0_variance = n0 as f64 * stats.variance;
                    row.n0_trimmed_variance = n0 as f64 * trimmed;
                    row.noncoffin_mean = nc_mean;
                    row.noncoffin_var = nc_var;
                }
                Err(e) => row.status = format!("error: {e}"),
            }
            rows.push(row);
        }
    }
    rows
}

/// CSV text of a replicate report, with the `#` header.
pub fn render_report(exp: &Experiment, rows: &[ReportRow]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| ExperimentError::Report(e.to_string()))?)
        .map_err(|e| ExperimentError::Report(e.to_string()))?;
    Ok(format!("{}{}", exp.header("replicate"), body))
}

/// Exact one-step resampling variances `V^2[h]` of each scheme on one ensemble.
/// Schemes whose matrices are not complete get `None`.
pub fn compare_on_ensemble(
    weights: &[f64],
    h: &[f64],
    coords: Option<&[f64]>,
    n0: usize,
    schemes: &[SchemeSpec],
) -> Result<Vec<Option<f64>>, ExperimentError> {
    let w_bar = crate::fk::average_weight(weights, n0);
    let mut h_ext = h.to_vec();
    h_ext.push(0.0);
    schemes
        .iter()
        .map(|spec| {
            if !spec.is_complete_kind() {
                return Ok(None);
            }
            let n_out = spec.n_out(weights.len(), n0)?;
            let built = spec.build(weights, coords, n0, n_out)?;
            Ok(Some(built.matrix.resampling_variance(&h_ext, w_bar, n0)?))
        })
        .collect()
}

/// One ordering assertion `lhs <= rhs` between two schemes of the list.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    pub label: String,
    pub lhs: usize,
    pub rhs: usize,
}

/// The orderings implied by the list: stratified below multinomial, the stratified
/// residual below the multinomial residual, the multinomial residual below
/// multinomial, and `optimal_sorted(h)` below every other complete scheme.
pub fn orderings(schemes: &[SchemeSpec]) -> Vec<Ordering> {
    let find = |pred: &dyn Fn(&SchemeSpec) -> bool| schemes.iter().position(pred);
    let mult = find(&|s| *s == SchemeSpec::Multinomial);
    let mres = find(&|s| *s == SchemeSpec::MultinomialResidual);
    let mut out = Vec::new();
    let mut push = |lhs: usize, rhs: usize| {
        out.push(Ordering {
            label: format!("{}<={}", schemes[lhs], schemes[rhs]),
            lhs,
            rhs,
        })
    };
    for (i, s) in schemes.iter().enumerate() {
        match s {
            SchemeSpec::Stratified | SchemeSpec::SortedStratified { .. } => {
                if let Some(m) = mult {
                    push(i, m);
                }
            }
            SchemeSpec::StratifiedResidual { .. } => {
                if let Some(m) = mres {
                    push(i, m);
                }
            }
            SchemeSpec::MultinomialResidual => {
                if let Some(m) = mult {
                    push(i, m);
                }
            }
            _ => {}
        }
    }
    for (i, s) in schemes.iter().enumerate() {
        if *s == (SchemeSpec::OptimalSorted { key: SortKey::H }) {
            for (j, other) in schemes.iter().enumerate() {
                if j != i && other.is_complete_kind() {
                    push(i, j);
                }
            }
        }
    }
    out
}

fn holds(lhs: Option<f64>, rhs: Option<f64>) -> Option<bool> {
    match (lhs, rhs) {
        (Some(a), Some(b)) => Some(a <= b + 1e-9 * a.abs().max(b.abs()) + 1e-300),
        _ => None,
    }
}

/// Wide comparison table: one row per step plus an `all` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub schemes: Vec<String>,
    pub orderings: Vec<String>,
    /// `(step label, V^2 per scheme, eta^2 per scheme, ordering outcomes)`.
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub step: String,
    pub v2: Vec<Option<f64>>,
    pub eta2: Vec<Option<f64>>,
    pub outcomes: Vec<Option<bool>>,
}

impl Comparison {
    pub fn all_pass(&self) -> bool {
        self.rows
            .iter()
            .flat_map(|r| r.outcomes.iter())
            .all(|o| *o != Some(false))
    }
}

/// Evaluates every scheme on one frozen multinomial trajectory (the first `n0` of
/// the config) with `h = h_t` from the oracle.
pub fn compare_schemes(exp: &Experiment) -> Result<Comparison, ExperimentError> {
    let model = &exp.model;
    let horizon = model.horizon();
    let n0 = exp.config.run.n0[0];
    let seed = stream_key(exp.config.run.seed, &[REFERENCE_STREAM]);
    let reference = run_with_options(
        model,
        &SchemeSpec::Multinomial,
        n0,
        horizon,
        seed,
        RunOptions { keep_trace: true },
    )?;
    let trace = reference.trace.as_ref().expect("trace was requested");
    let h = model.h_tables();
    let etas: Vec<Option<Vec<f64>>> = exp
        .schemes
        .iter()
        .map(|s| eta_squared_for(model, s).and_then(|r| r.ok()).map(|e| e.resampling))
        .collect();
    let orders = orderings(&exp.schemes);

    let mut rows = Vec::new();
    let mut v2_total: Vec<Option<f64>> = vec![Some(0.0); exp.schemes.len()];
    let mut eta_total: Vec<Option<f64>> = etas.iter().map(|e| e.as_ref().map(|_| 0.0)).collect();
    for t in 0..horizon {
        let (v2, eta2) = match trace.steps.get(t) {
            Some(step) => {
                let hv: Vec<f64> = step
                    .particles
                    .iter()
                    .map(|p| p.point().map(|&x| h.get(t, x)).unwrap_or(0.0))
                    .collect();
                let mut v2 = Vec::with_capacity(exp.schemes.len());
                for spec in &exp.schemes {
                    let coords = spec.sort_key().map(|key| {
                        step.particles
                            .iter()
                            .map(|p| p.point().map(|&x| crate::fk::FeynmanKacModel::coordinate(model, &key, t, &x).unwrap_or(0.0)).unwrap_or(0.0))
                            .collect::<Vec<f64>>()
                    });
                    let v = compare_on_ensemble(&step.weights, &hv, coords.as_deref(), n0, std::slice::from_ref(spec))?;
                    v2.push(v[0]);
                }
                let eta2 = etas.iter().map(|e| e.as_ref().map(|v| v[t])).collect::<Vec<_>>();
                (v2, eta2)
            }
            None => (vec![None; exp.schemes.len()], vec![None; exp.schemes.len()]),
        };
        for (acc, v) in v2_total.iter_mut().zip(&v2) {
            *acc = match (*acc, v) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
        }
        for (acc, v) in eta_total.iter_mut().zip(&eta2) {
            *acc = match (*acc, v) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
        }
        let outcomes = evaluate(&orders, &v2, &eta2);
        rows.push(ComparisonRow {
            step: t.to_string(),
            v2,
            eta2,
            outcomes,
        });
    }
    let outcomes = evaluate(&orders, &v2_total, &eta_total);
    rows.push(ComparisonRow {
        step: "all".into(),
        v2: v2_total,
        eta2: eta_total,
        outcomes,
    });
    Ok(Comparison {
        schemes: exp.schemes.iter().map(|s| s.to_string()).collect(),
        orderings: orders.iter().map(|o| o.label.clone()).collect(),
        rows,
    })
}

/// An ordering passes when it holds for `V^2` and, where both constants exist, for
/// `eta^2` as well.
fn evaluate(orders: &[Ordering], v2: &[Option<f64>], eta2: &[Option<f64>]) -> Vec<Option<bool>> {
    orders
        .iter()
        .map(|o| {
            let a = holds(v2[o.lhs], v2[o.rhs]);
            let b = holds(eta2[o.lhs], eta2[o.rhs]);
            match (a, b) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x),
                (Some(x), Some(y)) => Some(x && y),
            }
        })
        .collect()
}

pub fn render_comparison(exp: &Experiment, cmp: &Comparison) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    header.extend(cmp.schemes.iter().map(|s| format!("V2:{s}")));
    header.extend(cmp.schemes.iter().map(|s| format!("eta2:{s}")));
    header.extend(cmp.orderings.iter().cloned());
    w.write_record(&header)?;
    for row in &cmp.rows {
        let mut rec = vec![row.step.clone()];
        rec.extend(row.v2.iter().map(|v| opt(*v)));
        rec.extend(row.eta2.iter().map(|v| opt(*v)));
        rec.extend(row.outcomes.iter().map(|o| match o {
            Some(true) => "pass".to_string(),
            Some(false) => "fail".to_string(),
            None => String::new(),
        }));
        w.write_record(&rec)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| ExperimentError::Report(e.to_string()))?)
        .map_err(|e| ExperimentError::Report(e.to_string()))?;
    Ok(format!("{}{}", exp.header("compare-schemes"), body))
}

/// One row of a replicate report, read back for the `report` command.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub scheme: String,
    pub n0: usize,
    pub mean: f64,
    pub std_error: f64,
    pub exact: f64,
    pub z: f64,
    /// `N0 * variance / eta^2`, when the constant is defined and positive.
    pub variance_ratio: Option<f64>,
    pub status: String,
}

pub fn z_score(mean: f64, exact: f64, std_error: f64) -> f64 {
    let diff = mean - exact;
    if std_error > 0.0 {
        diff / std_error
    } else if diff.abs() <= 1e-12 * exact.abs().max(1e-300) {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

pub fn read_report(text: &str) -> Result<Vec<ReportSummary>, ExperimentError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != REPORT_COLUMNS {
        return Err(ExperimentError::Report("unexpected column layout".into()));
    }
    let num = |s: &str, what: &str| {
        s.parse::<f64>()
            .map_err(|e| ExperimentError::Report(format!("bad {what} `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mean = num(&rec[3], "mean")?;
        let std_error = num(&rec[4], "std_error")?;
        let exact = num(&rec[9], "exact")?;
        let n0_var = num(&rec[7], "n0_variance")?;
        let eta = if rec[10].is_empty() { None } else { Some(num(&rec[10], "eta_sq")?) };
        out.push(ReportSummary {
            scheme: rec[0].to_string(),
            n0: rec[1]
                .parse()
                .map_err(|e| ExperimentError::Report(format!("bad n0 `{}`: {e}", &rec[1])))?,
            mean,
            std_error,
            exact,
            z: z_score(mean, exact, std_error),
            variance_ratio: eta.filter(|e| *e > 0.0).map(|e| n0_var / e),
            status: rec[14].to_string(),
        });
    }
    Ok(out)
}
