//! Resampling schemes as deterministic matrix builders.
//!
//! Every builder maps a weight vector (and, for sorting schemes, one scalar
//! coordinate per particle) to a [`ResamplingMatrix`]. All randomness lives in
//! [`ResamplingMatrix::draw`]. The number of columns at each step is fixed in advance
//! by [`SchemeSpec::n_out`]; unused columns are pure-coffin columns of weight `w_bar`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::fk::{average_weight, compensated_sum, effective_sample_size};
use crate::matrix::{Column, ResamplingMatrix};

/// Scalar coordinate used to order particles before stratification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SortKey {
    /// The model's own scalar embedding of the state (the state index for finite chains).
    Identity,
    /// The exact conditional expectation `h_t`, when the model can supply it.
    H,
}

impl fmt::Display for SortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SortKey::Identity => "identity",
            SortKey::H => "h",
        })
    }
}

impl FromStr for SortKey {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "identity" => Ok(SortKey::Identity),
            "h" => Ok(SortKey::H),
            other => Err(SchemeError::Parse(format!("unknown sort key `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemeError {
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("pruning cutoffs must satisfy 0 < lower <= upper, got ({lower}, {upper})")]
    InvalidCutoffs { lower: f64, upper: f64 },
    #[error("adaptive threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("parallel resampling needs at least one block")]
    NoBlocks,
    #[error("{scheme} needs {needed} columns but the step allows {n_out}")]
    TooManyColumns {
        scheme: &'static str,
        needed: usize,
        n_out: usize,
    },
    #[error("residual count drifted: fractional parts sum to {sum}, nearest integer {rounded}")]
    ResidualDrift { sum: f64, rounded: f64 },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("block of {block} particles out of {n_in} gets a non-integer share of N0 = {n0}")]
    IndivisibleBlock { block: usize, n_in: usize, n0: usize },
    #[error("scheme needs `{0}` coordinates but none were supplied")]
    MissingCoordinates(SortKey),
    #[error("{got} coordinates supplied for {expected} particles")]
    CoordinateLength { expected: usize, got: usize },
    #[error("cannot parse scheme: {0}")]
    Parse(String),
}

/// Declarative description of a resampling scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum SchemeSpec {
    Sis,
    Multinomial,
    Bernoulli,
    Stratified,
    MultinomialResidual,
    StratifiedResidual { sort: Option<SortKey> },
    PruningEnrichment { lower: f64, upper: f64 },
    RejectionControl,
    Parallel { blocks: usize, inner: Box<SchemeSpec> },
    Adaptive { threshold: f64, fallback: Box<SchemeSpec> },
    SortedStratified { key: SortKey },
    OptimalSorted { key: SortKey },
}

/// A built matrix together with the scheme that produced it (adaptive schemes
/// report the branch they took).
#[derive(Debug, Clone, PartialEq)]
pub struct Built {
    pub matrix: ResamplingMatrix,
    pub chosen: String,
}

impl SchemeSpec {
    /// Checks parameter ranges recursively.
    pub fn check(&self) -> Result<(), SchemeError> {
        match self {
            SchemeSpec::PruningEnrichment { lower, upper } => {
                if *lower > 0.0 && lower <= upper && upper.is_finite() {
                    Ok(())
                } else {
                    Err(SchemeError::InvalidCutoffs {
                        lower: *lower,
                        upper: *upper,
                    })
                }
            }
            SchemeSpec::Adaptive { threshold, fallback } => {
                if !(*threshold > 0.0 && *threshold <= 1.0) {
                    return Err(SchemeError::InvalidThreshold(*threshold));
                }
                fallback.check()
            }
            SchemeSpec::Parallel { blocks, inner } => {
                if *blocks == 0 {
                    return Err(SchemeError::NoBlocks);
                }
                inner.check()
            }
            _ => Ok(()),
        }
    }

    /// Fixed column count for a step with `n_in` incoming particles.
    pub fn n_out(&self, n_in: usize, n0: usize) -> Result<usize, SchemeError> {
        Ok(match self {
            SchemeSpec::Sis | SchemeSpec::RejectionControl => n_in,
            SchemeSpec::Multinomial
            | SchemeSpec::Stratified
            | SchemeSpec::MultinomialResidual
            | SchemeSpec::StratifiedResidual { .. }
            | SchemeSpec::SortedStratified { .. } => n0,
            SchemeSpec::Bernoulli => n_in + n0,
            SchemeSpec::PruningEnrichment { .. } => 2 * n_in,
            SchemeSpec::OptimalSorted { .. } => n0 + 1,
            SchemeSpec::Parallel { blocks, inner } => {
                let k = *blocks;
                if k == 0 {
                    return Err(SchemeError::NoBlocks);
                }
                if n_in % k != 0 || n0 % k != 0 {
                    return Err(SchemeError::IndivisibleBlock {
                        block: n_in / k.max(1),
                        n_in,
                        n0,
                    });
                }
                k * inner.n_out(n_in / k, n0 / k)?
            }
            SchemeSpec::Adaptive { fallback, .. } => n_in.max(fallback.n_out(n_in, n0)?),
        })
    }

    /// The coordinate the engine must evaluate before building, if any.
    pub fn sort_key(&self) -> Option<SortKey> {
        match self {
            SchemeSpec::StratifiedResidual { sort } => *sort,
            SchemeSpec::SortedStratified { key } | SchemeSpec::OptimalSorted { key } => Some(*key),
            SchemeSpec::Parallel { inner, .. } => inner.sort_key(),
            SchemeSpec::Adaptive { fallback, .. } => fallback.sort_key(),
            _ => None,
        }
    }

    /// Whether every built matrix has all column sums equal to `w_bar`.
    pub fn is_complete_kind(&self) -> bool {
        matches!(
            self,
            SchemeSpec::Multinomial
                | SchemeSpec::Bernoulli
                | SchemeSpec::Stratified
                | SchemeSpec::MultinomialResidual
                | SchemeSpec::StratifiedResidual { .. }
                | SchemeSpec::SortedStratified { .. }
                | SchemeSpec::OptimalSorted { .. }
        )
    }

    /// Bound on `max(w_hat) / max(w)` over one resampling step.
    pub fn weight_growth(&self) -> f64 {
        match self {
            SchemeSpec::PruningEnrichment { .. } => 2.0,
            SchemeSpec::Parallel { inner, .. } => inner.weight_growth(),
            SchemeSpec::Adaptive { fallback, .. } => fallback.weight_growth(),
            _ => 1.0,
        }
    }

    /// Constants `C_t`, `t = 0..horizon`, with `N_t / N0 <= C_t` and
    /// `max w_hat_t <= C_t max w_t` under the fixed column-count policy.
    pub fn assumption_constants(&self, n0: usize, horizon: usize) -> Result<Vec<f64>, SchemeError> {
        let growth = self.weight_growth();
        let mut n_t = n0;
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            out.push((n_t as f64 / n0 as f64).max(growth));
            n_t = self.n_out(n_t, n0)?;
        }
        Ok(out)
    }

    /// Builds the matrix for one step. `coords` holds one sort coordinate per
    /// particle and is required exactly when [`SchemeSpec::sort_key`] is `Some`.
    pub fn build(
        &self,
        weights: &[f64],
        coords: Option<&[f64]>,
        n0: usize,
        n_out: usize,
    ) -> Result<Built, SchemeError> {
        if let Some(c) = coords {
            if c.len() != weights.len() {
                return Err(SchemeError::CoordinateLength {
                    expected: weights.len(),
                    got: c.len(),
                });
            }
        }
        let need = |key: SortKey| coords.ok_or(SchemeError::MissingCoordinates(key));
        let matrix = match self {
            SchemeSpec::Sis => build_sis(weights, n0, n_out)?,
            SchemeSpec::Multinomial => build_multinomial(weights, n0, n_out)?,
            SchemeSpec::Bernoulli => build_bernoulli(weights, n0, n_out)?,
            SchemeSpec::Stratified => build_stratified(weights, n0, n_out)?,
            SchemeSpec::MultinomialResidual => build_multinomial_residual(weights, n0, n_out)?,
            SchemeSpec::StratifiedResidual { sort: None } => {
                build_stratified_residual(weights, n0, n_out)?
            }
            SchemeSpec::StratifiedResidual { sort: Some(key) } => {
                let perm = sort_permutation(need(*key)?);
                build_permuted(weights, &perm, |w| build_stratified_residual(w, n0, n_out))?
            }
            SchemeSpec::PruningEnrichment { lower, upper } => {
                build_pruning_enrichment(weights, *lower, *upper, n0, n_out)?
            }
            SchemeSpec::RejectionControl => build_rejection_control(weights, n0, n_out)?,
            SchemeSpec::Parallel { blocks, inner } => {
                let partition = contiguous_partition(weights.len(), *blocks)?;
                build_parallel(weights, coords, &partition, inner, n0, n_out)?
            }
            SchemeSpec::Adaptive {
                threshold,
                fallback,
            } => {
                let chosen = adaptive_select(weights, n0, *threshold, fallback)?;
                let built = chosen.build(weights, coords, n0, n_out)?;
                return Ok(built);
            }
            SchemeSpec::SortedStratified { key } => build_sorted_stratified(weights, need(*key)?, n0, n_out)?,
            SchemeSpec::OptimalSorted { key } => build_optimal_sorted(weights, need(*key)?, n0, n_out)?,
        };
        Ok(Built {
            matrix,
            chosen: self.to_string(),
        })
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeSpec::Sis => f.write_str("sis"),
            SchemeSpec::Multinomial => f.write_str("multinomial"),
            SchemeSpec::Bernoulli => f.write_str("bernoulli"),
            SchemeSpec::Stratified => f.write_str("stratified"),
            SchemeSpec::MultinomialResidual => f.write_str("mult_residual"),
            SchemeSpec::StratifiedResidual { sort: None } => f.write_str("strat_residual"),
            SchemeSpec::StratifiedResidual { sort: Some(k) } => write!(f, "strat_residual({k})"),
            SchemeSpec::PruningEnrichment { lower, upper } => write!(f, "prune_enrich({lower},{upper})"),
            SchemeSpec::RejectionControl => f.write_str("rejection_control"),
            SchemeSpec::Parallel { blocks, inner } => write!(f, "parallel({blocks},{inner})"),
            SchemeSpec::Adaptive { threshold, fallback } => write!(f, "adaptive({threshold},{fallback})"),
            SchemeSpec::SortedStratified { key } => write!(f, "sorted_stratified({key})"),
            SchemeSpec::OptimalSorted { key } => write!(f, "optimal_sorted({key})"),
        }
    }
}

impl FromStr for SchemeSpec {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                if !s.ends_with(')') {
                    return Err(SchemeError::Parse(format!("unbalanced parentheses in `{s}`")));
                }
                (s[..open].trim(), split_args(&s[open + 1..s.len() - 1])?)
            }
            None => (s, Vec::new()),
        };
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(SchemeError::Parse(format!(
                    "`{name}` takes {n} arguments, got {}",
                    args.len()
                )))
            }
        };
        let number = |text: &str| {
            text.trim()
                .parse::<f64>()
                .map_err(|e| SchemeError::Parse(format!("bad number `{text}`: {e}")))
        };
        let spec = match name {
            "sis" => arity(0).map(|_| SchemeSpec::Sis)?,
            "multinomial" => arity(0).map(|_| SchemeSpec::Multinomial)?,
            "bernoulli" => arity(0).map(|_| SchemeSpec::Bernoulli)?,
            "stratified" => arity(0).map(|_| SchemeSpec::Stratified)?,
            "mult_residual" => arity(0).map(|_| SchemeSpec::MultinomialResidual)?,
            "rejection_control" => arity(0).map(|_| SchemeSpec::RejectionControl)?,
            "strat_residual" => match args.len() {
                0 => SchemeSpec::StratifiedResidual { sort: None },
                1 => SchemeSpec::StratifiedResidual {
                    sort: Some(args[0].parse()?),
                },
                _ => return Err(SchemeError::Parse("strat_residual takes at most one argument".into())),
            },
            "prune_enrich" => {
                arity(2)?;
                SchemeSpec::PruningEnrichment {
                    lower: number(args[0])?,
                    upper: number(args[1])?,
                }
            }
            "parallel" => {
                arity(2)?;
                SchemeSpec::Parallel {
                    blocks: args[0]
                        .trim()
                        .parse()
                        .map_err(|e| SchemeError::Parse(format!("bad block count `{}`: {e}", args[0])))?,
                    inner: Box::new(args[1].parse()?),
                }
            }
            "adaptive" => {
                arity(2)?;
                SchemeSpec::Adaptive {
                    threshold: number(args[0])?,
                    fallback: Box::new(args[1].parse()?),
                }
            }
            "sorted_stratified" => {
                arity(1)?;
                SchemeSpec::SortedStratified { key: args[0].parse()? }
            }
            "optimal_sorted" => {
                arity(1)?;
                SchemeSpec::OptimalSorted { key: args[0].parse()? }
            }
            other => return Err(SchemeError::Parse(format!("unknown scheme `{other}`"))),
        };
        spec.check()?;
        Ok(spec)
    }
}

fn split_args(s: &str) -> Result<Vec<&str>, SchemeError> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(SchemeError::Parse(format!("unbalanced parentheses in `{s}`")));
                }
            }
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(SchemeError::Parse(format!("unbalanced parentheses in `{s}`")));
    }
    let last = s[start..].trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last);
    }
    if out.iter().any(|a| a.is_empty()) {
        return Err(SchemeError::Parse(format!("empty argument in `{s}`")));
    }
    Ok(out)
}

fn positive_total(weights: &[f64]) -> Result<f64, SchemeError> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        Ok(total)
    } else {
        Err(SchemeError::ZeroWeights)
    }
}

fn coffin_column(n_in: usize, w_bar: f64) -> Column {
    Column::with_weight(vec![(n_in, w_bar)], w_bar)
}

fn point_column(row: usize, w_bar: f64) -> Column {
    Column::with_weight(vec![(row, w_bar)], w_bar)
}

fn pad(
    scheme: &'static str,
    n_in: usize,
    mut columns: Vec<Column>,
    w_bar: f64,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    if columns.len() > n_out {
        return Err(SchemeError::TooManyColumns {
            scheme,
            needed: columns.len(),
            n_out,
        });
    }
    columns.resize(n_out, coffin_column(n_in, w_bar));
    Ok(ResamplingMatrix::from_columns(n_in, columns))
}

/// Splits `w / w_bar` into an integer part and a residual weight
/// `w - k * w_bar`. Ratios within `1e-13` relative of an integer `k >= 1` count as
/// exactly `k`.
pub fn split_ratio(w: f64, w_bar: f64) -> (usize, f64) {
    let x = w / w_bar;
    let k = x.round();
    if k >= 1.0 && (x - k).abs() <= 1e-13 * k {
        return (k as usize, 0.0);
    }
    let k = x.floor();
    (k as usize, (w - k * w_bar).max(0.0))
}

/// Sweeps `weights` (in the given order) across `strata` equal-mass strata of the
/// cumulative weight axis. Returns, per stratum, `(position, mass)` pairs. Strata
/// are half-open: mass ending exactly on a boundary closes the stratum.
///
/// A particle that ends within `1e-13` (relative) of a boundary is kept whole in
/// the closing stratum, and whatever that stratum overshoots is taken off the next
/// one, so rounding never accumulates along the sweep.
fn stratify(weights: &[f64], strata: usize) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); strata];
    if strata == 0 {
        return cols;
    }
    let size = compensated_sum(weights) / strata as f64;
    let last = strata - 1;
    let mut j = 0;
    let mut cap = size;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let snap = 1e-13 * w.min(size);
        if j == last {
            cols[j].push((i, w));
            continue;
        }
        if w < cap - snap {
            cols[j].push((i, w));
            cap -= w;
            continue;
        }
        if w <= cap + snap {
            cols[j].push((i, w));
            j += 1;
            cap = size - (w - cap);
            continue;
        }
        cols[j].push((i, cap));
        j += 1;
        // Strata strictly inside the particle's mass each take exactly `size`.
        let rest = w - cap;
        let full = (((rest + snap) / size).floor() as usize).min(last - j);
        for _ in 0..full {
            cols[j].push((i, size));
            j += 1;
        }
        let tail = rest - full as f64 * size;
        if full > 0 && tail.abs() <= snap && j < last {
            if let Some(entry) = cols[j - 1].last_mut() {
                entry.1 = size + tail;
            }
            cap = size - tail;
        } else if tail > 0.0 {
            cols[j].push((i, tail));
            cap = size - tail;
        } else {
            cap = size;
        }
    }
    cols
}

/// Diagonal matrix of the weights, padded with pure-coffin columns.
pub fn build_sis(weights: &[f64], n0: usize, n_out: usize) -> Result<ResamplingMatrix, SchemeError> {
    let n_in = weights.len();
    let columns = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| Column::with_weight(vec![(i, w)], w))
        .collect();
    pad("sis", n_in, columns, average_weight(weights, n0), n_out)
}

/// `n0` identical columns `w / n0`.
pub fn build_multinomial(weights: &[f64], n0: usize, n_out: usize) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let entries: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (i, w / n0 as f64))
        .collect();
    let columns = vec![Column::with_weight(entries, w_bar); n0];
    pad("multinomial", n_in, columns, w_bar, n_out)
}

pub fn build_bernoulli(weights: &[f64], n0: usize, n_out: usize) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let mut columns = Vec::new();
    for (i, &w) in weights.iter().enumerate() {
        let (k, r) = split_ratio(w, w_bar);
        columns.extend((0..k).map(|_| point_column(i, w_bar)));
        if r > 0.0 {
            columns.push(Column::with_weight(
                vec![(i, r), (n_in, (w_bar - r).max(0.0))],
                w_bar,
            ));
        }
    }
    pad("bernoulli", n_in, columns, w_bar, n_out)
}

pub fn build_stratified(weights: &[f64], n0: usize, n_out: usize) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let columns = stratify(weights, n0)
        .into_iter()
        .map(|c| Column::with_weight(c, w_bar))
        .collect();
    pad("stratified", n_in, columns, w_bar, n_out)
}

/// Deterministic copies plus residual weights and the residual count `R`.
fn residual_parts(weights: &[f64], w_bar: f64) -> Result<(Vec<Column>, Vec<f64>, usize), SchemeError> {
    let mut det = Vec::new();
    let mut residual = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let (k, r) = split_ratio(w, w_bar);
        det.extend((0..k).map(|_| point_column(i, w_bar)));
        residual.push(r);
    }
    let sum = residual.iter().sum::<f64>() / w_bar;
    let rounded = sum.round();
    if (sum - rounded).abs() >= 1e-6 {
        return Err(SchemeError::ResidualDrift { sum, rounded });
    }
    Ok((det, residual, rounded as usize))
}

pub fn build_multinomial_residual(
    weights: &[f64],
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let (mut columns, residual, r_count) = residual_parts(weights, w_bar)?;
    if r_count > 0 {
        let entries: Vec<(usize, f64)> = residual
            .iter()
            .enumerate()
            .map(|(i, &r)| (i, r / r_count as f64))
            .collect();
        columns.extend(std::iter::repeat_n(Column::with_weight(entries, w_bar), r_count));
    }
    pad("mult_residual", n_in, columns, w_bar, n_out)
}

pub fn build_stratified_residual(
    weights: &[f64],
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let (mut columns, residual, r_count) = residual_parts(weights, w_bar)?;
    columns.extend(
        stratify(&residual, r_count)
            .into_iter()
            .map(|c| Column::with_weight(c, w_bar)),
    );
    pad("strat_residual", n_in, columns, w_bar, n_out)
}

pub fn build_pruning_enrichment(
    weights: &[f64],
    lower: f64,
    upper: f64,
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    SchemeSpec::PruningEnrichment { lower, upper }.check()?;
    let n_in = weights.len();
    let mut columns = Vec::new();
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        if w > upper {
            columns.push(Column::with_weight(vec![(i, w / 2.0)], w / 2.0));
            columns.push(Column::with_weight(vec![(i, w / 2.0)], w / 2.0));
        } else if w < lower {
            columns.push(Column::with_weight(vec![(i, w), (n_in, w)], 2.0 * w));
        } else {
            columns.push(Column::with_weight(vec![(i, w)], w));
        }
    }
    pad("prune_enrich", n_in, columns, average_weight(weights, n0), n_out)
}

pub fn build_rejection_control(
    weights: &[f64],
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let columns = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if w >= w_bar {
                Column::with_weight(vec![(i, w)], w)
            } else {
                Column::with_weight(vec![(i, w), (n_in, w_bar - w)], w_bar)
            }
        })
        .collect();
    pad("rejection_control", n_in, columns, w_bar, n_out)
}

/// Splits `0..n_in` into `blocks` contiguous blocks of equal size.
pub fn contiguous_partition(n_in: usize, blocks: usize) -> Result<Vec<Vec<usize>>, SchemeError> {
    if blocks == 0 {
        return Err(SchemeError::NoBlocks);
    }
    if n_in % blocks != 0 {
        return Err(SchemeError::Partition(format!(
            "{n_in} particles do not split into {blocks} equal blocks"
        )));
    }
    let size = n_in / blocks;
    Ok((0..blocks).map(|b| (b * size..(b + 1) * size).collect()).collect())
}

/// Block-diagonal matrix: `inner` applied to each block with the block-local mean
/// weight. Block `b` receives the share `n0 * |b| / n_in` of the reference size.
pub fn build_parallel(
    weights: &[f64],
    coords: Option<&[f64]>,
    partition: &[Vec<usize>],
    inner: &SchemeSpec,
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    let n_in = weights.len();
    if partition.is_empty() {
        return Err(SchemeError::NoBlocks);
    }
    let mut seen = vec![false; n_in];
    for block in partition {
        if block.is_empty() {
            return Err(SchemeError::Partition("empty block".into()));
        }
        for &i in block {
            if i >= n_in || std::mem::replace(&mut seen[i], true) {
                return Err(SchemeError::Partition(format!("index {i} is out of range or repeated")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(SchemeError::Partition("blocks do not cover every particle".into()));
    }
    let mut columns = Vec::new();
    for block in partition {
        if (n0 * block.len()) % n_in != 0 {
            return Err(SchemeError::IndivisibleBlock {
                block: block.len(),
                n_in,
                n0,
            });
        }
        let n0_b = n0 * block.len() / n_in;
        let local: Vec<f64> = block.iter().map(|&i| weights[i]).collect();
        let local_coords: Option<Vec<f64>> = coords.map(|c| block.iter().map(|&i| c[i]).collect());
        let inner_out = inner.n_out(block.len(), n0_b)?;
        let sub = if local.iter().sum::<f64>() > 0.0 && n0_b > 0 {
            inner
                .build(&local, local_coords.as_deref(), n0_b, inner_out)?
                .matrix
        } else {
            ResamplingMatrix::from_columns(
                block.len(),
                vec![Column::with_weight(Vec::new(), 0.0); inner_out],
            )
        };
        let local_coffin = block.len();
        let mut prev: Option<(&Column, Column)> = None;
        for c in sub.columns() {
            let mapped = match &prev {
                Some((src, out)) if src.shares_storage(c) => out.clone(),
                _ => {
                    let entries = c
                        .entries()
                        .iter()
                        .map(|&(row, v)| (if row == local_coffin { n_in } else { block[row] }, v))
                        .collect();
                    Column::with_weight(entries, c.weight())
                }
            };
            columns.push(mapped.clone());
            prev = Some((c, mapped));
        }
    }
    pad("parallel", n_in, columns, average_weight(weights, n0), n_out)
}

/// Indices sorted by `theta` from highest to lowest; ties keep index order.
pub fn sort_permutation(theta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..theta.len()).collect();
    idx.sort_by(|&a, &b| (theta[b] + 0.0).total_cmp(&(theta[a] + 0.0)));
    idx
}

/// Builds on the weights reordered by `perm` and maps rows back.
fn build_permuted<F>(weights: &[f64], perm: &[usize], build: F) -> Result<ResamplingMatrix, SchemeError>
where
    F: FnOnce(&[f64]) -> Result<ResamplingMatrix, SchemeError>,
{
    let sorted: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
    let m = build(&sorted)?;
    let mut back = vec![0; perm.len()];
    for (pos, &i) in perm.iter().enumerate() {
        back[pos] = i;
    }
    Ok(m.permute_rows(&back))
}

pub fn build_sorted_stratified(
    weights: &[f64],
    theta: &[f64],
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    let perm = sort_permutation(theta);
    build_permuted(weights, &perm, |w| build_stratified(w, n0, n_out))
}

/// Adds a pseudo-particle of weight `w_bar` at coordinate 0, sorts everything by
/// the coordinate and stratifies over `n0 + 1` strata. The pseudo-particle's mass
/// lands in the coffin row.
pub fn build_optimal_sorted(
    weights: &[f64],
    theta: &[f64],
    n0: usize,
    n_out: usize,
) -> Result<ResamplingMatrix, SchemeError> {
    positive_total(weights)?;
    let n_in = weights.len();
    let w_bar = average_weight(weights, n0);
    let mut ext_w = weights.to_vec();
    ext_w.push(w_bar);
    let mut ext_theta = theta.to_vec();
    ext_theta.push(0.0);
    let perm = sort_permutation(&ext_theta);
    let sorted: Vec<f64> = perm.iter().map(|&i| ext_w[i]).collect();
    let columns = stratify(&sorted, n0 + 1)
        .into_iter()
        .map(|c| {
            let entries = c.into_iter().map(|(pos, v)| (perm[pos], v)).collect();
            Column::with_weight(entries, w_bar)
        })
        .collect();
    pad("optimal_sorted", n_in, columns, w_bar, n_out)
}

/// Sequential importance sampling when `ESS >= threshold * n0`, otherwise `fallback`.
pub fn adaptive_select(
    weights: &[f64],
    n0: usize,
    threshold: f64,
    fallback: &SchemeSpec,
) -> Result<SchemeSpec, SchemeError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SchemeError::InvalidThreshold(threshold));
    }
    match effective_sample_size(weights) {
        Ok(ess) if ess >= threshold * n0 as f64 => Ok(SchemeSpec::Sis),
        _ => Ok(fallback.clone()),
    }
}
