//! The resampling matrix.
//!
//! A matrix with `n_in + 1` rows and `n_out` columns. Rows `0..n_in` are the
//! incoming particles and row `n_in` is the coffin. Storage is column-compressed:
//! each column keeps its nonzero `(row, value)` entries in row order together with
//! its column weight (the offspring weight `w_hat_j`). Builders of complete schemes
//! set the column weight to the exact mean weight; validation checks it against the
//! entry sum.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::fk::{ModelError, ParticleState, WeightedEnsemble};

/// Mixed relative/absolute comparison: `|a - b| <= max(rel * max(|a|, |b|), abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rel: 1e-12,
            abs: 1e-15,
        }
    }
}

impl Tolerance {
    pub fn relative(rel: f64) -> Self {
        Self { rel, abs: 1e-15 }
    }

    pub fn close(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= (self.rel * a.abs().max(b.abs())).max(self.abs)
    }
}

/// Outcome of drawing one column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Offspring {
    Particle(usize),
    Coffin,
}

/// First constraint violated by a matrix, in row-then-column scan order.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("matrix has {n_in} input rows but {weights} weights were supplied")]
    Shape { n_in: usize, weights: usize },
    #[error("entry ({row}, {col}) lies outside the {n_in} particle rows plus coffin row")]
    RowOutOfRange { row: usize, col: usize, n_in: usize },
    #[error("entry ({row}, {col}) = {value} is negative or not finite")]
    Entry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {actual}, expected weight {expected}")]
    RowSum {
        row: usize,
        expected: f64,
        actual: f64,
    },
    #[error("column {col} has weight {weight} but its entries sum to {entry_sum}")]
    ColumnWeight {
        col: usize,
        weight: f64,
        entry_sum: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("invalid resampling matrix: {0}")]
    Invalid(#[from] Violation),
    #[error("column {col} has zero total weight")]
    DegenerateColumn { col: usize },
    #[error("column {col} sums to {sum}, not the mean weight {w_bar}; the scheme is not complete")]
    NotComplete { col: usize, sum: f64, w_bar: f64 },
    #[error("h has length {got}, expected {expected} (particles plus coffin)")]
    HLength { expected: usize, got: usize },
    #[error("h on the coffin must be 0, got {0}")]
    CoffinValue(f64),
    #[error("column index {col} out of range for {n_out} columns")]
    ColumnIndex { col: usize, n_out: usize },
    #[error("column set is empty")]
    EmptyColumnSet,
    #[error("resampling variance evaluated to {0}, beyond rounding")]
    NegativeVariance(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One column: nonzero entries sorted by row, and the column weight.
///
/// Entries live behind a shared pointer together with their running sums, so the
/// identical columns of multinomial-type schemes cost one allocation and clones are
/// cheap. Passes over the matrix visit each run of shared columns once.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    entries: Arc<[(usize, f64)]>,
    /// Running sums of the entries, kept only for long columns.
    cumulative: Option<Arc<[f64]>>,
    weight: f64,
}

const SCAN_LIMIT: usize = 8;

impl Column {
    /// Column whose weight is the sum of its entries.
    pub fn new(entries: Vec<(usize, f64)>) -> Self {
        let entries = normalize(entries);
        let weight = entries.iter().map(|e| e.1).sum();
        Self::from_parts(entries, weight)
    }

    /// Column with an explicitly stated weight (checked by `validate`).
    pub fn with_weight(entries: Vec<(usize, f64)>, weight: f64) -> Self {
        Self::from_parts(normalize(entries), weight)
    }

    fn from_parts(entries: Vec<(usize, f64)>, weight: f64) -> Self {
        let cumulative = (entries.len() > SCAN_LIMIT).then(|| {
            let mut acc = 0.0;
            entries
                .iter()
                .map(|e| {
                    acc += e.1;
                    acc
                })
                .collect()
        });
        Self {
            entries: entries.into(),
            cumulative,
            weight,
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn entry(&self, row: usize) -> f64 {
        self.entries
            .binary_search_by_key(&row, |e| e.0)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    /// True when both columns are clones of one column (same storage and weight).
    pub fn shares_storage(&self, other: &Column) -> bool {
        Arc::ptr_eq(&self.entries, &other.entries) && self.weight.to_bits() == other.weight.to_bits()
    }

    /// Sum of the entries, accumulated in row order.
    pub fn entry_sum(&self) -> f64 {
        match &self.cumulative {
            Some(c) => c[c.len() - 1],
            None => self.entries.iter().map(|e| e.1).sum(),
        }
    }

    fn dot(&self, h: &[f64]) -> f64 {
        self.entries.iter().map(|&(row, v)| v * h[row]).sum()
    }

    fn draw<R: Rng + ?Sized>(&self, n_in: usize, rng: &mut R) -> Offspring {
        let label = |row: usize| {
            if row == n_in {
                Offspring::Coffin
            } else {
                Offspring::Particle(row)
            }
        };
        match &self.entries[..] {
            [] => Offspring::Coffin,
            [(row, _)] => label(*row),
            entries => {
                let u = rng.random::<f64>() * self.entry_sum();
                let k = match &self.cumulative {
                    Some(c) => c.partition_point(|&x| x <= u),
                    None => {
                        let mut acc = 0.0;
                        entries
                            .iter()
                            .position(|e| {
                                acc += e.1;
                                u < acc
                            })
                            .unwrap_or(entries.len())
                    }
                };
                label(entries[k.min(entries.len() - 1)].0)
            }
        }
    }
}

/// Maximal runs of consecutive columns sharing storage, as `(first index, length)`.
fn runs(columns: &[Column]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (j, c) in columns.iter().enumerate() {
        match out.last_mut() {
            Some((first, len)) if columns[*first].shares_storage(c) => *len += 1,
            _ => out.push((j, 1)),
        }
    }
    out
}

fn normalize(mut entries: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    entries.retain(|e| e.1 != 0.0);
    entries.sort_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for (row, v) in entries {
        match out.last_mut() {
            Some(last) if last.0 == row => last.1 += v,
            _ => out.push((row, v)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingMatrix {
    n_in: usize,
    columns: Vec<Column>,
}

impl ResamplingMatrix {
    pub fn from_columns(n_in: usize, columns: Vec<Column>) -> Self {
        Self { n_in, columns }
    }

    /// Builds a matrix from dense rows; the last row is the coffin row.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "a resampling matrix has at least the coffin row");
        let n_in = rows.len() - 1;
        let n_out = rows[0].len();
        let columns = (0..n_out)
            .map(|j| Column::new(rows.iter().enumerate().map(|(i, r)| (i, r[j])).collect()))
            .collect();
        Self { n_in, columns }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.columns.len()
    }

    pub fn coffin_row(&self) -> usize {
        self.n_in
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.columns[col].entry(row)
    }

    /// Offspring weights `w_hat_j`.
    pub fn column_sums(&self) -> Vec<f64> {
        self.columns.iter().map(|c| c.weight).collect()
    }

    /// Row sums including the coffin row (length `n_in + 1`).
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_in + 1];
        for (first, len) in runs(&self.columns) {
            for &(row, v) in self.columns[first].entries.iter() {
                if row <= self.n_in {
                    sums[row] += v * len as f64;
                }
            }
        }
        sums
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.n_out()]; self.n_in + 1];
        for (j, c) in self.columns.iter().enumerate() {
            for &(row, v) in c.entries.iter() {
                rows[row][j] = v;
            }
        }
        rows
    }

    /// Applies a relabeling of the particle rows: old row `i` becomes row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_in);
        let mut columns: Vec<Column> = Vec::with_capacity(self.n_out());
        for (first, len) in runs(&self.columns) {
            let c = &self.columns[first];
            let entries = c
                .entries
                .iter()
                .map(|&(row, v)| (if row == self.n_in { row } else { perm[row] }, v))
                .collect();
            columns.extend(std::iter::repeat_n(Column::with_weight(entries, c.weight), len));
        }
        Self {
            n_in: self.n_in,
            columns,
        }
    }

    /// Checks nonnegativity, row sums against `weights` and column weights against
    /// their entries. Reports the first violation found.
    pub fn validate(&self, weights: &[f64], tol: Tolerance) -> Result<(), Violation> {
        if weights.len() != self.n_in {
            return Err(Violation::Shape {
                n_in: self.n_in,
                weights: weights.len(),
            });
        }
        let groups = runs(&self.columns);
        let mut bad: Option<(usize, usize, f64)> = None;
        for &(col, _) in &groups {
            for &(row, value) in self.columns[col].entries.iter() {
                let invalid = row > self.n_in || !(value.is_finite() && value >= 0.0);
                if invalid && bad.is_none_or(|b| (row, col) < (b.0, b.1)) {
                    bad = Some((row, col, value));
                }
            }
        }
        if let Some((row, col, value)) = bad {
            if row > self.n_in {
                return Err(Violation::RowOutOfRange {
                    row,
                    col,
                    n_in: self.n_in,
                });
            }
            return Err(Violation::Entry { row, col, value });
        }
        let sums = self.row_sums();
        for (row, (&actual, &expected)) in sums.iter().zip(weights).enumerate() {
            if !tol.close(actual, expected) {
                return Err(Violation::RowSum {
                    row,
                    expected,
                    actual,
                });
            }
        }
        for &(col, _) in &groups {
            let c = &self.columns[col];
            let entry_sum = c.entry_sum();
            if !(c.weight.is_finite() && tol.close(c.weight, entry_sum)) {
                return Err(Violation::ColumnWeight {
                    col,
                    weight: c.weight,
                    entry_sum,
                });
            }
        }
        Ok(())
    }

    /// Normalized distribution of column `j` over particles and the coffin.
    pub fn column_distribution(&self, j: usize) -> Result<Vec<(Offspring, f64)>, MatrixError> {
        let c = self.columns.get(j).ok_or(MatrixError::ColumnIndex {
            col: j,
            n_out: self.n_out(),
        })?;
        let total = c.entry_sum();
        if total <= 0.0 {
            return Err(MatrixError::DegenerateColumn { col: j });
        }
        Ok(c.entries
            .iter()
            .map(|&(row, v)| {
                let o = if row == self.n_in {
                    Offspring::Coffin
                } else {
                    Offspring::Particle(row)
                };
                (o, v / total)
            })
            .collect())
    }

    /// Draws every column independently, in column order, from one rng stream.
    ///
    /// Columns with a single nonzero entry and empty columns consume no randomness;
    /// every other column consumes exactly one uniform.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Offspring> {
        self.columns.iter().map(|c| c.draw(self.n_in, rng)).collect()
    }

    /// Resamples an ensemble: offspring `j` is drawn from column `j` and carries the
    /// column weight. Offspring that land in the coffin keep their weight; it is
    /// removed at the next reweighting.
    pub fn sample_offspring<S: Clone, R: Rng + ?Sized>(
        &self,
        ens: &WeightedEnsemble<S>,
        rng: &mut R,
    ) -> Result<WeightedEnsemble<S>, MatrixError> {
        self.validate(ens.weights(), Tolerance::default())?;
        let particles: Vec<ParticleState<S>> = self
            .draw(rng)
            .into_iter()
            .map(|o| match o {
                Offspring::Particle(i) => ens.particles()[i].clone(),
                Offspring::Coffin => ParticleState::Coffin,
            })
            .collect();
        Ok(WeightedEnsemble::new(
            particles,
            self.column_sums(),
            ens.t(),
            ens.n0(),
        )?)
    }

    pub fn is_complete(&self, w_bar: f64, tol: Tolerance) -> bool {
        self.columns.iter().all(|c| tol.close(c.weight, w_bar))
    }

    /// Conditional variance of `(w_bar/N0) * sum_j h(xi_hat_j)` for a complete
    /// matrix, as the quadratic form
    /// `(w_bar/N0^2) * sum_i w_i h_i^2 - (1/N0^2) * |W^T h|^2`.
    ///
    /// `h` has one entry per particle plus a trailing zero for the coffin.
    pub fn resampling_variance(&self, h: &[f64], w_bar: f64, n0: usize) -> Result<f64, MatrixError> {
        if h.len() != self.n_in + 1 {
            return Err(MatrixError::HLength {
                expected: self.n_in + 1,
                got: h.len(),
            });
        }
        if h[self.n_in] != 0.0 {
            return Err(MatrixError::CoffinValue(h[self.n_in]));
        }
        let tol = Tolerance::default();
        if let Some((col, c)) = self
            .columns
            .iter()
            .enumerate()
            .find(|(_, c)| !tol.close(c.weight, w_bar))
        {
            return Err(MatrixError::NotComplete {
                col,
                sum: c.weight,
                w_bar,
            });
        }
        let sums = self.row_sums();
        let first: f64 = (0..self.n_in).map(|i| sums[i] * h[i] * h[i]).sum::<f64>() * w_bar;
        let second: f64 = runs(&self.columns)
            .into_iter()
            .map(|(first, len)| {
                let d = self.columns[first].dot(h);
                d * d * len as f64
            })
            .sum();
        let n0sq = (n0 * n0) as f64;
        let v = (first - second) / n0sq;
        if v >= 0.0 {
            return Ok(v);
        }
        let scale = first.abs().max(second.abs()) / n0sq;
        if v >= -1e-12 * scale {
            Ok(0.0)
        } else {
            Err(MatrixError::NegativeVariance(v))
        }
    }

    /// Replaces every listed column with the mean of the listed columns.
    pub fn average_columns(&self, cols: &[usize]) -> Result<Self, MatrixError> {
        let mut set: Vec<usize> = cols.to_vec();
        set.sort_unstable();
        set.dedup();
        if set.is_empty() {
            return Err(MatrixError::EmptyColumnSet);
        }
        if let Some(&col) = set.iter().find(|&&c| c >= self.n_out()) {
            return Err(MatrixError::ColumnIndex {
                col,
                n_out: self.n_out(),
            });
        }
        let k = set.len() as f64;
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let mut weight = 0.0;
        for &j in &set {
            let c = &self.columns[j];
            weight += c.weight;
            for &(row, v) in c.entries.iter() {
                *acc.entry(row).or_insert(0.0) += v;
            }
        }
        let mean = Column::with_weight(acc.into_iter().map(|(r, v)| (r, v / k)).collect(), weight / k);
        let mut columns = self.columns.clone();
        for &j in &set {
            columns[j] = mean.clone();
        }
        Ok(Self {
            n_in: self.n_in,
            columns,
        })
    }

    /// Exact conditional mean of the number of non-coffin offspring.
    pub fn expected_non_coffin(&self) -> f64 {
        self.non_coffin_probabilities().iter().sum()
    }

    /// Exact conditional variance of the number of non-coffin offspring.
    pub fn non_coffin_variance(&self) -> f64 {
        self.non_coffin_probabilities()
            .iter()
            .map(|p| p * (1.0 - p))
            .sum()
    }

    fn non_coffin_probabilities(&self) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| {
                let total = c.entry_sum();
                if total <= 0.0 {
                    0.0
                } else {
                    1.0 - c.entry(self.n_in) / total
                }
            })
            .collect()
    }

    /// Plain-text sparse triplets: a header `n_in n_out`, then one `row col value`
    /// line per nonzero entry. Row `n_in` is the coffin row.
    pub fn to_triplets(&self) -> String {
        let mut out = format!("{} {}\n", self.n_in, self.n_out());
        for (col, c) in self.columns.iter().enumerate() {
            for &(row, v) in c.entries.iter() {
                let _ = writeln!(out, "{row} {col} {v}");
            }
        }
        out
    }

    /// Parses the triplet format. Blank lines and `#` comments are ignored.
    pub fn from_triplets(text: &str) -> Result<Self, MatrixError> {
        let parse_err = |line: usize, message: String| MatrixError::Parse { line, message };
        let mut header: Option<(usize, usize)> = None;
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match header {
                None => {
                    if tokens.len() != 2 {
                        return Err(parse_err(line_no, "header must be `n_in n_out`".into()));
                    }
                    let n_in = tokens[0]
                        .parse::<usize>()
                        .map_err(|e| parse_err(line_no, format!("bad n_in: {e}")))?;
                    let n_out = tokens[1]
                        .parse::<usize>()
                        .map_err(|e| parse_err(line_no, format!("bad n_out: {e}")))?;
                    header = Some((n_in, n_out));
                    cols = vec![Vec::new(); n_out];
                }
                Some((n_in, n_out)) => {
                    if tokens.len() != 3 {
                        return Err(parse_err(line_no, "entry must be `row col value`".into()));
                    }
                    let row = tokens[0]
                        .parse::<usize>()
                        .map_err(|e| parse_err(line_no, format!("bad row: {e}")))?;
                    let col = tokens[1]
                        .parse::<usize>()
                        .map_err(|e| parse_err(line_no, format!("bad column: {e}")))?;
                    let value = tokens[2]
                        .parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad value: {e}")))?;
                    if row > n_in || col >= n_out {
                        return Err(parse_err(
                            line_no,
                            format!("entry ({row}, {col}) outside a {}x{n_out} matrix", n_in + 1),
                        ));
                    }
                    if !seen.insert((row, col)) {
                        return Err(parse_err(line_no, format!("duplicate entry ({row}, {col})")));
                    }
                    cols[col].push((row, value));
                }
            }
        }
        let (n_in, _) = header.ok_or_else(|| parse_err(0, "missing header".into()))?;
        Ok(Self {
            n_in,
            columns: cols.into_iter().map(Column::new).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const W: [f64; 4] = [3.2, 2.4, 0.8, 1.6];

    fn multinomial_fig1() -> ResamplingMatrix {
        ResamplingMatrix::from_dense(&[
            vec![0.8, 0.8, 0.8, 0.8, 0.0, 0.0],
            vec![0.6, 0.6, 0.6, 0.6, 0.0, 0.0],
            vec![0.2, 0.2, 0.2, 0.2, 0.0, 0.0],
            vec![0.4, 0.4, 0.4, 0.4, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0],
        ])
    }

    fn multinomial_fig3() -> ResamplingMatrix {
        ResamplingMatrix::from_dense(&[
            vec![0.8; 4],
            vec![0.6; 4],
            vec![0.2; 4],
            vec![0.4; 4],
            vec![0.0; 4],
        ])
    }

    fn stratified_fig3() -> ResamplingMatrix {
        ResamplingMatrix::from_dense(&[
            vec![2.0, 1.2, 0.0, 0.0],
            vec![0.0, 0.8, 1.6, 0.0],
            vec![0.0, 0.0, 0.4, 0.4],
            vec![0.0, 0.0, 0.0, 1.6],
            vec![0.0; 4],
        ])
    }

    /// Brute force: enumerate every joint outcome of the columns and compute the
    /// variance of (1/N0) * sum_j w_hat_j h(xi_hat_j) directly.
    fn enumerated_variance(m: &ResamplingMatrix, h: &[f64], n0: usize) -> f64 {
        let dists: Vec<Vec<(f64, f64)>> = (0..m.n_out())
            .map(|j| {
                let c = m.column(j);
                let total: f64 = c.entries().iter().map(|e| e.1).sum();
                if total == 0.0 {
                    vec![(0.0, 1.0)]
                } else {
                    c.entries()
                        .iter()
                        .map(|&(row, v)| (c.weight() * h[row] / n0 as f64, v / total))
                        .collect()
                }
            })
            .collect();
        let mut mean = 0.0;
        let mut second = 0.0;
        let mut idx = vec![0usize; dists.len()];
        loop {
            let mut p = 1.0;
            let mut x = 0.0;
            for (j, &k) in idx.iter().enumerate() {
                p *= dists[j][k].1;
                x += dists[j][k].0;
            }
            mean += p * x;
            second += p * x * x;
            let mut j = 0;
            loop {
                if j == idx.len() {
                    return second - mean * mean;
                }
                idx[j] += 1;
                if idx[j] < dists[j].len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }

    #[test]
    fn validate_figure_multinomial() {
        let m = multinomial_fig1();
        assert_eq!(m.validate(&W, Tolerance::default()), Ok(()));

        let mut dense = m.to_dense();
        dense[1][2] = -0.6;
        let bad = ResamplingMatrix::from_dense(&dense);
        assert!(matches!(
            bad.validate(&W, Tolerance::default()),
            Err(Violation::Entry { row: 1, col: 2, .. })
        ));

        match m.validate(&[3.2, 2.4, 0.8, 1.7], Tolerance::default()) {
            Err(Violation::RowSum { row: 3, expected, actual }) => {
                assert_eq!(expected, 1.7);
                assert!((actual - 1.6).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            m.validate(&W[..3], Tolerance::default()),
            Err(Violation::Shape { .. })
        ));
    }

    #[test]
    fn column_distributions() {
        let d = stratified_fig3().column_distribution(1).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].0, Offspring::Particle(0));
        assert!((d[0].1 - 0.6).abs() < 1e-12);
        assert!((d[1].1 - 0.4).abs() < 1e-12);

        let d = stratified_fig3().column_distribution(0).unwrap();
        assert_eq!(d, vec![(Offspring::Particle(0), 1.0)]);

        let rc = ResamplingMatrix::from_dense(&[
            vec![3.2, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.4, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.8, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.6, 0.0],
            vec![0.0, 0.0, 1.2, 0.4, 2.0],
        ]);
        let d = rc.column_distribution(2).unwrap();
        assert_eq!(d[0].0, Offspring::Particle(2));
        assert!((d[0].1 - 0.4).abs() < 1e-12);
        assert_eq!(d[1].0, Offspring::Coffin);
        assert!((d[1].1 - 0.6).abs() < 1e-12);

        let zero = ResamplingMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(
            zero.column_distribution(1),
            Err(MatrixError::DegenerateColumn { col: 1 })
        );
    }

    #[test]
    fn sis_sampling_copies_and_pads() {
        let sis = ResamplingMatrix::from_dense(&[
            vec![3.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.4, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.8, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.6, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0],
        ]);
        let ens = WeightedEnsemble::new(
            (0..4).map(ParticleState::Point).collect(),
            W.to_vec(),
            0,
            4,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = sis.sample_offspring(&ens, &mut rng).unwrap();
        assert_eq!(&out.particles()[..4], ens.particles());
        assert_eq!(&out.weights()[..4], &W);
        assert!(out.particles()[4].is_coffin() && out.particles()[5].is_coffin());
        assert_eq!(&out.weights()[4..], &[2.0, 2.0]);
    }

    #[test]
    fn multinomial_selection_frequencies() {
        let m = multinomial_fig3();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000usize;
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        while total < draws {
            for o in m.draw(&mut rng) {
                if let Offspring::Particle(i) = o {
                    counts[i] += 1;
                }
                total += 1;
            }
        }
        for (i, p) in [0.4, 0.3, 0.1, 0.2].into_iter().enumerate() {
            let freq = counts[i] as f64 / total as f64;
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * sigma, "particle {i}: {freq} vs {p}");
        }
    }

    #[test]
    fn resampling_variance_examples() {
        let h = [1.0, 0.0, 0.0, 0.0, 0.0];
        // oracle: four independent columns each picking particle 0 w.p. 0.4,
        // contributing (w_bar/N0) * h = 0.5 when picked: 4 * 0.25 * 0.4 * 0.6
        let v = multinomial_fig3().resampling_variance(&h, 2.0, 4).unwrap();
        assert!((v - 0.24).abs() < 1e-12);
        // only column 1 is random: 0.25 * 0.6 * 0.4
        let v = stratified_fig3().resampling_variance(&h, 2.0, 4).unwrap();
        assert!((v - 0.06).abs() < 1e-12);

        let det = ResamplingMatrix::from_dense(&[
            vec![2.0, 2.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0; 3],
        ]);
        assert_eq!(det.resampling_variance(&[1.3, -0.7, 0.0], 2.0, 3).unwrap(), 0.0);

        let rc = ResamplingMatrix::from_dense(&[vec![3.2, 0.0], vec![0.0, 0.8], vec![0.0, 1.2]]);
        assert!(matches!(
            rc.resampling_variance(&[1.0, 1.0, 0.0], 2.0, 2),
            Err(MatrixError::NotComplete { col: 0, .. })
        ));
        assert!(matches!(
            det.resampling_variance(&[1.0, 1.0, 1.0], 2.0, 3),
            Err(MatrixError::CoffinValue(_))
        ));
    }

    #[test]
    fn quadratic_form_matches_enumeration() {
        let h = [0.3, -1.1, 2.0, 0.7, 0.0];
        for m in [multinomial_fig3(), stratified_fig3()] {
            let q = m.resampling_variance(&h, 2.0, 4).unwrap();
            let e = enumerated_variance(&m, &h, 4);
            assert!((q - e).abs() <= 1e-10 * e.abs().max(1e-300), "{q} vs {e}");
        }
    }

    #[test]
    fn averaging_stratified_gives_multinomial() {
        let avg = stratified_fig3().average_columns(&[0, 1, 2, 3]).unwrap();
        let expected = multinomial_fig3();
        for (a, b) in avg.to_dense().iter().flatten().zip(expected.to_dense().iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(stratified_fig3().average_columns(&[2]).unwrap(), stratified_fig3());
        assert_eq!(
            stratified_fig3().average_columns(&[]),
            Err(MatrixError::EmptyColumnSet)
        );
    }

    #[test]
    fn completeness() {
        let bern = ResamplingMatrix::from_dense(&[
            vec![2.0, 1.2, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0, 0.4, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.8, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.6],
            vec![0.0, 0.8, 0.0, 1.6, 1.2, 0.4],
        ]);
        assert!(bern.is_complete(2.0, Tolerance::default()));
        assert!((bern.expected_non_coffin() - 4.0).abs() < 1e-12);
        assert!(bern.non_coffin_variance() <= 4.0);

        let rc = ResamplingMatrix::from_dense(&[
            vec![3.2, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.4, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.8, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.6, 0.0],
            vec![0.0, 0.0, 1.2, 0.4, 2.0],
        ]);
        assert!(!rc.is_complete(2.0, Tolerance::default()));

        let mut padded = multinomial_fig3().to_dense();
        for row in padded.iter_mut() {
            row.push(0.0);
        }
        assert!(!ResamplingMatrix::from_dense(&padded).is_complete(2.0, Tolerance::default()));
        assert!(multinomial_fig1().is_complete(2.0, Tolerance::default()));
    }

    #[test]
    fn triplet_round_trip_and_errors() {
        let m = stratified_fig3();
        let back = ResamplingMatrix::from_triplets(&m.to_triplets()).unwrap();
        assert_eq!(back, m);
        assert!(matches!(
            ResamplingMatrix::from_triplets("4\n0 0 1\n"),
            Err(MatrixError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ResamplingMatrix::from_triplets("1 1\n0 0 1\n0 0 2\n"),
            Err(MatrixError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            ResamplingMatrix::from_triplets("1 1\n2 0 1\n"),
            Err(MatrixError::Parse { line: 2, .. })
        ));
    }

    fn complete_matrix() -> impl Strategy<Value = (ResamplingMatrix, Vec<f64>)> {
        // random column-stochastic mixtures scaled to a common column weight
        (1usize..4, 1usize..4).prop_flat_map(|(n_in, n_out)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, n_in + 1), n_out),
                proptest::collection::vec(-2.0f64..2.0, n_in),
            )
                .prop_map(move |(cols, h)| {
                    let w_bar = 1.5;
                    let columns = cols
                        .into_iter()
                        .map(|c| {
                            let s: f64 = c.iter().sum::<f64>().max(1e-9);
                            let mut entries: Vec<(usize, f64)> =
                                c.iter().enumerate().map(|(i, v)| (i, v / s * w_bar)).collect();
                            if c.iter().all(|&v| v == 0.0) {
                                entries = vec![(n_in, w_bar)];
                            }
                            Column::with_weight(entries, w_bar)
                        })
                        .collect();
                    let mut hv = h;
                    hv.push(0.0);
                    (ResamplingMatrix::from_columns(n_in, columns), hv)
                })
        })
    }

    proptest! {
        #[test]
        fn relabeling_invariance((m, h) in complete_matrix(), seed in 0u64..1000) {
            let n = m.n_in();
            let n0 = 3;
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut hp = vec![0.0; n + 1];
            for i in 0..n {
                hp[perm[i]] = h[i];
            }
            let a = m.resampling_variance(&h, 1.5, n0).unwrap();
            let b = m.permute_rows(&perm).resampling_variance(&hp, 1.5, n0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn averaging_never_decreases_variance((m, h) in complete_matrix(),
                                              mask in proptest::collection::vec(any::<bool>(), 4)) {
            let cols: Vec<usize> = (0..m.n_out()).filter(|&j| mask[j]).collect();
            prop_assume!(!cols.is_empty());
            let before = m.resampling_variance(&h, 1.5, 3).unwrap();
            let after = m.average_columns(&cols).unwrap().resampling_variance(&h, 1.5, 3).unwrap();
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn quadratic_form_equals_enumeration((m, h) in complete_matrix()) {
            let q = m.resampling_variance(&h, 1.5, 3).unwrap();
            let e = enumerated_variance(&m, &h, 3);
            prop_assert!((q - e).abs() <= 1e-10 * e.abs().max(1e-12), "{} vs {}", q, e);
        }

        #[test]
        fn offspring_count_law((m, _h) in complete_matrix()) {
            // row sums play the role of weights; N0 = total / w_bar
            let total: f64 = m.row_sums()[..m.n_in()].iter().sum();
            let n0 = total / 1.5;
            prop_assert!((m.expected_non_coffin() - n0).abs() < 1e-9);
            prop_assert!(m.non_coffin_variance() <= n0 + 1e-9);
        }
    }
}
