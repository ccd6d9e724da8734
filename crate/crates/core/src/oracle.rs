//! Exact computations on small finite-state Feynman-Kac models.
//!
//! Everything here is a dynamic program over `(step, state)`: the forward measures
//! `mu_t[y] = E[prod_{s<=t} G_s ; X_t = y]`, their masses `Z_t`, the backward tables
//! `h_t`, the asymptotic variance constants of the residual, Bernoulli, multinomial
//! and stratified schemes, and the variance upper bound.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::fk::FeynmanKacModel;
use crate::schemes::SortKey;

pub const MAX_STATES: usize = 16;

const PROBABILITY_TOL: f64 = 1e-12;
const INTEGER_GATE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read model file: {0}")]
    Io(String),
    #[error("normalizing mass Z_{t} is zero")]
    ZeroMass { t: usize },
    #[error(
        "residual scheme precondition fails at step {t}: normalized potential {value} at state {state} is an integer"
    )]
    IntegerPotential { t: usize, state: usize, value: f64 },
    #[error("theta table needs one row of {states} values per step for {horizon} steps")]
    ThetaShape { states: usize, horizon: usize },
    #[error("variance bound needs {needed} constants, got {got}")]
    ConstantCount { needed: usize, got: usize },
}

/// Schemes with an exact asymptotic variance constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OracleScheme {
    Multinomial,
    MultinomialResidual,
    Bernoulli,
    Stratified,
    StratifiedResidual,
}

impl fmt::Display for OracleScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleScheme::Multinomial => "multinomial",
            OracleScheme::MultinomialResidual => "mult_residual",
            OracleScheme::Bernoulli => "bernoulli",
            OracleScheme::Stratified => "stratified",
            OracleScheme::StratifiedResidual => "strat_residual",
        })
    }
}

impl OracleScheme {
    fn is_residual(self) -> bool {
        matches!(self, OracleScheme::MultinomialResidual | OracleScheme::StratifiedResidual)
    }
}

/// The asymptotic variance constant split into its three sources.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSquared {
    pub initialization: f64,
    pub resampling: Vec<f64>,
    pub mutation: Vec<f64>,
    pub total: f64,
}

/// `h_t[x]` for `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HTables {
    pub h: Vec<Vec<f64>>,
}

impl HTables {
    pub fn get(&self, t: usize, x: usize) -> f64 {
        self.h[t][x]
    }
}

type Table = Vec<Vec<f64>>;

/// A finite-state Feynman-Kac model with every table enumerated.
///
/// Transition and potential blocks are indexed by step; a step beyond the last
/// block given reuses the last block, so a time-homogeneous model needs one block.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChainModel {
    init: Vec<f64>,
    trans: Vec<Table>,
    g0: Vec<f64>,
    g: Vec<Table>,
    f: Table,
    coords: Vec<f64>,
    horizon: usize,
    init_cdf: Vec<f64>,
    trans_cdf: Vec<Table>,
    h: HTables,
}

fn cdf(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|&v| {
            acc += v;
            acc
        })
        .collect()
}

fn sample_index<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let total = cdf[cdf.len() - 1];
    let u = rng.random::<f64>() * total;
    cdf.iter()
        .position(|&c| u < c)
        .unwrap_or_else(|| cdf.iter().rposition(|&c| c > 0.0).unwrap_or(0))
}

impl FiniteChainModel {
    /// Builds and validates a model. `g` holds the blocks `G_1, G_2, ...`; it may be
    /// empty only when `horizon == 1`.
    pub fn new(
        init: Vec<f64>,
        trans: Vec<Table>,
        g0: Vec<f64>,
        g: Vec<Table>,
        f: Table,
        horizon: usize,
    ) -> Result<Self, OracleError> {
        let n = init.len();
        let coords = (0..n).map(|x| x as f64).collect();
        let mut m = Self {
            init,
            trans,
            g0,
            g,
            f,
            coords,
            horizon,
            init_cdf: Vec::new(),
            trans_cdf: Vec::new(),
            h: HTables { h: Vec::new() },
        };
        m.validate()?;
        m.init_cdf = cdf(&m.init);
        m.trans_cdf = m.trans.iter().map(|p| p.iter().map(|r| cdf(r)).collect()).collect();
        m.h = m.h_tables_for(&m.f);
        Ok(m)
    }

    /// Replaces the identity sort coordinate (state index by default).
    pub fn with_coords(mut self, coords: Vec<f64>) -> Result<Self, OracleError> {
        if coords.len() != self.states() || coords.iter().any(|c| !c.is_finite()) {
            return Err(OracleError::InvalidModel(format!(
                "coord needs {} finite values",
                self.states()
            )));
        }
        self.coords = coords;
        Ok(self)
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self, OracleError> {
        let mut m = Self::new(
            self.init.clone(),
            self.trans.clone(),
            self.g0.clone(),
            self.g.clone(),
            self.f.clone(),
            horizon,
        )?;
        m.coords = self.coords.clone();
        Ok(m)
    }

    fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::InvalidModel(m));
        let n = self.init.len();
        if n == 0 || n > MAX_STATES {
            return bad(format!("state count must be in 1..={MAX_STATES}, got {n}"));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        let prob_vec = |v: &[f64]| {
            v.len() == n
                && v.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (v.iter().sum::<f64>() - 1.0).abs() <= PROBABILITY_TOL
        };
        if !prob_vec(&self.init) {
            return bad("init must be a probability vector".into());
        }
        if self.trans.is_empty() {
            return bad("missing transition matrix".into());
        }
        for (k, p) in self.trans.iter().enumerate() {
            if p.len() != n || !p.iter().all(|r| prob_vec(r)) {
                return bad(format!("transition block {k} must be {n}x{n} row-stochastic"));
            }
        }
        let nonneg = |v: &[f64]| v.len() == n && v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !nonneg(&self.g0) {
            return bad(format!("G 0 must hold {n} finite nonnegative values"));
        }
        if self.g.is_empty() && self.horizon > 1 {
            return bad("G 1 is required when the horizon exceeds 1".into());
        }
        for (k, g) in self.g.iter().enumerate() {
            if g.len() != n || !g.iter().all(|r| nonneg(r)) {
                return bad(format!("G {} must be {n}x{n} finite nonnegative", k + 1));
            }
        }
        if self.f.len() != n || !self.f.iter().all(|r| r.len() == n && r.iter().all(|x| x.is_finite())) {
            return bad(format!("f must be {n}x{n} finite"));
        }
        Ok(())
    }

    pub fn states(&self) -> usize {
        self.init.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    /// Transition matrix from `X_t` to `X_{t+1}`.
    pub fn transition(&self, t: usize) -> &Table {
        &self.trans[t.min(self.trans.len() - 1)]
    }

    pub fn g0(&self) -> &[f64] {
        &self.g0
    }

    /// `G_t[x_prev][x]` for `t >= 1`.
    pub fn potential_table(&self, t: usize) -> &Table {
        assert!(t >= 1, "G_0 is a vector; use g0()");
        &self.g[(t - 1).min(self.g.len() - 1)]
    }

    pub fn f_table(&self) -> &Table {
        &self.f
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn h_tables(&self) -> &HTables {
        &self.h
    }

    /// Forward measures `mu_0..mu_{T-1}`.
    pub fn forward_measures(&self) -> Vec<Vec<f64>> {
        let n = self.states();
        let mut mu = Vec::with_capacity(self.horizon);
        mu.push((0..n).map(|x| self.init[x] * self.g0[x]).collect::<Vec<f64>>());
        for t in 1..self.horizon {
            let prev = &mu[t - 1];
            let p = self.transition(t - 1);
            let g = self.potential_table(t);
            let next = (0..n)
                .map(|y| (0..n).map(|x| prev[x] * p[x][y] * g[x][y]).sum())
                .collect();
            mu.push(next);
        }
        mu
    }

    /// `Z_t = E[prod_{s<=t} G_s]` for `t = 0..T-1`.
    pub fn masses(&self) -> Vec<f64> {
        self.forward_measures().iter().map(|m| m.iter().sum()).collect()
    }

    fn exact_for(&self, f: &Table) -> f64 {
        let mu = self.forward_measures();
        let last = &mu[self.horizon - 1];
        let p = self.transition(self.horizon - 1);
        let n = self.states();
        (0..n)
            .map(|x| last[x] * (0..n).map(|y| p[x][y] * f[x][y]).sum::<f64>())
            .sum()
    }

    fn h_tables_for(&self, f: &Table) -> HTables {
        let n = self.states();
        let big_t = self.horizon;
        let mut h = vec![vec![0.0; n]; big_t];
        let p = self.transition(big_t - 1);
        h[big_t - 1] = (0..n).map(|x| (0..n).map(|y| p[x][y] * f[x][y]).sum()).collect();
        for t in (0..big_t - 1).rev() {
            let p = self.transition(t);
            let g = self.potential_table(t + 1);
            h[t] = (0..n)
                .map(|x| (0..n).map(|y| p[x][y] * g[x][y] * h[t + 1][y]).sum())
                .collect();
        }
        HTables { h }
    }

    /// `G_{t+1} h_{t+1}` on the transition `(x, y)` out of step `t`, with `G_T h_T = f`.
    fn next_value(&self, t: usize, h: &HTables, f: &Table, x: usize, y: usize) -> f64 {
        if t + 1 < self.horizon {
            self.potential_table(t + 1)[x][y] * h.h[t + 1][y]
        } else {
            f[x][y]
        }
    }

    pub fn theta_for(&self, key: SortKey) -> Vec<Vec<f64>> {
        match key {
            SortKey::Identity => vec![self.coords.clone(); self.horizon],
            SortKey::H => self.h.h.clone(),
        }
    }

    fn eta_for(
        &self,
        f: &Table,
        scheme: OracleScheme,
        theta: Option<&[Vec<f64>]>,
    ) -> Result<EtaSquared, OracleError> {
        let n = self.states();
        let big_t = self.horizon;
        if let Some(th) = theta {
            if th.len() < big_t || th.iter().take(big_t).any(|r| r.len() != n) {
                return Err(OracleError::ThetaShape {
                    states: n,
                    horizon: big_t,
                });
            }
        }
        let mu = self.forward_measures();
        let z: Vec<f64> = mu.iter().map(|m| m.iter().sum()).collect();
        if let Some(t) = z.iter().position(|&v| v <= 0.0) {
            return Err(OracleError::ZeroMass { t });
        }
        let h = self.h_tables_for(f);

        let mut mean = 0.0;
        let mut second = 0.0;
        for x in 0..n {
            let v = self.g0[x] * h.h[0][x];
            mean += self.init[x] * v;
            second += self.init[x] * v * v;
        }
        let initialization = (second - mean * mean).max(0.0);

        let mut resampling = Vec::with_capacity(big_t);
        for t in 0..big_t {
            // cells (base weight, normalized potential, state)
            let mut cells: Vec<(f64, f64, usize)> = Vec::new();
            if t == 0 {
                for y in 0..n {
                    cells.push((self.init[y], self.g0[y] / z[0], y));
                }
            } else {
                let p = self.transition(t - 1);
                let g = self.potential_table(t);
                for x in 0..n {
                    for y in 0..n {
                        let base = mu[t - 1][x] / z[t - 1] * p[x][y];
                        cells.push((base, z[t - 1] * g[x][y] / z[t], y));
                    }
                }
            }
            cells.retain(|c| c.0 > 0.0);
            let ht = &h.h[t];
            if scheme.is_residual() {
                check_residual(t, &cells, ht)?;
            }
            let frac = |g: f64| {
                let r = g.round();
                if (g - r).abs() <= INTEGER_GATE {
                    0.0
                } else {
                    g - g.floor()
                }
            };
            let zero_theta = vec![0.0; n];
            let th: &[f64] = match (scheme, theta) {
                (OracleScheme::Stratified | OracleScheme::StratifiedResidual, Some(th)) => &th[t],
                _ => &zero_theta,
            };
            let value = match scheme {
                OracleScheme::Bernoulli => cells
                    .iter()
                    .map(|&(b, g, y)| {
                        let q = frac(g);
                        b * q * (1.0 - q) * ht[y] * ht[y]
                    })
                    .sum::<f64>(),
                OracleScheme::Multinomial | OracleScheme::Stratified => {
                    let weighted: Vec<(f64, usize)> = cells.iter().map(|&(b, g, y)| (b * g, y)).collect();
                    level_set_variance(&weighted, ht, th)
                }
                OracleScheme::MultinomialResidual | OracleScheme::StratifiedResidual => {
                    let weighted: Vec<(f64, usize)> =
                        cells.iter().map(|&(b, g, y)| (b * frac(g), y)).collect();
                    level_set_variance(&weighted, ht, th)
                }
            };
            resampling.push(z[t] * z[t] * value);
        }

        let mut mutation = Vec::with_capacity(big_t);
        for t in 0..big_t {
            let p = self.transition(t);
            let mut acc = 0.0;
            for x in 0..n {
                let second: f64 = (0..n)
                    .map(|y| {
                        let v = self.next_value(t, &h, f, x, y);
                        p[x][y] * v * v
                    })
                    .sum();
                acc += mu[t][x] * (second - h.h[t][x] * h.h[t][x]).max(0.0);
            }
            mutation.push(z[t] * acc);
        }

        let total = initialization + resampling.iter().sum::<f64>() + mutation.iter().sum::<f64>();
        Ok(EtaSquared {
            initialization,
            resampling,
            mutation,
            total,
        })
    }
}

/// Fails when some normalized potential on the support sits on an integer `>= 1`,
/// unless the step is trivial: every normalized potential equals 1, or `h_t` is
/// constant on the support.
fn check_residual(t: usize, cells: &[(f64, f64, usize)], ht: &[f64]) -> Result<(), OracleError> {
    let offending = cells
        .iter()
        .find(|&&(_, g, _)| g.round() >= 1.0 && (g - g.round()).abs() <= INTEGER_GATE);
    let Some(&(_, value, state)) = offending else {
        return Ok(());
    };
    let all_one = cells.iter().all(|&(_, g, _)| (g - 1.0).abs() <= INTEGER_GATE);
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, _, y)| {
        (lo.min(ht[y]), hi.max(ht[y]))
    });
    let h_constant = hi - lo <= 1e-12 * hi.abs().max(lo.abs());
    if all_one || h_constant {
        Ok(())
    } else {
        Err(OracleError::IntegerPotential { t, state, value })
    }
}

/// `sum over level sets L of theta: sum_L a h^2 - (sum_L a h)^2 / sum_L a`.
fn level_set_variance(weighted: &[(f64, usize)], h: &[f64], theta: &[f64]) -> f64 {
    let mut sets: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for &(a, y) in weighted {
        let key = (theta[y] + 0.0).to_bits();
        let e = sets.entry(key).or_insert((0.0, 0.0, 0.0));
        e.0 += a;
        e.1 += a * h[y];
        e.2 += a * h[y] * h[y];
    }
    sets.values()
        .map(|&(a, ah, ahh)| if a > 0.0 { (ahh - ah * ah / a).max(0.0) } else { 0.0 })
        .sum()
}

/// `E[G_0(X_0) prod_{t=1}^{T-1} G_t(X_{t-1}, X_t) f(X_{T-1}, X_T)]`.
pub fn exact_feynman_kac(m: &FiniteChainModel) -> f64 {
    m.exact_for(&m.f)
}

/// `E[prod_{t<T} G_t]`, the normalizer of the ratio estimator.
pub fn exact_normalizer(m: &FiniteChainModel) -> f64 {
    let n = m.states();
    m.exact_for(&vec![vec![1.0; n]; n])
}

pub fn exact_ratio(m: &FiniteChainModel) -> Result<f64, OracleError> {
    let z = exact_normalizer(m);
    if z <= 0.0 {
        return Err(OracleError::ZeroMass { t: m.horizon() - 1 });
    }
    Ok(exact_feynman_kac(m) / z)
}

pub fn exact_h_tables(m: &FiniteChainModel) -> HTables {
    m.h.clone()
}

/// Asymptotic variance constant of the unnormalized estimator. `theta` gives one
/// row of sort coordinates per step for the stratified kinds; without it the
/// stratified kinds are unsorted and their constant is the multinomial one.
pub fn exact_eta_squared(
    m: &FiniteChainModel,
    scheme: OracleScheme,
    theta: Option<&[Vec<f64>]>,
) -> Result<EtaSquared, OracleError> {
    m.eta_for(&m.f, scheme, theta)
}

/// Asymptotic variance constant of the ratio estimator.
pub fn exact_ratio_eta_squared(
    m: &FiniteChainModel,
    scheme: OracleScheme,
    theta: Option<&[Vec<f64>]>,
) -> Result<EtaSquared, OracleError> {
    let ratio = exact_ratio(m)?;
    let centered: Table = m.f.iter().map(|r| r.iter().map(|v| v - ratio).collect()).collect();
    let z = exact_normalizer(m);
    let eta = m.eta_for(&centered, scheme, theta)?;
    let scale = 1.0 / (z * z);
    Ok(EtaSquared {
        initialization: eta.initialization * scale,
        resampling: eta.resampling.iter().map(|v| v * scale).collect(),
        mutation: eta.mutation.iter().map(|v| v * scale).collect(),
        total: eta.total * scale,
    })
}

/// `(1/N0) E[prod G f^2] prod_t sup G_t sum_{t=0}^{T} prod_{s<t} C_s`.
pub fn variance_upper_bound(m: &FiniteChainModel, c: &[f64], n0: usize) -> Result<f64, OracleError> {
    let big_t = m.horizon();
    if c.len() < big_t {
        return Err(OracleError::ConstantCount {
            needed: big_t,
            got: c.len(),
        });
    }
    let f2: Table = m.f.iter().map(|r| r.iter().map(|v| v * v).collect()).collect();
    let second = m.exact_for(&f2);
    let mut sup = m.g0.iter().cloned().fold(0.0, f64::max);
    for t in 1..big_t {
        sup *= m
            .potential_table(t)
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::max);
    }
    let mut sum = 0.0;
    let mut prod = 1.0;
    for t in 0..=big_t {
        sum += prod;
        if t < big_t {
            prod *= c[t];
        }
    }
    Ok(second * sup * sum / n0 as f64)
}

impl FeynmanKacModel for FiniteChainModel {
    type State = usize;

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.init_cdf, rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, t: usize, state: &usize, rng: &mut R) -> usize {
        let k = t.min(self.trans_cdf.len() - 1);
        sample_index(&self.trans_cdf[k][*state], rng)
    }

    fn potential(&self, t: usize, prev: Option<&usize>, state: &usize) -> f64 {
        match prev {
            None => self.g0[*state],
            Some(p) => self.potential_table(t)[*p][*state],
        }
    }

    fn test_fn(&self, prev: &usize, state: &usize) -> f64 {
        self.f[*prev][*state]
    }

    fn coordinate(&self, key: &SortKey, t: usize, state: &usize) -> Option<f64> {
        match key {
            SortKey::Identity => Some(self.coords[*state]),
            SortKey::H => self.h.h.get(t).map(|row| row[*state]),
        }
    }
}

/// Parses the model file format: whitespace-separated tokens with `#` comments.
///
/// ```text
/// states 2
/// init 0.5 0.5
/// trans  0.9 0.1  0.2 0.8
/// G 0    1 1
/// G 1    1 2  2 1
/// f      1 0  0 1
/// coord  0 1        # optional
/// horizon 3         # optional; the experiment config may override it
/// ```
///
/// `trans` may also be given per step as `trans t`.
pub fn parse_model(text: &str) -> Result<(FiniteChainModel, Option<usize>), OracleError> {
    let tokens: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .flat_map(|(i, line)| {
            line.split('#')
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(move |tok| (i + 1, tok))
        })
        .collect();
    let mut pos = 0;
    let err = |line: usize, message: String| OracleError::Parse { line, message };
    let last_line = tokens.last().map(|t| t.0).unwrap_or(0);

    let mut n: Option<usize> = None;
    let mut init = None;
    let mut trans: BTreeMap<usize, Table> = BTreeMap::new();
    let mut g0 = None;
    let mut g: BTreeMap<usize, Table> = BTreeMap::new();
    let mut f = None;
    let mut coords = None;
    let mut horizon = None;

    let int_at = |pos: usize| -> Result<usize, OracleError> {
        let (line, tok) = *tokens
            .get(pos)
            .ok_or_else(|| err(last_line, "unexpected end of file".into()))?;
        tok.parse::<usize>()
            .map_err(|e| err(line, format!("expected an integer, found `{tok}`: {e}")))
    };
    let numbers = |pos: usize, count: usize| -> Result<Vec<f64>, OracleError> {
        (pos..pos + count)
            .map(|k| {
                let (line, tok) = *tokens
                    .get(k)
                    .ok_or_else(|| err(last_line, "unexpected end of file".into()))?;
                tok.parse::<f64>()
                    .map_err(|e| err(line, format!("expected a number, found `{tok}`: {e}")))
            })
            .collect()
    };
    let square = |v: Vec<f64>, n: usize| -> Table { v.chunks(n).map(|c| c.to_vec()).collect() };

    while pos < tokens.len() {
        let (line, key) = tokens[pos];
        pos += 1;
        if key != "states" && n.is_none() {
            return Err(err(line, "the file must start with `states N`".into()));
        }
        match key {
            "states" => {
                if n.is_some() {
                    return Err(err(line, "duplicate `states`".into()));
                }
                let v = int_at(pos)?;
                if v == 0 || v > MAX_STATES {
                    return Err(err(line, format!("state count must be in 1..={MAX_STATES}")));
                }
                n = Some(v);
                pos += 1;
            }
            "init" => {
                let k = n.unwrap_or(0);
                init = Some(numbers(pos, k)?);
                pos += k;
            }
            "trans" => {
                let k = n.unwrap_or(0);
                let step = if looks_indexed(&tokens, pos, k) {
                    pos += 1;
                    int_at(pos - 1)?
                } else {
                    0
                };
                if trans.insert(step, square(numbers(pos, k * k)?, k)).is_some() {
                    return Err(err(line, format!("duplicate transition block {step}")));
                }
                pos += k * k;
            }
            "G" => {
                let k = n.unwrap_or(0);
                let t = int_at(pos)?;
                pos += 1;
                if t == 0 {
                    if g0.is_some() {
                        return Err(err(line, "duplicate `G 0`".into()));
                    }
                    g0 = Some(numbers(pos, k)?);
                    pos += k;
                } else {
                    if g.insert(t, square(numbers(pos, k * k)?, k)).is_some() {
                        return Err(err(line, format!("duplicate `G {t}`")));
                    }
                    pos += k * k;
                }
            }
            "f" => {
                let k = n.unwrap_or(0);
                f = Some(square(numbers(pos, k * k)?, k));
                pos += k * k;
            }
            "coord" => {
                let k = n.unwrap_or(0);
                coords = Some(numbers(pos, k)?);
                pos += k;
            }
            "horizon" => {
                horizon = Some(int_at(pos)?);
                pos += 1;
            }
            other => return Err(err(line, format!("unknown keyword `{other}`"))),
        }
    }

    let missing = |what: &str| err(last_line, format!("missing `{what}` block"));
    let init = init.ok_or_else(|| missing("init"))?;
    let g0 = g0.ok_or_else(|| missing("G 0"))?;
    let f = f.ok_or_else(|| missing("f"))?;
    if trans.is_empty() {
        return Err(missing("trans"));
    }
    let contiguous = |keys: Vec<usize>, start: usize| keys.iter().enumerate().all(|(i, &k)| k == i + start);
    if !contiguous(trans.keys().cloned().collect(), 0) {
        return Err(err(last_line, "transition blocks must be numbered 0, 1, 2, ...".into()));
    }
    if !contiguous(g.keys().cloned().collect(), 1) {
        return Err(err(last_line, "potential blocks must be numbered 1, 2, 3, ...".into()));
    }
    let h = horizon.unwrap_or(g.len() + 1).max(1);
    let mut model = FiniteChainModel::new(
        init,
        trans.into_values().collect(),
        g0,
        g.into_values().collect(),
        f,
        h,
    )?;
    if let Some(c) = coords {
        model = model.with_coords(c)?;
    }
    Ok((model, horizon))
}

/// A `trans` keyword is followed by a step index when exactly `1 + n*n` numeric
/// tokens precede the next keyword.
fn looks_indexed(tokens: &[(usize, &str)], pos: usize, n: usize) -> bool {
    let numeric = tokens[pos..]
        .iter()
        .take_while(|(_, tok)| tok.parse::<f64>().is_ok())
        .count();
    numeric == n * n + 1
}

pub fn load_model(path: &Path) -> Result<(FiniteChainModel, Option<usize>), OracleError> {
    let text = std::fs::read_to_string(path).map_err(|e| OracleError::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_state(g: f64, c: f64) -> FiniteChainModel {
        FiniteChainModel::new(vec![1.0], vec![vec![vec![1.0]]], vec![g], vec![], vec![vec![c]], 1).unwrap()
    }

    fn trivial(n: usize, horizon: usize) -> FiniteChainModel {
        let p = vec![vec![1.0 / n as f64; n]; n];
        FiniteChainModel::new(
            vec![1.0 / n as f64; n],
            vec![p],
            vec![1.0; n],
            vec![vec![vec![1.0; n]; n]],
            vec![vec![1.0; n]; n],
            horizon,
        )
        .unwrap()
    }

    fn three_state(horizon: usize) -> FiniteChainModel {
        FiniteChainModel::new(
            vec![0.5, 0.3, 0.2],
            vec![vec![
                vec![0.6, 0.3, 0.1],
                vec![0.2, 0.5, 0.3],
                vec![0.25, 0.25, 0.5],
            ]],
            vec![0.9, 1.6, 0.4],
            vec![vec![
                vec![1.1, 0.6, 1.9],
                vec![0.7, 1.35, 0.45],
                vec![1.75, 0.5, 1.05],
            ]],
            vec![vec![0.2, 1.4, 2.3], vec![1.1, 0.4, 0.9], vec![2.2, 0.7, 0.15]],
            horizon,
        )
        .unwrap()
    }

    /// Sum over every path of its probability times the product of potentials and f.
    fn path_sum(m: &FiniteChainModel, f: &Table) -> f64 {
        let n = m.states();
        let big_t = m.horizon();
        let mut total = 0.0;
        let count = n.pow(big_t as u32 + 1);
        for code in 0..count {
            let mut path = Vec::with_capacity(big_t + 1);
            let mut c = code;
            for _ in 0..=big_t {
                path.push(c % n);
                c /= n;
            }
            let mut v = m.init()[path[0]] * m.g0()[path[0]];
            for t in 1..big_t {
                v *= m.transition(t - 1)[path[t - 1]][path[t]] * m.potential_table(t)[path[t - 1]][path[t]];
            }
            v *= m.transition(big_t - 1)[path[big_t - 1]][path[big_t]] * f[path[big_t - 1]][path[big_t]];
            total += v;
        }
        total
    }

    #[test]
    fn exact_value_examples() {
        assert_eq!(exact_feynman_kac(&trivial(3, 4)), 1.0);
        assert_eq!(exact_feynman_kac(&one_state(1.5, 2.0)), 3.0);
        for t in 1..=6 {
            let m = three_state(t);
            let a = exact_feynman_kac(&m);
            let b = path_sum(&m, m.f_table());
            assert!((a - b).abs() <= 1e-12 * b.abs(), "T={t}: {a} vs {b}");
        }
    }

    #[test]
    fn h_table_examples() {
        let h = exact_h_tables(&trivial(2, 3));
        assert!(h.h.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-15));
        let m = three_state(1);
        let h = exact_h_tables(&m);
        for x in 0..3 {
            let direct: f64 = (0..3).map(|y| m.transition(0)[x][y] * m.f_table()[x][y]).sum();
            assert_eq!(h.get(0, x), direct);
        }
        let m = three_state(4);
        let h = exact_h_tables(&m);
        let via_h: f64 = (0..3).map(|x| m.init()[x] * m.g0()[x] * h.get(0, x)).sum();
        let exact = exact_feynman_kac(&m);
        assert!((via_h - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn eta_trivial_model_is_zero() {
        let m = trivial(3, 3);
        for s in [
            OracleScheme::Multinomial,
            OracleScheme::MultinomialResidual,
            OracleScheme::Bernoulli,
            OracleScheme::Stratified,
            OracleScheme::StratifiedResidual,
        ] {
            assert_eq!(exact_eta_squared(&m, s, None).unwrap().total, 0.0, "{s}");
        }
    }

    #[test]
    fn stratifying_by_h_removes_resampling_terms() {
        let m = three_state(3);
        let theta = m.theta_for(SortKey::H);
        let e = exact_eta_squared(&m, OracleScheme::Stratified, Some(&theta)).unwrap();
        assert!(e.resampling.iter().all(|&v| v.abs() < 1e-15));
        let mult = exact_eta_squared(&m, OracleScheme::Multinomial, None).unwrap();
        assert_eq!(e.mutation, mult.mutation);
        assert_eq!(e.initialization, mult.initialization);
        assert!(mult.resampling.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bernoulli_integer_potentials_contribute_nothing() {
        // every normalized potential equals 1
        let m = FiniteChainModel::new(
            vec![0.5, 0.5],
            vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
            vec![1.0, 1.0],
            vec![vec![vec![1.0, 1.0], vec![1.0, 1.0]]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            3,
        )
        .unwrap();
        let e = exact_eta_squared(&m, OracleScheme::Bernoulli, None).unwrap();
        assert!(e.resampling.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_condition_is_checked() {
        // G_0 = (2, 0) with uniform start: normalized potential 2 on state 0
        let m = FiniteChainModel::new(
            vec![0.5, 0.5],
            vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
            vec![2.0, 0.0],
            vec![],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            1,
        )
        .unwrap();
        let m = m.with_horizon(1).unwrap();
        // h_0 is constant here (1/2 on both states), so the step is exempt
        assert!(exact_eta_squared(&m, OracleScheme::MultinomialResidual, None).is_ok());
        let m2 = FiniteChainModel::new(
            vec![0.25, 0.25, 0.5],
            vec![vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]],
            vec![2.0, 2.0, 0.0],
            vec![],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 1.0]],
            1,
        )
        .unwrap();
        assert!(matches!(
            exact_eta_squared(&m2, OracleScheme::StratifiedResidual, None),
            Err(OracleError::IntegerPotential { t: 0, .. })
        ));
        assert!(exact_eta_squared(&m2, OracleScheme::Multinomial, None).is_ok());
    }

    #[test]
    fn ratio_eta_examples() {
        let n = 3;
        let base = three_state(3);
        let constant_f = FiniteChainModel::new(
            base.init().to_vec(),
            vec![base.transition(0).clone()],
            base.g0().to_vec(),
            vec![base.potential_table(1).clone()],
            vec![vec![2.5; n]; n],
            3,
        )
        .unwrap();
        let e = exact_ratio_eta_squared(&constant_f, OracleScheme::Multinomial, None).unwrap();
        assert!(e.total.abs() < 1e-24);
        let e = exact_ratio_eta_squared(&one_state(1.5, 2.0), OracleScheme::Multinomial, None).unwrap();
        assert_eq!(e.total, 0.0);
    }

    #[test]
    fn ratio_eta_multinomial_matches_normalized_form() {
        // direct evaluation of E[prod G~ h~^2] with normalized potentials
        let m = three_state(3);
        let eta = exact_ratio_eta_squared(&m, OracleScheme::Multinomial, None).unwrap();
        let z = m.masses();
        let ratio = exact_ratio(&m).unwrap();
        let ft: Table = m.f_table().iter().map(|r| r.iter().map(|v| v - ratio).collect()).collect();
        let h = m.h_tables_for(&ft);
        let mu = m.forward_measures();
        let z_last = z[m.horizon() - 1];
        for t in 0..m.horizon() {
            let expected: f64 = (0..3)
                .map(|x| mu[t][x] / z[t] * (h.h[t][x] * z[t] / z_last).powi(2))
                .sum();
            assert!((eta.resampling[t] - expected).abs() <= 1e-12 * expected.abs());
        }
    }

    #[test]
    fn variance_bound_examples() {
        let m = trivial(2, 2);
        assert_eq!(variance_upper_bound(&m, &[1.0, 1.0], 10).unwrap(), 0.3);
        let doubled = FiniteChainModel::new(
            m.init().to_vec(),
            vec![m.transition(0).clone()],
            vec![2.0; 2],
            vec![vec![vec![2.0; 2]; 2]],
            m.f_table().clone(),
            2,
        )
        .unwrap();
        // E[prod G f^2] and prod sup G each pick up a factor 2^T
        let a = variance_upper_bound(&m, &[1.0, 1.0], 10).unwrap();
        let b = variance_upper_bound(&doubled, &[1.0, 1.0], 10).unwrap();
        assert!((b - a * 16.0).abs() < 1e-12);
        assert!(variance_upper_bound(&m, &[1.0], 10).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let text = "# three states\nstates 3\ninit 0.5 0.3 0.2\ntrans\n0.6 0.3 0.1\n0.2 0.5 0.3\n0.25 0.25 0.5\nG 0 0.9 1.6 0.4\nG 1\n1.1 0.6 1.9\n0.7 1.35 0.45\n1.75 0.5 1.05\nf\n0.2 1.4 2.3\n1.1 0.4 0.9\n2.2 0.7 0.15\nhorizon 3\n";
        let (m, horizon) = parse_model(text).unwrap();
        assert_eq!(horizon, Some(3));
        assert_eq!(m, three_state(3));
        assert!(matches!(parse_model("init 1"), Err(OracleError::Parse { line: 1, .. })));
        assert!(matches!(parse_model("states 2\ninit 0.5 0.5\nbogus"), Err(OracleError::Parse { line: 3, .. })));
        assert!(matches!(
            parse_model("states 1\ninit 0.5\ntrans 1\nG 0 1\nf 1"),
            Err(OracleError::InvalidModel(_))
        ));
        let per_step = "states 1\ninit 1\ntrans 0 1\ntrans 1 1\nG 0 2\nG 1 3\nf 1\n";
        let (m, h) = parse_model(per_step).unwrap();
        assert_eq!(h, None);
        assert_eq!(m.horizon(), 2);
        assert_eq!(exact_feynman_kac(&m), 6.0);
    }

    fn random_model() -> impl Strategy<Value = FiniteChainModel> {
        (1usize..=3, 1usize..=4).prop_flat_map(|(n, big_t)| {
            let row = move || proptest::collection::vec(1u32..8, n);
            (
                row(),
                proptest::collection::vec(row(), n),
                row(),
                proptest::collection::vec(row(), n),
                proptest::collection::vec(row(), n),
            )
                .prop_map(move |(init, trans, g0, g, f)| {
                    let norm = |v: &Vec<u32>| {
                        let s: u32 = v.iter().sum();
                        v.iter().map(|&x| x as f64 / s as f64).collect::<Vec<f64>>()
                    };
                    let scaled = |v: &Vec<u32>| v.iter().map(|&x| x as f64 / 4.0).collect::<Vec<f64>>();
                    FiniteChainModel::new(
                        norm(&init),
                        vec![trans.iter().map(norm).collect()],
                        scaled(&g0),
                        vec![g.iter().map(scaled).collect()],
                        f.iter().map(scaled).collect(),
                        big_t,
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn dynamic_program_equals_path_enumeration(m in random_model()) {
            let a = exact_feynman_kac(&m);
            let b = path_sum(&m, m.f_table());
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }

        #[test]
        fn constant_orderings(m in random_model()) {
            let n = m.states();
            let thetas = [m.theta_for(SortKey::Identity), m.theta_for(SortKey::H), vec![vec![0.0; n]; m.horizon()]];
            let mult = exact_eta_squared(&m, OracleScheme::Multinomial, None).unwrap();
            let mres = exact_eta_squared(&m, OracleScheme::MultinomialResidual, None);
            for theta in &thetas {
                let strat = exact_eta_squared(&m, OracleScheme::Stratified, Some(theta)).unwrap();
                prop_assert_eq!(&strat.mutation, &mult.mutation);
                for t in 0..m.horizon() {
                    prop_assert!(strat.resampling[t] <= mult.resampling[t] * (1.0 + 1e-12) + 1e-15);
                }
                if let (Ok(mres), Ok(sres)) = (&mres, exact_eta_squared(&m, OracleScheme::StratifiedResidual, Some(theta))) {
                    for t in 0..m.horizon() {
                        prop_assert!(sres.resampling[t] <= mres.resampling[t] * (1.0 + 1e-12) + 1e-15);
                        prop_assert!(mres.resampling[t] <= mult.resampling[t] * (1.0 + 1e-12) + 1e-15);
                    }
                }
            }
        }
    }
}
