//! The SMC loop: reweight, build the step's resampling matrix, draw offspring,
//! mutate. Produces the unnormalized estimate, the ratio estimate and, with a full
//! trace, the martingale error decomposition.
//!
//! Randomness comes from one ChaCha8 stream per run. Consumption order: the `N0`
//! initial draws, then per step the column draws in column order followed by one
//! transition per non-coffin offspring in offspring order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fk::{
    average_weight, effective_sample_size, potential_at, test_fn_at, FeynmanKacModel, ModelError, ParticleState,
};
use crate::matrix::{MatrixError, Offspring, Tolerance, Violation};
use crate::schemes::{SchemeError, SchemeSpec, SortKey};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmcError {
    #[error("N0 and the horizon must both be at least 1 (got N0 = {n0}, T = {horizon})")]
    InvalidSize { n0: usize, horizon: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("step {t}: scheme `{scheme}` built an invalid matrix: {violation}")]
    InvalidMatrix {
        t: usize,
        scheme: String,
        violation: Violation,
    },
    #[error("the model provides no `{0}` coordinate for sorting")]
    MissingCoordinate(SortKey),
    #[error("the run did not retain its particle trace")]
    TraceNotRetained,
}

/// The splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream key for `(seed, labels...)`: `k = mix(seed)`, then `k = mix(k ^ label)`
/// for each label in order.
pub fn stream_key(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(seed), |k, &l| mix(k ^ l))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Retain every step's particles and weights (needed for the error decomposition).
    pub keep_trace: bool,
}

/// Summary of one resampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSnapshot {
    pub t: usize,
    /// Particles entering the step.
    pub n_in: usize,
    pub total_weight: f64,
    pub ess: f64,
    /// Scheme that built the matrix (the branch taken, for adaptive schemes).
    pub scheme: String,
    pub column_sums: Vec<f64>,
    pub w_bar: f64,
    /// Non-coffin offspring drawn at this step.
    pub non_coffin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<S> {
    pub weights: Vec<f64>,
    pub particles: Vec<ParticleState<S>>,
    pub resampled_weights: Vec<f64>,
    pub resampled_particles: Vec<ParticleState<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace<S> {
    pub steps: Vec<StepTrace<S>>,
    /// Positions `xi_T` after the last mutation.
    pub final_particles: Vec<ParticleState<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcRun<S> {
    pub estimate: f64,
    pub ratio_numerator: f64,
    pub ratio_denominator: f64,
    pub n0: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Set when every weight vanished before the horizon.
    pub degenerate: bool,
    pub snapshots: Vec<StepSnapshot>,
    pub trace: Option<Trace<S>>,
}

/// Telescoping increments of the martingale `M_{-1}, M_0, M_{1/2}, M_1, ..., M_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub initialization: f64,
    pub resampling: Vec<f64>,
    pub mutation: Vec<f64>,
}

impl ErrorDecomposition {
    pub fn total(&self) -> f64 {
        self.initialization + self.resampling.iter().sum::<f64>() + self.mutation.iter().sum::<f64>()
    }
}

impl<S> SmcRun<S> {
    pub fn estimate_unnormalized(&self) -> f64 {
        self.estimate
    }

    /// `sum w_hat f / sum w_hat 1{xi_hat != coffin}`, or 0 when the denominator is 0.
    pub fn estimate_ratio(&self) -> f64 {
        if self.ratio_is_defined() {
            self.ratio_numerator / self.ratio_denominator
        } else {
            0.0
        }
    }

    pub fn ratio_is_defined(&self) -> bool {
        self.ratio_denominator > 0.0
    }

    /// Increments of the martingale built from `h(t, x)`, `t = 0..T-1`, and the
    /// exact value `M_{-1}`. They sum to `estimate - exact`.
    pub fn error_decomposition<F>(&self, exact: f64, h: F) -> Result<ErrorDecomposition, SmcError>
    where
        F: Fn(usize, &S) -> f64,
    {
        let trace = self.trace.as_ref().ok_or(SmcError::TraceNotRetained)?;
        let n0 = self.n0 as f64;
        let level = |t: usize, weights: &[f64], particles: &[ParticleState<S>]| {
            weights
                .iter()
                .zip(particles)
                .map(|(w, p)| match p {
                    ParticleState::Point(x) => w * h(t, x),
                    ParticleState::Coffin => 0.0,
                })
                .sum::<f64>()
                / n0
        };
        let mut before = Vec::with_capacity(self.horizon);
        let mut after = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            match trace.steps.get(t) {
                Some(s) => {
                    before.push(level(t, &s.weights, &s.particles));
                    after.push(level(t, &s.resampled_weights, &s.resampled_particles));
                }
                None => {
                    before.push(0.0);
                    after.push(0.0);
                }
            }
        }
        let initialization = before[0] - exact;
        let resampling = (0..self.horizon).map(|t| after[t] - before[t]).collect();
        let mutation = (0..self.horizon)
            .map(|t| {
                let next = if t + 1 < self.horizon {
                    before[t + 1]
                } else {
                    self.estimate
                };
                next - after[t]
            })
            .collect();
        Ok(ErrorDecomposition {
            initialization,
            resampling,
            mutation,
        })
    }
}

pub fn run<M: FeynmanKacModel>(
    model: &M,
    scheme: &SchemeSpec,
    n0: usize,
    horizon: usize,
    seed: u64,
) -> Result<SmcRun<M::State>, SmcError> {
    run_with_options(model, scheme, n0, horizon, seed, RunOptions::default())
}

pub fn run_with_options<M: FeynmanKacModel>(
    model: &M,
    scheme: &SchemeSpec,
    n0: usize,
    horizon: usize,
    seed: u64,
    options: RunOptions,
) -> Result<SmcRun<M::State>, SmcError> {
    if n0 == 0 || horizon == 0 {
        return Err(SmcError::InvalidSize { n0, horizon });
    }
    scheme.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sort_key = scheme.sort_key();

    let mut particles: Vec<ParticleState<M::State>> = (0..n0)
        .map(|_| ParticleState::Point(model.sample_initial(&mut rng)))
        .collect();
    let mut weights = particles
        .iter()
        .map(|p| potential_at(model, 0, None, p))
        .collect::<Result<Vec<f64>, _>>()?;

    let mut snapshots = Vec::with_capacity(horizon);
    let mut trace = options.keep_trace.then(|| Trace {
        steps: Vec::with_capacity(horizon),
        final_particles: Vec::new(),
    });
    let degenerate_run = |snapshots, trace| SmcRun {
        estimate: 0.0,
        ratio_numerator: 0.0,
        ratio_denominator: 0.0,
        n0,
        horizon,
        seed,
        degenerate: true,
        snapshots,
        trace,
    };

    let mut parents: Vec<ParticleState<M::State>> = Vec::new();
    let mut parent_weights: Vec<f64> = Vec::new();
    for t in 0..horizon {
        if t > 0 {
            weights = parent_weights
                .iter()
                .zip(&parents)
                .zip(&particles)
                .map(|((w_hat, prev), x)| {
                    if prev.is_coffin() {
                        Ok(0.0)
                    } else {
                        potential_at(model, t, Some(prev), x).map(|g| w_hat * g)
                    }
                })
                .collect::<Result<Vec<f64>, ModelError>>()?;
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Ok(degenerate_run(snapshots, trace));
        }

        let coords = match sort_key {
            Some(key) => Some(
                particles
                    .iter()
                    .map(|p| match p {
                        ParticleState::Point(x) => {
                            model.coordinate(&key, t, x).ok_or(SmcError::MissingCoordinate(key))
                        }
                        ParticleState::Coffin => Ok(0.0),
                    })
                    .collect::<Result<Vec<f64>, SmcError>>()?,
            ),
            None => None,
        };
        let n_out = scheme.n_out(weights.len(), n0)?;
        let built = scheme.build(&weights, coords.as_deref(), n0, n_out)?;
        let matrix = built.matrix;
        matrix
            .validate(&weights, Tolerance::default())
            .map_err(|violation| SmcError::InvalidMatrix {
                t,
                scheme: built.chosen.clone(),
                violation,
            })?;

        let draws = matrix.draw(&mut rng);
        let resampled: Vec<ParticleState<M::State>> = draws
            .iter()
            .map(|o| match *o {
                Offspring::Particle(i) => particles[i].clone(),
                Offspring::Coffin => ParticleState::Coffin,
            })
            .collect();
        let column_sums = matrix.column_sums();
        let non_coffin = resampled.iter().filter(|p| !p.is_coffin()).count();
        snapshots.push(StepSnapshot {
            t,
            n_in: weights.len(),
            total_weight: total,
            ess: effective_sample_size(&weights)?,
            scheme: built.chosen,
            column_sums: column_sums.clone(),
            w_bar: average_weight(&weights, n0),
            non_coffin,
        });

        let moved: Vec<ParticleState<M::State>> = resampled
            .iter()
            .map(|p| match p {
                ParticleState::Point(x) => ParticleState::Point(model.sample_transition(t, x, &mut rng)),
                ParticleState::Coffin => ParticleState::Coffin,
            })
            .collect();

        if let Some(tr) = trace.as_mut() {
            tr.steps.push(StepTrace {
                weights: std::mem::take(&mut weights),
                particles: std::mem::take(&mut particles),
                resampled_weights: column_sums.clone(),
                resampled_particles: resampled.clone(),
            });
        }
        parents = resampled;
        parent_weights = column_sums;
        particles = moved;
    }

    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for ((w_hat, prev), x) in parent_weights.iter().zip(&parents).zip(&particles) {
        if !prev.is_coffin() {
            numerator += w_hat * test_fn_at(model, prev, x);
            denominator += w_hat;
        }
    }
    if let Some(tr) = trace.as_mut() {
        tr.final_particles = particles;
    }
    Ok(SmcRun {
        estimate: numerator / n0 as f64,
        ratio_numerator: numerator,
        ratio_denominator: denominator,
        n0,
        horizon,
        seed,
        degenerate: false,
        snapshots,
        trace,
    })
}
