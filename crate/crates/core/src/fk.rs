//! Particles, weighted ensembles and the Feynman-Kac model interface.
//!
//! The coffin state is a tagged alternative of [`ParticleState`]. Every function of
//! a coffin particle (potential, test function, sort coordinate) evaluates to zero,
//! and a coffin particle never leaves the coffin.

use rand::Rng;
use thiserror::Error;

use crate::schemes::SortKey;

/// A particle position: either a point of the state space or the coffin.
#[derive(Debug, Clone, PartialEq)]
pub enum ParticleState<S> {
    Point(S),
    Coffin,
}

impl<S> ParticleState<S> {
    pub fn is_coffin(&self) -> bool {
        matches!(self, ParticleState::Coffin)
    }

    pub fn point(&self) -> Option<&S> {
        match self {
            ParticleState::Point(x) => Some(x),
            ParticleState::Coffin => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("potential at step {t} returned {value}; potentials must be finite and nonnegative")]
    InvalidPotential { t: usize, value: f64 },
    #[error("weight {index} is {value}; weights must be finite and nonnegative")]
    InvalidWeight { index: usize, value: f64 },
    #[error("ensemble has {particles} particles but {weights} weights")]
    LengthMismatch { particles: usize, weights: usize },
    #[error("reference population size must be at least 1")]
    ZeroPopulation,
    #[error("all weights are zero")]
    DegenerateEnsemble,
    #[error("{got} proposals supplied for an ensemble of {expected} particles")]
    ProposalCount { expected: usize, got: usize },
}

/// A Feynman-Kac model: a Markov chain, nonnegative potentials and a terminal
/// test function.
///
/// `potential(0, None, x)` is `G_0(x)`; for `t >= 1`, `potential(t, Some(x_prev), x)`
/// is `G_t(x_prev, x)`. `sample_transition(t, x, ..)` draws `X_{t+1}` given `X_t = x`.
/// Implementations never see the coffin; the engine handles it.
///
/// Callbacks must be pure: replicates may call them from several threads.
pub trait FeynmanKacModel: Sync {
    type State: Clone + Send + Sync;

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        t: usize,
        state: &Self::State,
        rng: &mut R,
    ) -> Self::State;

    fn potential(&self, t: usize, prev: Option<&Self::State>, state: &Self::State) -> f64;

    fn test_fn(&self, prev: &Self::State, state: &Self::State) -> f64;

    /// Scalar sort coordinate used by sorting schemes. `None` means the model does
    /// not provide this key.
    fn coordinate(&self, _key: &SortKey, _t: usize, _state: &Self::State) -> Option<f64> {
        None
    }
}

/// `G_t` extended to the coffin, with the model contract checked.
pub fn potential_at<M: FeynmanKacModel>(
    model: &M,
    t: usize,
    prev: Option<&ParticleState<M::State>>,
    state: &ParticleState<M::State>,
) -> Result<f64, ModelError> {
    let value = match (prev, state) {
        (_, ParticleState::Coffin) | (Some(ParticleState::Coffin), _) => return Ok(0.0),
        (None, ParticleState::Point(x)) => model.potential(t, None, x),
        (Some(ParticleState::Point(p)), ParticleState::Point(x)) => model.potential(t, Some(p), x),
    };
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(ModelError::InvalidPotential { t, value })
    }
}

/// `f` extended to the coffin.
pub fn test_fn_at<M: FeynmanKacModel>(
    model: &M,
    prev: &ParticleState<M::State>,
    state: &ParticleState<M::State>,
) -> f64 {
    match (prev, state) {
        (ParticleState::Point(p), ParticleState::Point(x)) => model.test_fn(p, x),
        _ => 0.0,
    }
}

/// Particles and their nonnegative weights at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble<S> {
    particles: Vec<ParticleState<S>>,
    weights: Vec<f64>,
    t: usize,
    n0: usize,
}

impl<S> WeightedEnsemble<S> {
    pub fn new(
        particles: Vec<ParticleState<S>>,
        weights: Vec<f64>,
        t: usize,
        n0: usize,
    ) -> Result<Self, ModelError> {
        if particles.len() != weights.len() {
            return Err(ModelError::LengthMismatch {
                particles: particles.len(),
                weights: weights.len(),
            });
        }
        if n0 == 0 {
            return Err(ModelError::ZeroPopulation);
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(ModelError::InvalidWeight { index, value });
        }
        Ok(Self {
            particles,
            weights,
            t,
            n0,
        })
    }

    pub fn particles(&self) -> &[ParticleState<S>] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn into_parts(self) -> (Vec<ParticleState<S>>, Vec<f64>) {
        (self.particles, self.weights)
    }

    /// `(1/N0) * sum(w)`. The divisor is the reference size `N0`, not the current
    /// particle count.
    pub fn average_weight(&self) -> f64 {
        average_weight(&self.weights, self.n0)
    }

    pub fn effective_sample_size(&self) -> Result<f64, ModelError> {
        effective_sample_size(&self.weights)
    }

    pub fn non_coffin_count(&self) -> usize {
        self.particles.iter().filter(|p| !p.is_coffin()).count()
    }
}

impl<S: Clone> WeightedEnsemble<S> {
    /// Moves the ensemble one step forward: `w_i = w_hat_i * G_{t+1}(xi_hat_i, proposal_i)`.
    ///
    /// `self` holds the resampled particles and weights; `proposals` are their
    /// mutated successors. Coffin inputs stay coffins with weight zero.
    pub fn reweight<M>(
        &self,
        model: &M,
        proposals: Vec<ParticleState<S>>,
    ) -> Result<WeightedEnsemble<S>, ModelError>
    where
        M: FeynmanKacModel<State = S>,
    {
        if proposals.len() != self.particles.len() {
            return Err(ModelError::ProposalCount {
                expected: self.particles.len(),
                got: proposals.len(),
            });
        }
        let t = self.t + 1;
        let mut particles = Vec::with_capacity(proposals.len());
        let mut weights = Vec::with_capacity(proposals.len());
        for ((parent, &w_hat), proposal) in self.particles.iter().zip(&self.weights).zip(proposals) {
            if parent.is_coffin() {
                particles.push(ParticleState::Coffin);
                weights.push(0.0);
                continue;
            }
            let g = potential_at(model, t, Some(parent), &proposal)?;
            weights.push(w_hat * g);
            particles.push(proposal);
        }
        WeightedEnsemble::new(particles, weights, t, self.n0)
    }
}

/// `(1/n0) * sum(w)`, summed left to right. Empty input gives 0.
pub fn average_weight(weights: &[f64], n0: usize) -> f64 {
    weights.iter().sum::<f64>() / n0 as f64
}

/// Neumaier's compensated summation, in index order.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &x in xs {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + carry
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64, ModelError> {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum <= 0.0 || sum_sq <= 0.0 {
        return Err(ModelError::DegenerateEnsemble);
    }
    Ok(sum * sum / sum_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Two-valued toy model: states are reals, G_t(prev, x) = x, f = 1.
    struct Scaled;

    impl FeynmanKacModel for Scaled {
        type State = f64;
        fn sample_initial<R: Rng + ?Sized>(&self, _rng: &mut R) -> f64 {
            1.0
        }
        fn sample_transition<R: Rng + ?Sized>(&self, _t: usize, x: &f64, _rng: &mut R) -> f64 {
            *x
        }
        fn potential(&self, _t: usize, _prev: Option<&f64>, x: &f64) -> f64 {
            *x
        }
        fn test_fn(&self, _prev: &f64, _x: &f64) -> f64 {
            1.0
        }
    }

    fn points(xs: &[f64]) -> Vec<ParticleState<f64>> {
        xs.iter().map(|&x| ParticleState::Point(x)).collect()
    }

    #[test]
    fn average_weight_uses_reference_population() {
        assert_eq!(average_weight(&[3.2, 2.4, 0.8, 1.6], 4), 2.0);
        assert_eq!(average_weight(&[1.0; 4], 4), 1.0);
        assert_eq!(average_weight(&[3.2, 2.4, 0.8, 1.6, 0.0, 0.0], 4), 2.0);
        assert_eq!(average_weight(&[], 4), 0.0);
    }

    #[test]
    fn ess_examples() {
        assert_eq!(effective_sample_size(&[1.0; 4]).unwrap(), 4.0);
        assert_eq!(effective_sample_size(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        // hand evaluation: 8^2 / (10.24 + 5.76 + 0.64 + 2.56) = 64 / 19.2
        let w = [3.2, 2.4, 0.8, 1.6];
        let independent = {
            let mut s = 0.0;
            let mut q = 0.0;
            for x in w {
                s += x;
                q += x * x;
            }
            s * s / q
        };
        let ess = effective_sample_size(&w).unwrap();
        assert!((ess - 64.0 / 19.2).abs() < 1e-12);
        assert_eq!(ess, independent);
        assert_eq!(
            effective_sample_size(&[0.0, 0.0]),
            Err(ModelError::DegenerateEnsemble)
        );
    }

    #[test]
    fn reweight_multiplies_and_kills_coffins() {
        let ens = WeightedEnsemble::new(points(&[1.0, 1.0]), vec![2.0, 2.0], 0, 2).unwrap();
        let next = ens.reweight(&Scaled, points(&[1.6, 0.4])).unwrap();
        assert_eq!(next.weights(), &[3.2, 0.8]);
        assert_eq!(next.t(), 1);

        let ens = WeightedEnsemble::new(
            vec![ParticleState::Point(1.0), ParticleState::Coffin],
            vec![2.0, 2.0],
            0,
            2,
        )
        .unwrap();
        let next = ens.reweight(&Scaled, points(&[1.6, 5.0])).unwrap();
        assert_eq!(next.weights(), &[3.2, 0.0]);
        assert!(next.particles()[1].is_coffin());

        let ens = WeightedEnsemble::new(points(&[1.0, 1.0]), vec![0.5, 1.5], 0, 2).unwrap();
        let next = ens.reweight(&Scaled, points(&[1.0, 1.0])).unwrap();
        assert_eq!(next.weights(), &[0.5, 1.5]);
    }

    #[test]
    fn reweight_rejects_negative_potentials() {
        let ens = WeightedEnsemble::new(points(&[1.0]), vec![1.0], 0, 1).unwrap();
        let err = ens.reweight(&Scaled, points(&[-1.0])).unwrap_err();
        assert!(matches!(err, ModelError::InvalidPotential { t: 1, .. }));
        assert!(ens.reweight(&Scaled, points(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn ensemble_validation() {
        assert!(WeightedEnsemble::new(points(&[1.0]), vec![f64::INFINITY], 0, 1).is_err());
        assert!(WeightedEnsemble::new(points(&[1.0]), vec![-0.5], 0, 1).is_err());
        assert!(WeightedEnsemble::new(points(&[1.0]), vec![1.0, 1.0], 0, 1).is_err());
        assert!(WeightedEnsemble::new(points(&[1.0]), vec![1.0], 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn ess_between_one_and_support(ws in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(ws.iter().any(|&w| w > 1e-9));
            let ess = effective_sample_size(&ws).unwrap();
            let support = ws.iter().filter(|&&w| w > 0.0).count() as f64;
            prop_assert!(ess >= 1.0 - 1e-12);
            prop_assert!(ess <= support + 1e-9);
        }

        #[test]
        fn reweight_then_average(ws in proptest::collection::vec(0.0f64..4.0, 1..20),
                                 gs in proptest::collection::vec(0.0f64..4.0, 20)) {
            let n = ws.len();
            let ens = WeightedEnsemble::new(points(&vec![1.0; n]), ws.clone(), 0, n).unwrap();
            let next = ens.reweight(&Scaled, points(&gs[..n])).unwrap();
            let mut expected = 0.0;
            for i in 0..n {
                expected += ws[i] * gs[i];
            }
            prop_assert_eq!(next.average_weight(), expected / n as f64);
        }
    }
}
