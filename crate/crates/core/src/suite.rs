//! Repository-defined benchmark models.
//!
//! Small finite chains with hand-picked tables: potentials are strictly positive,
//! bounded, and chosen so that the normalized potentials never sit on an integer
//! (which the residual-scheme constants require). Each model also ships as a model
//! file under `models/`.

use crate::oracle::FiniteChainModel;

/// One state, `T = 1`, `G_0 = 1.5`, `f = 2`: the integral is 3 and nothing is random.
pub fn one_state() -> FiniteChainModel {
    FiniteChainModel::new(vec![1.0], vec![vec![vec![1.0]]], vec![1.5], vec![], vec![vec![2.0]], 1)
        .expect("one_state tables are valid")
}

/// Two sticky states, `T = 4`.
pub fn two_state() -> FiniteChainModel {
    FiniteChainModel::new(
        vec![0.6, 0.4],
        vec![vec![vec![0.7, 0.3], vec![0.2, 0.8]]],
        vec![1.3, 0.55],
        vec![vec![vec![1.2, 0.45], vec![0.8, 1.7]]],
        vec![vec![1.0, 2.5], vec![0.3, 1.8]],
        4,
    )
    .expect("two_state tables are valid")
}

/// Three states, `T = 3`.
pub fn three_state() -> FiniteChainModel {
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
        3,
    )
    .expect("three_state tables are valid")
}

/// A lazy reflecting walk on nine sites, tilted upward by `G(x, y) = exp(0.4 (y - x))`,
/// estimating the chance of ending on one of the top two sites after `T = 6` steps.
pub fn random_walk() -> FiniteChainModel {
    let n = 9;
    let mut p = vec![vec![0.0; n]; n];
    for x in 0..n {
        p[x][x] += 0.5;
        p[x][x.saturating_sub(1)] += 0.25;
        p[x][(x + 1).min(n - 1)] += 0.25;
    }
    let g = (0..n)
        .map(|x| (0..n).map(|y| (0.4 * (y as f64 - x as f64)).exp()).collect())
        .collect();
    let f = (0..n)
        .map(|_| (0..n).map(|y| if y >= 7 { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut init = vec![0.0; n];
    init[2] = 0.25;
    init[3] = 0.5;
    init[4] = 0.25;
    FiniteChainModel::new(init, vec![p], vec![1.0; n], vec![g], f, 6).expect("random_walk tables are valid")
}

/// `G = 1`, `f = 1` on two states, `T = 3`.
pub fn trivial() -> FiniteChainModel {
    FiniteChainModel::new(
        vec![0.5, 0.5],
        vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
        vec![1.0, 1.0],
        vec![vec![vec![1.0, 1.0], vec![1.0, 1.0]]],
        vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        3,
    )
    .expect("trivial tables are valid")
}

/// Every suite model by name.
pub fn all() -> Vec<(&'static str, FiniteChainModel)> {
    vec![
        ("one_state", one_state()),
        ("two_state", two_state()),
        ("three_state", three_state()),
        ("random_walk", random_walk()),
        ("trivial", trivial()),
    ]
}

/// The models with at most three states used for replicated checks.
pub fn small() -> Vec<(&'static str, FiniteChainModel)> {
    vec![
        ("one_state", one_state()),
        ("two_state", two_state()),
        ("three_state", three_state()),
    ]
}
