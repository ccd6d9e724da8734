//! Helpers shared by the integration test targets.

use std::path::PathBuf;

use smc_core::schemes::{
    build_bernoulli, build_multinomial, build_multinomial_residual, build_pruning_enrichment,
    build_rejection_control, build_sis, build_stratified, build_stratified_residual,
};
use smc_core::{ResamplingMatrix, SchemeSpec};

pub const WEIGHTS: [f64; 4] = [3.2, 2.4, 0.8, 1.6];

pub fn golden(name: &str) -> ResamplingMatrix {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/figures")
        .join(format!("{name}.txt"));
    ResamplingMatrix::from_triplets(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

pub fn built(name: &str) -> ResamplingMatrix {
    let w = &WEIGHTS;
    match name {
        "n1_6_sis" => build_sis(w, 4, 6),
        "n1_6_multinomial" => build_multinomial(w, 4, 6),
        "n1_6_bernoulli" => build_bernoulli(w, 4, 6),
        "n1_5_parallel_multinomial" => {
            let spec: SchemeSpec = "parallel(2,multinomial)".parse().unwrap();
            return spec.build(w, None, 4, 5).unwrap().matrix;
        }
        "n1_5_pruning_enrichment" => build_pruning_enrichment(w, 1.0, 3.0, 4, 5),
        "n1_5_rejection_control" => build_rejection_control(w, 4, 5),
        "n1_4_multinomial" => build_multinomial(w, 4, 4),
        "n1_4_stratified" => build_stratified(w, 4, 4),
        "n1_4_multinomial_residual" => build_multinomial_residual(w, 4, 4),
        "n1_4_stratified_residual" => build_stratified_residual(w, 4, 4),
        other => panic!("no figure block {other}"),
    }
    .unwrap()
}

pub const BLOCKS: [&str; 10] = [
    "n1_6_sis",
    "n1_6_multinomial",
    "n1_6_bernoulli",
    "n1_5_parallel_multinomial",
    "n1_5_pruning_enrichment",
    "n1_5_rejection_control",
    "n1_4_multinomial",
    "n1_4_stratified",
    "n1_4_multinomial_residual",
    "n1_4_stratified_residual",
];
