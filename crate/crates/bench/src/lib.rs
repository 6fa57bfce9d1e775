//! Shared input builders for the benchmark suite.

use std::collections::BTreeMap;

use mgaa_core::allocate::SublayerId;
use mgaa_core::decompose::{EnergyKind, EnergyProfile};
use mgaa_core::harness::{generate_token_dataset, init_toy_model, ToyModel, ToyModelConfig};
use mgaa_core::linalg::{gram_accumulate, Matrix};

pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    Matrix::from_fn(rows, cols, |_, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

pub fn seeded_psd(n: usize, seed: u64) -> Matrix {
    let b = seeded_matrix(n, 2 * n, seed);
    gram_accumulate(&Matrix::zeros(n, n), &b).unwrap()
}

pub fn toy_model(seed: u64) -> ToyModel {
    init_toy_model(&ToyModelConfig::default_with_seed(seed)).unwrap()
}

pub fn calibration(model: &ToyModel, sequences: usize, len: usize) -> Vec<Vec<u32>> {
    generate_token_dataset(model.cfg.vocab, sequences, len, 7)
}

/// Seven-matrix sublayer profile set shaped like one toy layer.
pub fn layer_profiles() -> (
    BTreeMap<String, EnergyProfile>,
    BTreeMap<String, (usize, usize)>,
) {
    let mut profiles = BTreeMap::new();
    let mut dims = BTreeMap::new();
    let mut state = 0xFEED_u64;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for (name, d_in, d_out) in [
        ("wq", 64, 64),
        ("wk", 64, 64),
        ("wv", 64, 64),
        ("wo", 64, 64),
        ("wg", 64, 172),
        ("wu", 64, 172),
        ("wd", 172, 64),
    ] {
        let rate = 0.05 + 0.1 * next();
        let n = d_in.min(d_out);
        let spectrum: Vec<f64> = (0..n).map(|i| (-(i as f64) * rate).exp()).collect();
        profiles.insert(
            name.to_string(),
            EnergyProfile::new(&spectrum, EnergyKind::Eigen).unwrap(),
        );
        dims.insert(name.to_string(), (d_in, d_out));
    }
    (profiles, dims)
}

pub fn mha_id() -> SublayerId {
    SublayerId::mha(0)
}
