//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use agedict::coupled::PairBatch;
use agedict::dataset::synthetic::{generate_synthetic, sample_pairs, SyntheticData, SyntheticSpec};
use agedict::metrics::{batch_transfer_errors, median};
use agedict::model::{HyperParams, ModelBundle};
use agedict::sparse::LassoProblem;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exact lasso minimum by enumerating every sign pattern in {-1, 0, 1}^k.
///
/// For a fixed pattern `s` on support `S` the objective is a quadratic with
/// minimizer `(D_SᵀD_S + λ₂I)⁻¹(D_Sᵀw − λ₁s/2)`. Each candidate is scored
/// with the true objective, so the minimum over candidates is the global one.
pub fn brute_force_lasso(problem: &LassoProblem) -> (DVector<f64>, f64) {
    let k = problem.dictionary.ncols();
    let mut best = DVector::zeros(k);
    let mut best_obj = problem.objective(&best);
    let mut signs = vec![0i8; k];
    for code in 0..3usize.pow(k as u32) {
        let mut c = code;
        for s in signs.iter_mut() {
            *s = (c % 3) as i8 - 1;
            c /= 3;
        }
        let support: Vec<usize> = (0..k).filter(|&j| signs[j] != 0).collect();
        if support.is_empty() {
            continue;
        }
        let ds = problem.dictionary.select_columns(&support);
        let mut lhs = ds.tr_mul(&ds);
        for i in 0..support.len() {
            lhs[(i, i)] += problem.lambda2;
        }
        let mut rhs = ds.tr_mul(&problem.target);
        for (i, &j) in support.iter().enumerate() {
            rhs[i] -= problem.lambda1 * f64::from(signs[j]) / 2.0;
        }
        let Some(chol) = lhs.cholesky() else { continue };
        let sol = chol.solve(&rhs);
        let mut a = DVector::zeros(k);
        for (i, &j) in support.iter().enumerate() {
            a[j] = sol[i];
        }
        let obj = problem.objective(&a);
        if obj < best_obj {
            best_obj = obj;
            best = a;
        }
    }
    (best, best_obj)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Hyperparameters matching a planted spec, default weights otherwise.
pub fn fixture_params(spec: &SyntheticSpec) -> HyperParams {
    HyperParams {
        k: spec.k,
        m: spec.m,
        groups: spec.groups,
        ..HyperParams::default()
    }
}

pub fn fixture(seed: u64, noise_sigma: f64) -> (SyntheticSpec, SyntheticData) {
    let spec = SyntheticSpec {
        seed,
        noise_sigma,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).expect("default spec is valid");
    (spec, data)
}

/// Fresh pairs from the generating model, disjoint from training data.
pub fn held_out(truth: &ModelBundle, spec: &SyntheticSpec, n: usize) -> Vec<PairBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_4e1d);
    (1..spec.groups)
        .map(|g| {
            sample_pairs(truth, g, n, spec, &mut rng)
                .expect("valid spec")
                .0
        })
        .collect()
}

/// Median transfer error over all held-out pairs.
pub fn held_out_median(model: &ModelBundle, batches: &[PairBatch]) -> f64 {
    let mut errs = Vec::new();
    for b in batches {
        errs.extend(batch_transfer_errors(model, b).expect("dimensions match"));
    }
    median(&errs).expect("non-empty")
}
