//! End-to-end offline training: PCA per group, coupled initialization,
//! then bi-level refinement.

use nalgebra::DMatrix;

use crate::bilevel::{bilevel_train, BilevelOptions, BilevelOutcome};
use crate::coupled::{coupled_train_with, hcat, CoupledOptions, PairBatch, TrainState};
use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelBundle, Projection};
use crate::pca::{build_projection, SampleMatrix};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after coupled initialization.
    pub skip_bilevel: bool,
    pub coupled: CoupledOptions,
    pub bilevel: BilevelOptions,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub coupled: TrainState,
    pub bilevel: Option<BilevelOutcome>,
}

/// Training samples of group `g`: younger sides of batch `g` and older
/// sides of batch `g − 1`.
pub fn group_samples(batches: &[PairBatch], groups: usize) -> Result<Vec<SampleMatrix>> {
    if batches.len() + 1 != groups {
        return Err(Error::dim(format!(
            "{groups} groups need {} batches, got {}",
            groups - 1,
            batches.len()
        )));
    }
    (1..=groups)
        .map(|g| {
            let mut parts: Vec<DMatrix<f64>> = Vec::with_capacity(2);
            if g >= 2 {
                parts.push(batches[g - 2].older.clone());
            }
            if g < groups {
                parts.push(batches[g - 1].younger.clone());
            }
            SampleMatrix::new(g, hcat(&parts))
        })
        .collect()
}

pub fn build_projections(batches: &[PairBatch], params: &HyperParams) -> Result<Vec<Projection>> {
    group_samples(batches, params.groups)?
        .iter()
        .map(|s| build_projection(s, params.m))
        .collect()
}

pub fn train(
    batches: &[PairBatch],
    params: &HyperParams,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    params.validate()?;
    let projections = build_projections(batches, params)?;
    train_with_projections(batches, projections, params, seed, options)
}

pub fn train_with_projections(
    batches: &[PairBatch],
    projections: Vec<Projection>,
    params: &HyperParams,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let coupled = coupled_train_with(batches, &projections, params, seed, &options.coupled)?;
    if options.skip_bilevel {
        let mut provenance = String::from("coupled objective trace:");
        for v in &coupled.objective_trace {
            provenance.push_str(&format!("\n{v:e}"));
        }
        let model = ModelBundle::new(
            params.clone(),
            projections,
            coupled.dictionaries.clone(),
            provenance,
        )?;
        return Ok(TrainOutcome {
            model,
            coupled,
            bilevel: None,
        });
    }
    let outcome = bilevel_train(
        batches,
        &projections,
        params,
        seed.wrapping_add(1),
        &coupled,
        &options.bilevel,
    )?;
    Ok(TrainOutcome {
        model: outcome.model.clone(),
        coupled,
        bilevel: Some(outcome),
    })
}
