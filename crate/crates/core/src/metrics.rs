//! Transfer error and planted-atom recovery.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::coupled::PairBatch;
use crate::error::{Error, Result};
use crate::model::{AgingDictionary, ModelBundle};
use crate::synthesis::synthesize_next;

/// Cosine magnitude at which a learned atom counts as recovering a true one.
pub const RECOVERY_THRESHOLD: f64 = 0.95;

/// `‖predicted − truth‖ / ‖truth‖`.
pub fn transfer_error(predicted: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::dim(format!(
            "predicted has length {}, truth has {}",
            predicted.len(),
            truth.len()
        )));
    }
    let norm = truth.norm();
    if norm == 0.0 {
        return Err(Error::input("truth vector has zero norm"));
    }
    Ok((predicted - truth).norm() / norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovery {
    /// Fraction of true atoms matched with |cosine| ≥ the threshold.
    pub score: f64,
    /// `matching[j]` is the learned atom paired with true atom `j`.
    pub matching: Vec<Option<usize>>,
    /// |cosine| of each pair, 0 where unmatched.
    pub cosines: Vec<f64>,
}

/// Greedy matching on |cosine| without replacement. Zero atoms never match.
///
/// Greedy is not an optimal assignment; it is adequate for a thresholded
/// score.
pub fn atom_recovery(learned: &AgingDictionary, truth: &AgingDictionary) -> Result<Recovery> {
    if learned.m() != truth.m() || learned.k() != truth.k() {
        return Err(Error::dim("dictionaries differ in shape"));
    }
    let k = truth.k();
    let unit = |d: &AgingDictionary, j: usize| {
        let c = d.atoms().column(j);
        let n = c.norm();
        (n > 0.0).then(|| c / n)
    };
    let lu: Vec<_> = (0..k).map(|j| unit(learned, j)).collect();
    let tu: Vec<_> = (0..k).map(|j| unit(truth, j)).collect();

    let mut cands = Vec::new();
    for (t, tv) in tu.iter().enumerate() {
        for (l, lv) in lu.iter().enumerate() {
            if let (Some(tv), Some(lv)) = (tv, lv) {
                cands.push((tv.dot(lv).abs(), t, l));
            }
        }
    }
    // ties fall back to index order for determinism
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matching = vec![None; k];
    let mut cosines = vec![0.0; k];
    let mut used = vec![false; k];
    for (cos, t, l) in cands {
        if matching[t].is_none() && !used[l] {
            matching[t] = Some(l);
            cosines[t] = cos;
            used[l] = true;
        }
    }
    let hits = cosines.iter().filter(|&&c| c >= RECOVERY_THRESHOLD).count();
    Ok(Recovery {
        score: hits as f64 / k as f64,
        matching,
        cosines,
    })
}

/// True atoms of group `g` expressed in the model's reduced coordinates,
/// `Hᵍᵀ H*ᵍ D*ᵍ`, so they can be compared with the learned `Dᵍ`.
pub fn aligned_truth(
    model: &ModelBundle,
    truth: &ModelBundle,
    g: usize,
) -> Result<AgingDictionary> {
    if model.f != truth.f || model.groups() != truth.groups() {
        return Err(Error::dim(format!(
            "model has f={} G={}, truth has f={} G={}",
            model.f,
            model.groups(),
            truth.f,
            truth.groups()
        )));
    }
    if model.params.k != truth.params.k {
        return Err(Error::dim(format!(
            "model has k={}, truth has k={}",
            model.params.k, truth.params.k
        )));
    }
    if g == 0 || g > model.groups() {
        return Err(Error::input(format!("group {g} out of range")));
    }
    let aligned = model
        .projection(g)
        .basis()
        .tr_mul(truth.projection(g).basis())
        * truth.dictionary(g).atoms();
    AgingDictionary::projected(g, aligned)
}

/// [`atom_recovery`] of every group against a planted model.
pub fn model_recovery(model: &ModelBundle, truth: &ModelBundle) -> Result<Vec<Recovery>> {
    (1..=model.groups())
        .map(|g| atom_recovery(model.dictionary(g), &aligned_truth(model, truth, g)?))
        .collect()
}

/// Transfer error of every pair in a batch: synthesize from the younger
/// side, compare with the older side.
pub fn batch_transfer_errors(model: &ModelBundle, batch: &PairBatch) -> Result<Vec<f64>> {
    if batch.f() != model.f {
        return Err(Error::dim(format!(
            "batch vectors have length {}, model expects {}",
            batch.f(),
            model.f
        )));
    }
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let x = batch.younger.column(i).into_owned();
            let y = batch.older.column(i).into_owned();
            transfer_error(&synthesize_next(&x, model, batch.group)?, &y)
        })
        .collect()
}

/// Median of finite values; `None` if empty.
pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
