//! Age progression: chained next-group transfers.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{CodedPair, ModelBundle};
use crate::sparse::{aging_component, infer_code_and_layer};

/// One transfer with its intermediate code and layer.
#[derive(Clone, Debug)]
pub struct Transfer {
    /// `Hᵍ⁺¹Dᵍ⁺¹a* + p*`, unclamped.
    pub output: DVector<f64>,
    pub pair: CodedPair,
}

fn check_group(model: &ModelBundle, g: usize) -> Result<()> {
    if g == 0 || g >= model.groups() {
        return Err(Error::input(format!(
            "source group {g} must be in 1..={}",
            model.groups() - 1
        )));
    }
    Ok(())
}

/// Transfers `x` from group `g` to `g + 1`, keeping `(a*, p*)`.
pub fn transfer(x: &DVector<f64>, model: &ModelBundle, g: usize) -> Result<Transfer> {
    check_group(model, g)?;
    let pair = infer_code_and_layer(x, model.projection(g), model.dictionary(g), &model.params)?;
    let aging = aging_component(model.projection(g + 1), model.dictionary(g + 1), &pair.code);
    let output = aging + &pair.layer;
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("synthesized vector is not finite".into()));
    }
    Ok(Transfer { output, pair })
}

/// `ŷ = Hᵍ⁺¹Dᵍ⁺¹a* + p*` where `(a*, p*)` code `x` in group `g`.
pub fn synthesize_next(x: &DVector<f64>, model: &ModelBundle, g: usize) -> Result<DVector<f64>> {
    Ok(transfer(x, model, g)?.output)
}

/// Outputs for groups `g + 1 ..= target`, each step fed the previous output.
pub fn synthesize_sequence(
    x: &DVector<f64>,
    model: &ModelBundle,
    g: usize,
    target: usize,
) -> Result<Vec<DVector<f64>>> {
    check_group(model, g)?;
    if target <= g || target > model.groups() {
        return Err(Error::input(format!(
            "target group {target} must be in {}..={}",
            g + 1,
            model.groups()
        )));
    }
    let mut out = Vec::with_capacity(target - g);
    let mut current = x.clone();
    for step in g..target {
        current = synthesize_next(&current, model, step)?;
        out.push(current.clone());
    }
    Ok(out)
}
