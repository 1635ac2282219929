//! Coupled dictionary learning over neighboring-group pairs, used to
//! initialize bi-level training.
//!
//! Block coordinate descent on
//!
//! ```text
//! Σ_g ‖Xᵍ − HᵍDᵍAᵍ − Pᵍ‖² + ‖Yᵍ − Hᵍ⁺¹Dᵍ⁺¹Aᵍ − Pᵍ‖² + γ‖Pᵍ‖² + λ₁‖Aᵍ‖₁ + λ₂‖Aᵍ‖²
//! ```
//!
//! over layers, codes and dictionaries in turn.
//!
//! Training runs in stages: first with λ₁ scaled up by the warm-up
//! multipliers, then with the target λ₁. Each stage starts from the previous
//! dictionaries after duplicate or unused atoms are re-seeded. Dictionaries
//! start chained, so atom `j` of every group comes from one person.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{project_atoms, AgingDictionary, HyperParams, Projection};
use crate::sparse::StackedGram;

/// Pairs of one person's samples in groups `g` and `g + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// Younger group `g`, 1-based.
    pub group: usize,
    /// f × n, column i is person i in group g.
    pub younger: DMatrix<f64>,
    /// f × n, column i is person i in group g + 1.
    pub older: DMatrix<f64>,
    pub person_ids: Vec<String>,
}

impl PairBatch {
    pub fn new(
        group: usize,
        younger: DMatrix<f64>,
        older: DMatrix<f64>,
        person_ids: Vec<String>,
    ) -> Result<Self> {
        if younger.ncols() == 0 {
            return Err(Error::input(format!("batch {group} is empty")));
        }
        if younger.shape() != older.shape() {
            return Err(Error::dim(format!(
                "batch {group}: younger is {:?}, older is {:?}",
                younger.shape(),
                older.shape()
            )));
        }
        if person_ids.len() != younger.ncols() {
            return Err(Error::dim(format!(
                "batch {group}: {} ids for {} pairs",
                person_ids.len(),
                younger.ncols()
            )));
        }
        Ok(PairBatch {
            group,
            younger,
            older,
            person_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.younger.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.younger.ncols() == 0
    }

    pub fn f(&self) -> usize {
        self.younger.nrows()
    }
}

/// Which block a descent step updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Layers,
    Codes,
    Dictionaries,
}

/// Objective and feasibility right after one block update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockRecord {
    /// Index into the warm-up schedule; the last stage uses the target λ₁.
    pub stage: usize,
    pub lambda1: f64,
    pub iteration: usize,
    pub block: Block,
    pub objective: f64,
    pub max_atom_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub dictionaries: Vec<AgingDictionary>,
    /// k × nᵍ per batch.
    pub codes: Vec<DMatrix<f64>>,
    /// f × nᵍ per batch.
    pub layers: Vec<DMatrix<f64>>,
    /// Objective of the final stage after each full iteration; entry 0 is
    /// the state the stage started from.
    pub objective_trace: Vec<f64>,
    pub block_trace: Vec<BlockRecord>,
}

#[derive(Clone, Debug)]
pub struct CoupledOptions {
    /// Iteration cap per stage.
    pub max_iter: usize,
    /// Multipliers of λ₁ for warm-up stages run before the target λ₁, in
    /// order. Larger weights make early codes sparser, which moves atoms
    /// toward distinct sample directions before the weakly sparse target
    /// stage. Between stages, duplicate or unused atoms are re-seeded.
    pub warmup: Vec<f64>,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        CoupledOptions {
            max_iter: 300,
            warmup: vec![300.0, 100.0, 10.0],
        }
    }
}

/// Approximate `min ‖W − DA‖²_F` subject to unit-ball atoms, by cyclic exact
/// atom updates followed by projection.
///
/// Atoms whose code row is (numerically) unused are reset to the normalized
/// residual of the worst-reconstructed columns; an all-zero `A` returns
/// `d_init` untouched.
pub fn dictionary_ls_update(
    w: &DMatrix<f64>,
    a: &DMatrix<f64>,
    d_init: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (m, n) = w.shape();
    let k = d_init.ncols();
    if n == 0 || a.ncols() != n || a.nrows() != k || d_init.nrows() != m {
        return Err(Error::dim(format!(
            "targets {m}x{n}, codes {}x{}, dictionary {}x{k} do not agree",
            a.nrows(),
            a.ncols(),
            d_init.nrows()
        )));
    }
    let mut d = d_init.clone();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(d);
    }
    let aat = a * a.transpose();
    let wat = w * a.transpose();

    let dead: Vec<usize> = (0..k).filter(|&j| aat[(j, j)] < 1e-12).collect();
    if !dead.is_empty() {
        let resid = w - &d * a;
        let mut worst: Vec<(usize, f64)> =
            resid.column_iter().map(|c| c.norm()).enumerate().collect();
        worst.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for (&j, &(col, norm)) in dead.iter().zip(worst.iter()) {
            if norm > 0.0 {
                d.set_column(j, &(resid.column(col) / norm));
            }
        }
    }

    let objective = |d: &DMatrix<f64>| -> f64 {
        // ‖W‖² dropped: constant
        -2.0 * d.dot(&wat) + (d.transpose() * d).dot(&aat)
    };
    let w_energy = w.norm_squared();
    let mut prev = objective(&d);
    for _ in 0..100 {
        for j in 0..k {
            let ajj = aat[(j, j)];
            if ajj < 1e-12 {
                continue;
            }
            let grad = wat.column(j) - &d * aat.column(j);
            let mut col = d.column(j) + grad / ajj;
            let norm = col.norm();
            if norm > 1.0 {
                col /= norm;
            }
            d.set_column(j, &col);
        }
        let obj = objective(&d);
        let scale = (w_energy + obj).abs().max(f64::MIN_POSITIVE);
        let change = (prev - obj).abs() / scale;
        prev = obj;
        if change < 1e-8 {
            break;
        }
    }
    project_atoms(&mut d);
    Ok(d)
}

fn check_inputs(
    batches: &[PairBatch],
    projections: &[Projection],
    params: &HyperParams,
) -> Result<()> {
    params.validate()?;
    let groups = params.groups;
    if projections.len() != groups {
        return Err(Error::dim(format!(
            "{} projections for {groups} groups",
            projections.len()
        )));
    }
    if batches.len() != groups - 1 {
        return Err(Error::dim(format!(
            "{} batches for {groups} groups, need {}",
            batches.len(),
            groups - 1
        )));
    }
    let f = projections[0].f();
    for (i, h) in projections.iter().enumerate() {
        if h.f() != f || h.m() != params.m {
            return Err(Error::dim(format!(
                "projection {} is {}x{}, expected {f}x{}",
                i + 1,
                h.f(),
                h.m(),
                params.m
            )));
        }
    }
    for (i, b) in batches.iter().enumerate() {
        if b.group != i + 1 {
            return Err(Error::input(format!(
                "batch at position {} is labelled group {}",
                i + 1,
                b.group
            )));
        }
        if b.is_empty() {
            return Err(Error::input(format!("batch {} is empty", i + 1)));
        }
        if b.f() != f {
            return Err(Error::dim(format!(
                "batch {} has samples of length {}, expected {f}",
                i + 1,
                b.f()
            )));
        }
    }
    Ok(())
}

/// Objective of the coupled model for the current state.
pub fn coupled_objective(
    batches: &[PairBatch],
    projections: &[Projection],
    dictionaries: &[AgingDictionary],
    codes: &[DMatrix<f64>],
    layers: &[DMatrix<f64>],
    params: &HyperParams,
) -> f64 {
    batches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let a = &codes[i];
            let p = &layers[i];
            let bx = projections[i].basis() * (dictionaries[i].atoms() * a);
            let by = projections[i + 1].basis() * (dictionaries[i + 1].atoms() * a);
            let l1: f64 = a.iter().map(|v| v.abs()).sum();
            (&b.younger - bx - p).norm_squared()
                + (&b.older - by - p).norm_squared()
                + params.gamma * p.norm_squared()
                + params.lambda1 * l1
                + params.lambda2 * a.norm_squared()
        })
        .sum()
}

fn normalize_or_gaussian(mut v: DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut norm = v.norm();
    while norm <= 1e-12 {
        v = DVector::from_fn(v.len(), |_, _| StandardNormal.sample(rng));
        norm = v.norm();
    }
    v / norm
}

/// Seeded initial dictionaries for every group, with atom `j` of
/// neighboring groups taken from the same person.
///
/// Batch 1 supplies `k` persons sampled without replacement: their reduced
/// younger samples become `D¹` and their older samples `D²`. For later
/// batches, atom `j` of `Dᵍ⁺¹` is the older sample of the not yet used
/// person whose younger sample best matches atom `j` of `Dᵍ`. Missing or
/// zero columns fall back to Gaussian directions.
pub fn initial_dictionaries(
    batches: &[PairBatch],
    projections: &[Projection],
    params: &HyperParams,
    seed: u64,
) -> Result<Vec<AgingDictionary>> {
    check_inputs(batches, projections, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, m) = (params.k, params.m);
    let zero = DVector::zeros(m);

    let first = &batches[0];
    let zx = projections[0].basis().tr_mul(&first.younger);
    let zy = projections[1].basis().tr_mul(&first.older);
    let picks = sample(&mut rng, first.len(), k.min(first.len())).into_vec();
    let mut d_prev = DMatrix::zeros(m, k);
    let mut d_next = DMatrix::zeros(m, k);
    for j in 0..k {
        let (x, y) = match picks.get(j) {
            Some(&i) => (zx.column(i).into_owned(), zy.column(i).into_owned()),
            None => (zero.clone(), zero.clone()),
        };
        d_prev.set_column(j, &normalize_or_gaussian(x, &mut rng));
        d_next.set_column(j, &normalize_or_gaussian(y, &mut rng));
    }
    let mut out = vec![AgingDictionary::projected(1, d_prev)?];
    d_prev = d_next;

    for g in 2..params.groups {
        let batch = &batches[g - 1];
        let zx = projections[g - 1].basis().tr_mul(&batch.younger);
        let zy = projections[g].basis().tr_mul(&batch.older);
        let norms: Vec<f64> = zx.column_iter().map(|c| c.norm()).collect();
        let mut used = vec![false; batch.len()];
        let mut d = DMatrix::zeros(m, k);
        for j in 0..k {
            let atom = d_prev.column(j);
            let mut best: Option<(usize, f64)> = None;
            for i in 0..batch.len() {
                if used[i] || norms[i] <= 1e-12 {
                    continue;
                }
                let cos = atom.dot(&zx.column(i)) / norms[i];
                if best.is_none_or(|(_, c)| cos.abs() > c.abs()) {
                    best = Some((i, cos));
                }
            }
            let col = match best {
                Some((i, cos)) => {
                    used[i] = true;
                    zy.column(i) * cos.signum()
                }
                None => zero.clone(),
            };
            d.set_column(j, &normalize_or_gaussian(col, &mut rng));
        }
        out.push(AgingDictionary::projected(
            g,
            std::mem::replace(&mut d_prev, d),
        )?);
    }
    out.push(AgingDictionary::projected(params.groups, d_prev)?);
    Ok(out)
}

/// Shared layer minimizing both residuals given codes:
/// `P = ((X − BᵍA) + (Y − Bᵍ⁺¹A)) / (2 + γ)`.
pub fn coupled_layers(
    batch: &PairBatch,
    h_g: &Projection,
    h_next: &Projection,
    d_g: &AgingDictionary,
    d_next: &AgingDictionary,
    codes: &DMatrix<f64>,
    gamma: f64,
) -> DMatrix<f64> {
    let rx = &batch.younger - h_g.basis() * (d_g.atoms() * codes);
    let ry = &batch.older - h_next.basis() * (d_next.atoms() * codes);
    (rx + ry) / (2.0 + gamma)
}

#[allow(clippy::too_many_arguments)]
fn coupled_codes(
    batch: &PairBatch,
    h_g: &Projection,
    h_next: &Projection,
    d_g: &AgingDictionary,
    d_next: &AgingDictionary,
    layers: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
    params: &HyperParams,
) -> Result<DMatrix<f64>> {
    let zx = h_g.basis().tr_mul(&(&batch.younger - layers));
    let zy = h_next.basis().tr_mul(&(&batch.older - layers));
    let stacked = StackedGram::new(d_g.atoms(), d_next.atoms());
    let cols: Vec<DVector<f64>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let w = warm.map(|a| a.column(i).into_owned());
            stacked.solve(
                &zx.column(i).into_owned(),
                &zy.column(i).into_owned(),
                params,
                w.as_ref(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

fn update_dictionaries(
    batches: &[PairBatch],
    projections: &[Projection],
    dictionaries: &[AgingDictionary],
    codes: &[DMatrix<f64>],
    layers: &[DMatrix<f64>],
) -> Result<Vec<AgingDictionary>> {
    let groups = projections.len();
    (1..=groups)
        .map(|g| {
            let h = projections[g - 1].basis();
            let mut targets: Vec<DMatrix<f64>> = Vec::new();
            let mut used: Vec<&DMatrix<f64>> = Vec::new();
            if g < groups {
                targets.push(h.tr_mul(&(&batches[g - 1].younger - &layers[g - 1])));
                used.push(&codes[g - 1]);
            }
            if g >= 2 {
                targets.push(h.tr_mul(&(&batches[g - 2].older - &layers[g - 2])));
                used.push(&codes[g - 2]);
            }
            let w = hcat(&targets);
            let a = hcat_refs(&used);
            let d = dictionary_ls_update(&w, &a, dictionaries[g - 1].atoms())?;
            AgingDictionary::new(g, d)
        })
        .collect()
}

pub(crate) fn hcat(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let refs: Vec<&DMatrix<f64>> = parts.iter().collect();
    hcat_refs(&refs)
}

fn hcat_refs(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(*p);
        at += p.ncols();
    }
    out
}

/// Coupled training with default options.
pub fn coupled_train(
    batches: &[PairBatch],
    projections: &[Projection],
    params: &HyperParams,
    seed: u64,
) -> Result<TrainState> {
    coupled_train_with(
        batches,
        projections,
        params,
        seed,
        &CoupledOptions::default(),
    )
}

pub fn coupled_train_with(
    batches: &[PairBatch],
    projections: &[Projection],
    params: &HyperParams,
    seed: u64,
    options: &CoupledOptions,
) -> Result<TrainState> {
    let init = initial_dictionaries(batches, projections, params, seed)?;
    coupled_train_from(batches, projections, params, init, options)
}

/// Coupled training from caller-supplied dictionaries.
pub fn coupled_train_from(
    batches: &[PairBatch],
    projections: &[Projection],
    params: &HyperParams,
    init: Vec<AgingDictionary>,
    options: &CoupledOptions,
) -> Result<TrainState> {
    check_inputs(batches, projections, params)?;
    if init.len() != params.groups || init.iter().any(|d| d.m() != params.m || d.k() != params.k) {
        return Err(Error::dim(
            "initial dictionaries do not match the parameters",
        ));
    }
    if options.warmup.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::input("warm-up multipliers must be finite and > 0"));
    }
    let hs = projections;
    let mut state = TrainState {
        dictionaries: init,
        codes: Vec::new(),
        layers: batches
            .iter()
            .map(|b| DMatrix::zeros(b.f(), b.len()))
            .collect(),
        objective_trace: Vec::new(),
        block_trace: Vec::new(),
    };

    let stages: Vec<f64> = options
        .warmup
        .iter()
        .map(|w| w * params.lambda1)
        .chain(std::iter::once(params.lambda1))
        .collect();
    for (stage, &lambda1) in stages.iter().enumerate() {
        let stage_params = HyperParams {
            lambda1,
            ..params.clone()
        };
        if stage > 0 {
            state.dictionaries = refresh_duplicates(batches, hs, &state)?;
        }
        state.codes = batches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                coupled_codes(
                    b,
                    &hs[i],
                    &hs[i + 1],
                    &state.dictionaries[i],
                    &state.dictionaries[i + 1],
                    &state.layers[i],
                    (stage > 0).then(|| &state.codes[i]),
                    &stage_params,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        state.objective_trace = run_stage(
            batches,
            hs,
            &stage_params,
            stage,
            options.max_iter,
            &mut state,
        )?;
    }
    Ok(state)
}

/// Block descent at fixed weights; returns the per-iteration objective.
fn run_stage(
    batches: &[PairBatch],
    hs: &[Projection],
    params: &HyperParams,
    stage: usize,
    max_iter: usize,
    state: &mut TrainState,
) -> Result<Vec<f64>> {
    let max_norm =
        |ds: &[AgingDictionary]| ds.iter().map(|d| d.max_atom_norm()).fold(0.0, f64::max);
    let objective = |s: &TrainState| {
        coupled_objective(batches, hs, &s.dictionaries, &s.codes, &s.layers, params)
    };
    let layer_step = |s: &mut TrainState| {
        for (i, b) in batches.iter().enumerate() {
            s.layers[i] = coupled_layers(
                b,
                &hs[i],
                &hs[i + 1],
                &s.dictionaries[i],
                &s.dictionaries[i + 1],
                &s.codes[i],
                params.gamma,
            );
        }
    };
    let record = |s: &mut TrainState, iteration, block| {
        let r = BlockRecord {
            stage,
            lambda1: params.lambda1,
            iteration,
            block,
            objective: objective(s),
            max_atom_norm: max_norm(&s.dictionaries),
        };
        s.block_trace.push(r);
        r.objective
    };

    let mut prev = objective(state);
    let mut trace = vec![prev];
    for iteration in 1..=max_iter {
        layer_step(state);
        record(state, iteration, Block::Layers);

        for (i, b) in batches.iter().enumerate() {
            state.codes[i] = coupled_codes(
                b,
                &hs[i],
                &hs[i + 1],
                &state.dictionaries[i],
                &state.dictionaries[i + 1],
                &state.layers[i],
                Some(&state.codes[i]),
                params,
            )?;
        }
        record(state, iteration, Block::Codes);

        state.dictionaries = update_dictionaries(
            batches,
            hs,
            &state.dictionaries,
            &state.codes,
            &state.layers,
        )?;
        let obj = record(state, iteration, Block::Dictionaries);
        trace.push(obj);

        let change = (prev - obj).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = obj;
        if change < params.inner_tol {
            break;
        }
    }

    // end on a layer step so the returned layers are stationary
    layer_step(state);
    let obj = record(state, trace.len(), Block::Layers);
    if let Some(last) = trace.last_mut() {
        *last = obj;
    }
    Ok(trace)
}

/// Cosine above which two stacked atoms count as duplicates.
const DUPLICATE_COS: f64 = 0.99;

/// Replaces atoms that are unused or duplicate another atom across all
/// groups. Replacements come from the worst-fitted pairs: atom `j` of groups
/// `g` and `g + 1` becomes the normalized reduced residual of that pair;
/// atoms of other groups are kept.
fn refresh_duplicates(
    batches: &[PairBatch],
    hs: &[Projection],
    state: &TrainState,
) -> Result<Vec<AgingDictionary>> {
    let mut dicts: Vec<DMatrix<f64>> = state
        .dictionaries
        .iter()
        .map(|d| d.atoms().clone())
        .collect();
    let k = dicts[0].ncols();
    let stacked = hcat_rows(&dicts);
    let unit: Vec<Option<DVector<f64>>> = stacked
        .column_iter()
        .map(|c| {
            let n = c.norm();
            (n > 1e-12).then(|| c / n)
        })
        .collect();
    let usage: Vec<f64> = (0..k)
        .map(|j| state.codes.iter().map(|a| a.row(j).norm_squared()).sum())
        .collect();
    let stale: Vec<usize> = (0..k)
        .filter(|&j| {
            usage[j] < 1e-12
                || unit[j].is_none()
                || (0..j).any(|i| match (&unit[i], &unit[j]) {
                    (Some(u), Some(v)) => u.dot(v).abs() > DUPLICATE_COS,
                    _ => false,
                })
        })
        .collect();
    if stale.is_empty() {
        return Ok(state.dictionaries.clone());
    }

    // (batch, person, reduced residuals of both sides, fit error)
    let mut worst = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        let a = &state.codes[b];
        let p = &state.layers[b];
        let rx = hs[b].basis().tr_mul(&(&batch.younger - p)) - &dicts[b] * a;
        let ry = hs[b + 1].basis().tr_mul(&(&batch.older - p)) - &dicts[b + 1] * a;
        for i in 0..batch.len() {
            let err = rx.column(i).norm_squared() + ry.column(i).norm_squared();
            worst.push((err, b, rx.column(i).into_owned(), ry.column(i).into_owned()));
        }
    }
    worst.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    for (&j, (err, b, rx, ry)) in stale.iter().zip(worst) {
        if err <= 1e-24 {
            break;
        }
        for (g, r) in [(b, rx), (b + 1, ry)] {
            let n = r.norm();
            if n > 1e-12 {
                dicts[g].set_column(j, &(r / n));
            }
        }
    }
    dicts
        .into_iter()
        .enumerate()
        .map(|(i, d)| AgingDictionary::projected(i + 1, d))
        .collect()
}

fn hcat_rows(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}
