//! Bi-level dictionary learning.
//!
//! For each neighboring pair of groups `(g, g+1)` the upper objective is
//!
//! ```text
//! J = Σ_i ‖x_i − HᵍDᵍa_i − p_i‖² + ‖y_i − Hᵍ⁺¹Dᵍ⁺¹a_i − p_i‖²
//! ```
//!
//! where `(a_i, p_i)` minimize the inference problem of `x_i` alone under
//! `Dᵍ`. `Dᵍ` moves by projected SGD along the implicit gradient of `J`;
//! `Dᵍ⁺¹` is refit by constrained least squares once per epoch.
//!
//! The step at sample counter `n0` is `eta0 / n0`. The counter starts at the
//! batch size by default, so the step halves over the first epoch instead of
//! the first sample.
//!
//! # Implicit gradient
//!
//! With `c = γ/(1+γ)` and `e = 1/(1+γ)` the inference problem has the layer
//! `p = e(x − HDa)` and, on a fixed support `Ω` with signs `s`,
//!
//! ```text
//! (c·D_ΩᵀD_Ω + λ₂I) a_Ω = c·D_ΩᵀHᵀx − (λ₁/2)·s
//! ```
//!
//! Differentiating this system gives, for `β = (c·D_ΩᵀD_Ω + λ₂I)⁻¹ ĝ_Ω`
//! and `ρ = Hᵀx − Da`, the code term `c(ρβᵀ − D_Ωβa_Ωᵀ)` on the columns in
//! `Ω`, where `ĝ` is the derivative of `J` in `a` with `p` following `a`
//! through its closed form. The layer term is `2e·Hᵀ(r_x + r_y)aᵀ` and the
//! direct term `−2Hᵀ(x − p)aᵀ + 2Daaᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coupled::{dictionary_ls_update, PairBatch, TrainState};
use crate::error::{Error, Result};
use crate::model::{
    project_atoms, AgingDictionary, CodedPair, HyperParams, ModelBundle, Projection,
};
use crate::sparse::{aging_component, infer_code_and_layer};

/// One training pair with its inferred code/layer and the older-side model.
#[derive(Clone, Debug)]
pub struct ImplicitGradContext<'a> {
    pub x: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
    pub pair: CodedPair,
    pub h_next: &'a Projection,
    pub d_next: &'a AgingDictionary,
    /// `x − HᵍDᵍa − p`
    pub resid_x: DVector<f64>,
    /// `y − Hᵍ⁺¹Dᵍ⁺¹a − p`
    pub resid_y: DVector<f64>,
    pub loss_x: f64,
    pub loss_y: f64,
}

impl<'a> ImplicitGradContext<'a> {
    pub fn new(
        x: &'a DVector<f64>,
        y: &'a DVector<f64>,
        pair: CodedPair,
        h_g: &Projection,
        d_g: &AgingDictionary,
        h_next: &'a Projection,
        d_next: &'a AgingDictionary,
    ) -> Result<Self> {
        if x.len() != h_g.f() || y.len() != h_next.f() || pair.layer.len() != x.len() {
            return Err(Error::dim("pair and projections disagree in length"));
        }
        if pair.code.len() != d_g.k() || d_next.k() != d_g.k() {
            return Err(Error::dim("code and dictionaries disagree in size"));
        }
        let resid_x = x - aging_component(h_g, d_g, &pair.code) - &pair.layer;
        let resid_y = y - aging_component(h_next, d_next, &pair.code) - &pair.layer;
        if resid_x.iter().chain(resid_y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite residual".into()));
        }
        Ok(ImplicitGradContext {
            loss_x: resid_x.norm_squared(),
            loss_y: resid_y.norm_squared(),
            x,
            y,
            pair,
            h_next,
            d_next,
            resid_x,
            resid_y,
        })
    }

    pub fn loss(&self) -> f64 {
        self.loss_x + self.loss_y
    }
}

/// The three parts of `∂J/∂Dᵍ`.
#[derive(Clone, Debug)]
pub struct GradientTerms {
    /// Through the active code coordinates.
    pub code: DMatrix<f64>,
    /// Through the personalized layer at fixed code.
    pub layer: DMatrix<f64>,
    /// Explicit dependence of the younger-side loss.
    pub direct: DMatrix<f64>,
}

impl GradientTerms {
    pub fn total(&self) -> DMatrix<f64> {
        &self.code + &self.layer + &self.direct
    }
}

/// `∂J_x/∂Dᵍ` at fixed `(a, p)`: `−2Hᵀ(x − p)aᵀ + 2HᵀHDaaᵀ`.
pub fn direct_term(
    h: &Projection,
    d: &AgingDictionary,
    x: &DVector<f64>,
    p: &DVector<f64>,
    a: &DVector<f64>,
) -> DMatrix<f64> {
    let u = h.basis().tr_mul(&(x - p));
    let hd_a = h.basis().tr_mul(&aging_component(h, d, a));
    (hd_a - u) * a.transpose() * 2.0
}

pub fn implicit_gradient_terms(
    ctx: &ImplicitGradContext<'_>,
    h_g: &Projection,
    d_g: &AgingDictionary,
    params: &HyperParams,
) -> Result<GradientTerms> {
    let (m, k) = (d_g.m(), d_g.k());
    let a = &ctx.pair.code;
    let gamma = params.gamma;
    let e = 1.0 / (1.0 + gamma);
    let c = gamma / (1.0 + gamma);
    let dict = d_g.atoms();
    let h = h_g.basis();

    let direct = direct_term(h_g, d_g, ctx.x, &ctx.pair.layer, a);

    let resid_sum = h.tr_mul(&(&ctx.resid_x + &ctx.resid_y));
    let layer = &resid_sum * a.transpose() * (2.0 * e);

    let mut code = DMatrix::zeros(m, k);
    let support = &ctx.pair.support;
    if !support.is_empty() {
        // dJ/da with p = e(x − HDa) following a
        let hx_rx = h.tr_mul(&ctx.resid_x);
        let hy_ry = ctx.h_next.basis().tr_mul(&ctx.resid_y);
        let g_hat = dict.tr_mul(&hx_rx) * -2.0 - ctx.d_next.atoms().tr_mul(&hy_ry) * 2.0
            + dict.tr_mul(&resid_sum) * (2.0 * e);

        let s = support.len();
        let d_omega = dict.select_columns(support.iter());
        let mut sys = d_omega.tr_mul(&d_omega) * c;
        for i in 0..s {
            sys[(i, i)] += params.lambda2;
        }
        let g_omega = DVector::from_iterator(s, support.iter().map(|&j| g_hat[j]));
        let beta = sys
            .cholesky()
            .ok_or_else(|| {
                Error::Numerical(
                    "active atoms are collinear and lambda2 = 0; use lambda2 > 0".into(),
                )
            })?
            .solve(&g_omega);
        let rho = h.tr_mul(ctx.x) - dict * a;
        let d_beta = &d_omega * &beta;
        for (ii, &j) in support.iter().enumerate() {
            let col = (&rho * beta[ii] - &d_beta * a[j]) * c;
            code.set_column(j, &col);
        }
    }

    Ok(GradientTerms {
        code,
        layer,
        direct,
    })
}

/// `∂J/∂Dᵍ` for one pair, including the dependence of `(a, p)` on `Dᵍ`.
pub fn implicit_gradient(
    ctx: &ImplicitGradContext<'_>,
    h_g: &Projection,
    d_g: &AgingDictionary,
    params: &HyperParams,
) -> Result<DMatrix<f64>> {
    Ok(implicit_gradient_terms(ctx, h_g, d_g, params)?.total())
}

/// `D ← Π(D − (eta0/n0)·grad)` with atoms projected onto the unit ball.
pub fn sgd_step(
    d: &AgingDictionary,
    grad: &DMatrix<f64>,
    eta0: f64,
    n0: usize,
) -> Result<AgingDictionary> {
    if n0 == 0 {
        return Err(Error::input("sample counter starts at 1"));
    }
    if grad.shape() != d.atoms().shape() {
        return Err(Error::dim("gradient shape differs from dictionary"));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    let mut atoms = d.atoms() - grad * (eta0 / n0 as f64);
    project_atoms(&mut atoms);
    AgingDictionary::new(d.group(), atoms)
}

/// Older-side objective `‖(Y − P) − Hᵍ⁺¹DA‖²_F`.
pub fn next_objective(
    batch: &PairBatch,
    h_next: &Projection,
    d: &DMatrix<f64>,
    codes: &DMatrix<f64>,
    layers: &DMatrix<f64>,
) -> f64 {
    (&batch.older - layers - h_next.basis() * (d * codes)).norm_squared()
}

/// Refits `Dᵍ⁺¹` to the current codes and layers of the batch.
pub fn update_next_dictionary(
    batch: &PairBatch,
    h_next: &Projection,
    codes: &DMatrix<f64>,
    layers: &DMatrix<f64>,
    d_init: &AgingDictionary,
) -> Result<AgingDictionary> {
    if layers.shape() != batch.older.shape() || codes.ncols() != batch.len() {
        return Err(Error::dim("codes or layers do not match the batch"));
    }
    let targets = h_next.basis().tr_mul(&(&batch.older - layers));
    let d = dictionary_ls_update(&targets, codes, d_init.atoms())?;
    AgingDictionary::new(d_init.group(), d)
}

/// Whether the SGD sample counter restarts for every pair of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaReset {
    Global,
    PerGroup,
}

#[derive(Clone, Debug)]
pub struct BilevelOptions {
    pub max_epochs: usize,
    /// Relative change of J over an epoch that counts as converged.
    pub tol: f64,
    pub eta_reset: EtaReset,
    /// Value the sample counter starts from (and resets to). `None` uses the
    /// size of the batch being trained, so the step only halves after a
    /// full epoch.
    pub n0_start: Option<usize>,
    /// While `Dᵍ` (g ≥ 2) is trained, also fit it as the older dictionary
    /// of batch `g − 1`, with that batch's codes and layers frozen at the end
    /// of its own phase. Without this, later phases undo the refit that
    /// earlier batches rely on.
    pub anchor_previous: bool,
}

impl Default for BilevelOptions {
    fn default() -> Self {
        BilevelOptions {
            max_epochs: 100,
            tol: 1e-5,
            eta_reset: EtaReset::PerGroup,
            n0_start: None,
            anchor_previous: true,
        }
    }
}

/// One row of the training trace (`epoch,group,objective,grad_norm`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub group: usize,
    pub objective: f64,
    /// Mean Frobenius norm of the per-sample gradients of the epoch.
    pub grad_norm: f64,
}

/// Per-epoch feasibility and descent evidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochAudit {
    pub epoch: usize,
    pub group: usize,
    /// Largest atom norm of `Dᵍ` seen after any SGD step of the epoch.
    pub max_norm_after_sgd: f64,
    pub max_norm_after_refit: f64,
    pub next_objective_before: f64,
    pub next_objective_after: f64,
}

#[derive(Clone, Debug)]
pub struct BilevelOutcome {
    pub model: ModelBundle,
    pub trace: Vec<TraceRecord>,
    pub audit: Vec<EpochAudit>,
    /// Epochs run per pair of groups.
    pub epochs: Vec<usize>,
    pub converged: Vec<bool>,
}

fn infer_batch(
    samples: &DMatrix<f64>,
    h: &Projection,
    d: &AgingDictionary,
    params: &HyperParams,
) -> Result<Vec<CodedPair>> {
    (0..samples.ncols())
        .into_par_iter()
        .map(|i| infer_code_and_layer(&samples.column(i).into_owned(), h, d, params))
        .collect()
}

fn stack_pairs(pairs: &[CodedPair]) -> (DMatrix<f64>, DMatrix<f64>) {
    let codes: Vec<DVector<f64>> = pairs.iter().map(|p| p.code.clone()).collect();
    let layers: Vec<DVector<f64>> = pairs.iter().map(|p| p.layer.clone()).collect();
    (
        DMatrix::from_columns(&codes),
        DMatrix::from_columns(&layers),
    )
}

/// Older-side fit of a finished batch, kept while its older dictionary is
/// trained as the younger dictionary of the next batch.
#[derive(Clone, Debug)]
pub struct Anchor {
    /// Reduced targets `Hᵀ(Y − P)`, m × n.
    pub targets: DMatrix<f64>,
    /// Frozen codes, k × n.
    pub codes: DMatrix<f64>,
}

impl Anchor {
    pub fn new(
        batch: &PairBatch,
        h_next: &Projection,
        codes: DMatrix<f64>,
        layers: &DMatrix<f64>,
    ) -> Self {
        Anchor {
            targets: h_next.basis().tr_mul(&(&batch.older - layers)),
            codes,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.ncols() == 0
    }

    /// `‖W − DA‖²`, equal to the older-side objective up to a constant.
    pub fn objective(&self, d: &DMatrix<f64>) -> f64 {
        (&self.targets - d * &self.codes).norm_squared()
    }

    /// Gradient of column `j` of the objective: `−2(w_j − D a_j) a_jᵀ`.
    pub fn gradient(&self, d: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
        let a = self.codes.column(j);
        (self.targets.column(j) - d * a) * a.transpose() * -2.0
    }
}

/// Upper objective J of batch `g` under the current dictionaries.
pub fn upper_objective(
    batch: &PairBatch,
    h_g: &Projection,
    d_g: &AgingDictionary,
    h_next: &Projection,
    d_next: &AgingDictionary,
    params: &HyperParams,
) -> Result<f64> {
    let pairs = infer_batch(&batch.younger, h_g, d_g, params)?;
    let (codes, layers) = stack_pairs(&pairs);
    Ok(upper_from(batch, h_g, d_g, h_next, d_next, &codes, &layers))
}

fn upper_from(
    batch: &PairBatch,
    h_g: &Projection,
    d_g: &AgingDictionary,
    h_next: &Projection,
    d_next: &AgingDictionary,
    codes: &DMatrix<f64>,
    layers: &DMatrix<f64>,
) -> f64 {
    (&batch.younger - h_g.basis() * (d_g.atoms() * codes) - layers).norm_squared()
        + next_objective(batch, h_next, d_next.atoms(), codes, layers)
}

/// Bi-level training started from a coupled solution.
pub fn bilevel_train(
    batches: &[PairBatch],
    projections: &[Projection],
    params: &HyperParams,
    seed: u64,
    init: &TrainState,
    options: &BilevelOptions,
) -> Result<BilevelOutcome> {
    params.validate()?;
    let groups = params.groups;
    if batches.len() + 1 != groups || projections.len() != groups {
        return Err(Error::dim(format!(
            "{groups} groups need {} batches and {groups} projections",
            groups - 1
        )));
    }
    if init.dictionaries.len() != groups {
        return Err(Error::dim(
            "initial state has the wrong number of dictionaries",
        ));
    }
    let mut dicts = init.dictionaries.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut audit = Vec::new();
    let mut epochs_run = Vec::with_capacity(groups - 1);
    let mut converged = Vec::with_capacity(groups - 1);
    if options.n0_start == Some(0) {
        return Err(Error::input("n0_start must be >= 1"));
    }
    let start = |batch: &PairBatch| options.n0_start.unwrap_or(batch.len().max(1));
    let mut n0 = start(&batches[0]);
    let mut anchor: Option<Anchor> = None;

    for g in 1..groups {
        let batch = &batches[g - 1];
        let (h_g, h_next) = (&projections[g - 1], &projections[g]);
        if options.eta_reset == EtaReset::PerGroup {
            n0 = start(batch);
        }
        let mut prev = upper_objective(batch, h_g, &dicts[g - 1], h_next, &dicts[g], params)?;
        trace.push(TraceRecord {
            epoch: 0,
            group: g,
            objective: prev,
            grad_norm: 0.0,
        });
        let anchor_obj =
            |d: &AgingDictionary| anchor.as_ref().map_or(0.0, |a| a.objective(d.atoms()));
        prev += anchor_obj(&dicts[g - 1]);
        trace.last_mut().expect("pushed above").objective = prev;
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut anchor_order: Vec<usize> = (0..anchor.as_ref().map_or(0, Anchor::len)).collect();
        let mut done = false;
        let mut epoch = 0;
        let mut last = None;
        while epoch < options.max_epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            anchor_order.shuffle(&mut rng);
            let mut grad_sum = 0.0;
            let mut max_norm_after_sgd: f64 = 0.0;
            for (t, &i) in order.iter().enumerate() {
                let x = batch.younger.column(i).into_owned();
                let y = batch.older.column(i).into_owned();
                let pair = infer_code_and_layer(&x, h_g, &dicts[g - 1], params)?;
                let ctx =
                    ImplicitGradContext::new(&x, &y, pair, h_g, &dicts[g - 1], h_next, &dicts[g])?;
                let mut grad = implicit_gradient(&ctx, h_g, &dicts[g - 1], params)?;
                if let Some(a) = &anchor {
                    // one anchor column per step, weighted so an epoch covers
                    // both sums equally
                    let j = anchor_order[t % a.len()];
                    let w = a.len() as f64 / batch.len() as f64;
                    grad += a.gradient(dicts[g - 1].atoms(), j) * w;
                }
                grad_sum += grad.norm();
                let stepped = sgd_step(&dicts[g - 1], &grad, params.eta0, n0)?;
                max_norm_after_sgd = max_norm_after_sgd.max(stepped.max_atom_norm());
                dicts[g - 1] = stepped;
                n0 += 1;
            }

            let pairs = infer_batch(&batch.younger, h_g, &dicts[g - 1], params)?;
            let (codes, layers) = stack_pairs(&pairs);
            let before = next_objective(batch, h_next, dicts[g].atoms(), &codes, &layers);
            dicts[g] = update_next_dictionary(batch, h_next, &codes, &layers, &dicts[g])?;
            let after = next_objective(batch, h_next, dicts[g].atoms(), &codes, &layers);
            audit.push(EpochAudit {
                epoch,
                group: g,
                max_norm_after_sgd,
                max_norm_after_refit: dicts[g].max_atom_norm(),
                next_objective_before: before,
                next_objective_after: after,
            });

            let objective = upper_from(
                batch,
                h_g,
                &dicts[g - 1],
                h_next,
                &dicts[g],
                &codes,
                &layers,
            ) + anchor_obj(&dicts[g - 1]);
            if !objective.is_finite() {
                return Err(Error::Numerical(format!(
                    "upper objective diverged in group {g}, epoch {epoch}"
                )));
            }
            trace.push(TraceRecord {
                epoch,
                group: g,
                objective,
                grad_norm: grad_sum / batch.len() as f64,
            });
            let change = (prev - objective).abs() / prev.abs().max(f64::MIN_POSITIVE);
            prev = objective;
            last = Some((codes, layers));
            if change < options.tol {
                done = true;
                break;
            }
        }
        if options.anchor_previous {
            if let Some((codes, layers)) = last {
                anchor = Some(Anchor::new(batch, h_next, codes, &layers));
            }
        }
        epochs_run.push(epoch);
        converged.push(done);
    }

    let mut provenance = String::from("bilevel trace (epoch,group,objective,grad_norm):");
    for r in &trace {
        provenance.push_str(&format!(
            "\n{},{},{:e},{:e}",
            r.epoch, r.group, r.objective, r.grad_norm
        ));
    }
    let model = ModelBundle::new(params.clone(), projections.to_vec(), dicts, provenance)?;
    Ok(BilevelOutcome {
        model,
        trace,
        audit,
        epochs: epochs_run,
        converged,
    })
}
