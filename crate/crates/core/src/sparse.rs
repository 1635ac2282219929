//! Inner problems: elastic-net coding, the personalized layer, and their
//! alternation.
//!
//! All coding runs in the reduced space. For column-orthonormal `H`,
//! `‖(x − p) − HDa‖² = ‖Hᵀ(x − p) − Da‖² + ‖(I − HHᵀ)(x − p)‖²`, and the second
//! term does not depend on `a`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{AgingDictionary, CodedPair, HyperParams, Projection};

/// Sweep cap for coordinate descent.
pub const MAX_SWEEPS: usize = 20_000;

/// `min_a ‖w̃ − Da‖² + λ₁‖a‖₁ + λ₂‖a‖²` in the reduced space.
#[derive(Clone, Debug)]
pub struct LassoProblem {
    pub dictionary: DMatrix<f64>,
    pub target: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LassoProblem {
    pub fn new(
        dictionary: DMatrix<f64>,
        target: DVector<f64>,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        if dictionary.nrows() != target.len() {
            return Err(Error::dim(format!(
                "dictionary has {} rows, target has length {}",
                dictionary.nrows(),
                target.len()
            )));
        }
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(Error::input("lasso weights must be non-negative"));
        }
        Ok(LassoProblem {
            dictionary,
            target,
            lambda1,
            lambda2,
        })
    }

    pub fn objective(&self, a: &DVector<f64>) -> f64 {
        let resid = &self.target - &self.dictionary * a;
        resid.norm_squared() + self.lambda1 * l1_norm(a) + self.lambda2 * a.norm_squared()
    }

    fn gram(&self) -> GramLasso {
        GramLasso {
            gram: self.dictionary.tr_mul(&self.dictionary),
            corr: self.dictionary.tr_mul(&self.target),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

/// Lasso in covariance form: only `DᵀD` and `Dᵀw̃` enter the iterations.
#[derive(Clone, Debug)]
pub(crate) struct GramLasso {
    pub gram: DMatrix<f64>,
    pub corr: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl GramLasso {
    /// Max violation of the stationarity conditions, given `Dᵀ(w̃ − Da)`.
    fn kkt_from(&self, a: &DVector<f64>, resid_corr: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..a.len() {
            let g = 2.0 * resid_corr[j];
            let v = if a[j] != 0.0 {
                (g - 2.0 * self.lambda2 * a[j] - self.lambda1 * a[j].signum()).abs()
            } else {
                (g.abs() - self.lambda1).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    fn kkt(&self, a: &DVector<f64>) -> f64 {
        self.kkt_from(a, &(&self.corr - &self.gram * a))
    }

    /// Solves the fixed-sign linear system on the current support. Accepted
    /// only when it keeps every sign and lowers the KKT residual.
    fn polish(&self, a: &DVector<f64>, current: f64) -> Option<(DVector<f64>, f64)> {
        let support: Vec<usize> = (0..a.len()).filter(|&j| a[j] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let s = support.len();
        let mut sys = DMatrix::zeros(s, s);
        let mut rhs = DVector::zeros(s);
        for (ii, &i) in support.iter().enumerate() {
            for (jj, &j) in support.iter().enumerate() {
                sys[(ii, jj)] = self.gram[(i, j)];
            }
            sys[(ii, ii)] += self.lambda2;
            rhs[ii] = self.corr[i] - 0.5 * self.lambda1 * a[i].signum();
        }
        let sol = sys.cholesky()?.solve(&rhs);
        let mut out = DVector::zeros(a.len());
        for (ii, &i) in support.iter().enumerate() {
            if sol[ii].signum() != a[i].signum() || !sol[ii].is_finite() {
                return None;
            }
            out[i] = sol[ii];
        }
        let res = self.kkt(&out);
        (res < current).then_some((out, res))
    }

    /// Cyclic coordinate descent in ascending index order.
    pub fn solve(&self, tol: f64, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let k = self.corr.len();
        if self
            .gram
            .iter()
            .chain(self.corr.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::input("lasso inputs are not finite"));
        }
        let mut a = match warm {
            Some(w) if w.len() == k => w.clone(),
            _ => DVector::zeros(k),
        };
        let half_l1 = 0.5 * self.lambda1;
        let mut resid_corr = &self.corr - &self.gram * &a;
        let mut residual = f64::INFINITY;

        for sweep in 1..=MAX_SWEEPS {
            for j in 0..k {
                let qjj = self.gram[(j, j)];
                let denom = qjj + self.lambda2;
                let new = if denom > 0.0 {
                    let rho = resid_corr[j] + qjj * a[j];
                    soft_threshold(rho, half_l1) / denom
                } else {
                    0.0
                };
                let delta = new - a[j];
                if delta != 0.0 {
                    resid_corr.axpy(-delta, &self.gram.column(j), 1.0);
                    a[j] = new;
                }
            }
            // refresh to stop drift in the running correlation
            resid_corr = &self.corr - &self.gram * &a;
            residual = self.kkt_from(&a, &resid_corr);
            if residual <= tol || sweep % 25 == 0 {
                if let Some((polished, res)) = self.polish(&a, residual) {
                    a = polished;
                    residual = res;
                    resid_corr = &self.corr - &self.gram * &a;
                }
            }
            if residual <= tol {
                return Ok(a);
            }
        }
        Err(Error::Convergence {
            iterations: MAX_SWEEPS,
            residual,
            best: a,
        })
    }
}

pub(crate) fn l1_norm(a: &DVector<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Elastic-net code by coordinate descent, certified to KKT residual `tol`.
pub fn solve_lasso(problem: &LassoProblem, tol: f64) -> Result<DVector<f64>> {
    solve_lasso_warm(problem, tol, None)
}

pub fn solve_lasso_warm(
    problem: &LassoProblem,
    tol: f64,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::input("lasso tolerance must be > 0"));
    }
    if problem
        .dictionary
        .iter()
        .chain(problem.target.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::input("lasso inputs are not finite"));
    }
    problem.gram().solve(tol, warm)
}

/// Largest violation of the lasso optimality conditions at `a`.
pub fn kkt_residual(problem: &LassoProblem, a: &DVector<f64>) -> f64 {
    let resid = &problem.target - &problem.dictionary * a;
    problem
        .gram()
        .kkt_from(a, &problem.dictionary.tr_mul(&resid))
}

fn check_sample(x: &DVector<f64>, h: &Projection, d: &AgingDictionary) -> Result<()> {
    if x.len() != h.f() {
        return Err(Error::dim(format!(
            "sample has length {}, projection expects {}",
            x.len(),
            h.f()
        )));
    }
    if d.m() != h.m() {
        return Err(Error::dim(format!(
            "dictionary has {} rows, projection has {} columns",
            d.m(),
            h.m()
        )));
    }
    Ok(())
}

/// Aging component `H D a` in the ambient space.
pub fn aging_component(h: &Projection, d: &AgingDictionary, a: &DVector<f64>) -> DVector<f64> {
    h.basis() * (d.atoms() * a)
}

/// Minimizer of `‖x − HDa − q‖² + γ‖q‖²`, namely `(x − HDa) / (1 + γ)`.
pub fn personalized_layer(
    x: &DVector<f64>,
    h: &Projection,
    d: &AgingDictionary,
    a: &DVector<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    check_sample(x, h, d)?;
    if a.len() != d.k() {
        return Err(Error::dim(format!(
            "code has length {}, dictionary has {} atoms",
            a.len(),
            d.k()
        )));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::input("gamma must be > 0"));
    }
    Ok((x - aging_component(h, d, a)) / (1.0 + gamma))
}

/// Objective of the single-sample inference problem:
/// `‖x − HDa − p‖² + γ‖p‖² + λ₁‖a‖₁ + λ₂‖a‖²`.
pub fn inference_objective(
    x: &DVector<f64>,
    h: &Projection,
    d: &AgingDictionary,
    a: &DVector<f64>,
    p: &DVector<f64>,
    params: &HyperParams,
) -> f64 {
    let resid = x - aging_component(h, d, a) - p;
    resid.norm_squared()
        + params.gamma * p.norm_squared()
        + params.lambda1 * l1_norm(a)
        + params.lambda2 * a.norm_squared()
}

/// Result of a code/layer alternation.
#[derive(Clone, Debug)]
pub struct Alternation {
    pub pair: CodedPair,
    /// Objective after each full (lasso, layer) step; entry 0 is the start.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Alternates exact lasso and layer minimizations from `(a0, p0)`.
pub fn alternate(
    x: &DVector<f64>,
    h: &Projection,
    d: &AgingDictionary,
    params: &HyperParams,
    a0: DVector<f64>,
    p0: DVector<f64>,
) -> Result<Alternation> {
    check_sample(x, h, d)?;
    if a0.len() != d.k() || p0.len() != x.len() {
        return Err(Error::dim("initial code or layer has the wrong length"));
    }
    let mut a = a0;
    let mut p = p0;
    let mut prev = inference_objective(x, h, d, &a, &p, params);
    let mut trace = vec![prev];
    let mut converged = false;
    for _ in 0..params.inner_max_iter {
        let problem = LassoProblem {
            dictionary: d.atoms().clone(),
            target: h.basis().tr_mul(&(x - &p)),
            lambda1: params.lambda1,
            lambda2: params.lambda2,
        };
        a = solve_lasso_warm(&problem, params.lasso_tol, Some(&a))?;
        p = personalized_layer(x, h, d, &a, params.gamma)?;
        let obj = inference_objective(x, h, d, &a, &p, params);
        trace.push(obj);
        let change = (prev - obj).abs();
        prev = obj;
        if change <= params.inner_tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(Alternation {
        pair: CodedPair::new(a, p, params.support_eps),
        trace,
        converged,
    })
}

/// Code and personalized layer of `x` under `(H, D)`.
///
/// The alternation is started at the joint minimizer obtained by
/// eliminating the layer: with `c = γ/(1+γ)` the code then solves a lasso
/// with weights `λ₁/c`, `λ₂/c` on `Hᵀx`. The alternation that follows keeps
/// that point fixed up to solver tolerance and ends with an exact layer step.
pub fn infer_code_and_layer(
    x: &DVector<f64>,
    h: &Projection,
    d: &AgingDictionary,
    params: &HyperParams,
) -> Result<CodedPair> {
    check_sample(x, h, d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("sample is not finite"));
    }
    let c = params.gamma / (1.0 + params.gamma);
    let z = h.basis().tr_mul(x);
    let eliminated = GramLasso {
        gram: d.atoms().tr_mul(d.atoms()),
        corr: d.atoms().tr_mul(&z),
        lambda1: params.lambda1 / c,
        lambda2: params.lambda2 / c,
    };
    let a0 = eliminated.solve(params.lasso_tol, None)?;
    let p0 = personalized_layer(x, h, d, &a0, params.gamma)?;
    Ok(alternate(x, h, d, params, a0, p0)?.pair)
}

/// Code `a` (`k`) that spells the pair `(x, y)` jointly, given the shared
/// layer `p`: elastic net on the stacked targets `[Hᵍᵀ(x−p); Hᵍ⁺¹ᵀ(y−p)]`
/// against `[Dᵍ; Dᵍ⁺¹]`.
#[allow(clippy::too_many_arguments)]
pub fn joint_code(
    x: &DVector<f64>,
    y: &DVector<f64>,
    p: &DVector<f64>,
    h_g: &Projection,
    h_next: &Projection,
    d_g: &AgingDictionary,
    d_next: &AgingDictionary,
    params: &HyperParams,
) -> Result<DVector<f64>> {
    check_sample(x, h_g, d_g)?;
    check_sample(y, h_next, d_next)?;
    if p.len() != x.len() || d_g.k() != d_next.k() {
        return Err(Error::dim("pair, layer or dictionaries disagree in size"));
    }
    let zx = h_g.basis().tr_mul(&(x - p));
    let zy = h_next.basis().tr_mul(&(y - p));
    let stacked = StackedGram::new(d_g.atoms(), d_next.atoms());
    stacked.solve(&zx, &zy, params, None)
}

/// Gram of the stacked dictionary `[Dᵍ; Dᵍ⁺¹]`, shared across a batch.
pub(crate) struct StackedGram<'a> {
    d_g: &'a DMatrix<f64>,
    d_next: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl<'a> StackedGram<'a> {
    pub fn new(d_g: &'a DMatrix<f64>, d_next: &'a DMatrix<f64>) -> Self {
        let gram = d_g.tr_mul(d_g) + d_next.tr_mul(d_next);
        StackedGram { d_g, d_next, gram }
    }

    pub fn solve(
        &self,
        zx: &DVector<f64>,
        zy: &DVector<f64>,
        params: &HyperParams,
        warm: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let lasso = GramLasso {
            gram: self.gram.clone(),
            corr: self.d_g.tr_mul(zx) + self.d_next.tr_mul(zy),
            lambda1: params.lambda1,
            lambda2: params.lambda2,
        };
        lasso.solve(params.lasso_tol, warm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag_problem(l1: f64, l2: f64) -> LassoProblem {
        LassoProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            l1,
            l2,
        )
        .unwrap()
    }

    #[test]
    fn soft_threshold_on_identity() {
        let a = solve_lasso(&diag_problem(0.5, 0.0), 1e-12).unwrap();
        assert_abs_diff_eq!(a[0], 0.75, epsilon = 1e-14);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn ridge_shrinks_diagonal_case() {
        let a = solve_lasso(&diag_problem(0.5, 0.5), 1e-12).unwrap();
        assert_abs_diff_eq!(a[0], 0.5, epsilon = 1e-14);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn kkt_zero_at_closed_form() {
        let problem = diag_problem(0.5, 0.0);
        let a = DVector::from_vec(vec![0.75, 0.0]);
        assert!(kkt_residual(&problem, &a) <= 1e-12);
    }

    #[test]
    fn kkt_grows_with_active_perturbation() {
        let problem = LassoProblem::new(
            DMatrix::from_column_slice(3, 2, &[0.6, 0.8, 0.0, 0.0, 0.6, 0.8]),
            DVector::from_vec(vec![1.0, 0.5, -0.3]),
            0.1,
            0.05,
        )
        .unwrap();
        let a = solve_lasso(&problem, 1e-13).unwrap();
        for j in 0..2 {
            if a[j] == 0.0 {
                continue;
            }
            let mut bumped = a.clone();
            bumped[j] += 0.1;
            let dj = problem.dictionary.column(j).norm_squared();
            assert!(kkt_residual(&problem, &bumped) >= 0.1 * (2.0 * 0.05 + 2.0 * dj) - 1e-9);
        }
    }

    #[test]
    fn non_finite_target_rejected() {
        let mut problem = diag_problem(0.5, 0.0);
        problem.target[0] = f64::INFINITY;
        assert!(matches!(solve_lasso(&problem, 1e-8), Err(Error::Input(_))));
    }

    #[test]
    fn zero_atom_stays_zero() {
        let problem = LassoProblem::new(
            DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            0.1,
            0.0,
        )
        .unwrap();
        let a = solve_lasso(&problem, 1e-12).unwrap();
        assert_eq!(a[1], 0.0);
        assert_abs_diff_eq!(a[0], 0.95, epsilon = 1e-12);
    }

    fn simple_model() -> (Projection, AgingDictionary) {
        let h = Projection::new(1, DMatrix::identity(4, 3)).unwrap();
        let d = AgingDictionary::new(
            1,
            DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.6, 0.8]),
        )
        .unwrap();
        (h, d)
    }

    #[test]
    fn layer_vanishes_on_exact_fit() {
        let (h, d) = simple_model();
        let a = DVector::from_vec(vec![0.3, -1.2]);
        let x = aging_component(&h, &d, &a);
        let p = personalized_layer(&x, &h, &d, &a, 0.1).unwrap();
        assert_eq!(p.norm(), 0.0);
    }

    #[test]
    fn layer_suppressed_by_large_gamma() {
        let (h, d) = simple_model();
        let a = DVector::from_vec(vec![0.3, -1.2]);
        let x = DVector::from_vec(vec![1.0, 2.0, -3.0, 4.0]);
        let p = personalized_layer(&x, &h, &d, &a, 1e12).unwrap();
        let r = (&x - aging_component(&h, &d, &a)).norm();
        assert!(p.norm() <= r / 1e12);
    }

    #[test]
    fn layer_is_stationary_for_unit_residual() {
        let (h, d) = simple_model();
        let a = DVector::from_vec(vec![0.5, 0.5]);
        let mut x = aging_component(&h, &d, &a);
        x[3] += 1.0;
        let p = personalized_layer(&x, &h, &d, &a, 0.1).unwrap();
        assert_abs_diff_eq!(p.norm(), 1.0 / 1.1, epsilon = 1e-15);
        let grad = -2.0 * (&x - aging_component(&h, &d, &a) - &p) + 0.2 * &p;
        assert!(grad.amax() <= 1e-12);
    }

    #[test]
    fn layer_rejects_bad_dims_and_gamma() {
        let (h, d) = simple_model();
        let a = DVector::zeros(2);
        assert!(personalized_layer(&DVector::zeros(3), &h, &d, &a, 0.1).is_err());
        assert!(personalized_layer(&DVector::zeros(4), &h, &d, &DVector::zeros(3), 0.1).is_err());
        assert!(matches!(
            personalized_layer(&DVector::zeros(4), &h, &d, &a, 0.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_sample_gives_zero_pair() {
        let (h, d) = simple_model();
        let params = HyperParams::default();
        let pair = infer_code_and_layer(&DVector::zeros(4), &h, &d, &params).unwrap();
        assert_eq!(pair.code, DVector::zeros(2));
        assert_eq!(pair.layer, DVector::zeros(4));
        assert!(pair.support.is_empty());
    }

    #[test]
    fn joint_code_of_zero_pair_is_zero() {
        let (h, d) = simple_model();
        let z = DVector::zeros(4);
        let a = joint_code(&z, &z, &z, &h, &h, &d, &d, &HyperParams::default()).unwrap();
        assert_eq!(a, DVector::zeros(2));
    }

    #[test]
    fn joint_code_of_consistent_pair_selects_atom() {
        let (h, d) = simple_model();
        let h2 = Projection::new(
            2,
            DMatrix::from_column_slice(
                4,
                3,
                &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            ),
        )
        .unwrap();
        let d2 = AgingDictionary::new(
            2,
            DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 1.0, 0.8, 0.6, 0.0]),
        )
        .unwrap();
        let p = DVector::from_vec(vec![0.05, -0.1, 0.0, 0.2]);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let x = aging_component(&h, &d, &e1) + &p;
        let y = aging_component(&h2, &d2, &e1) + &p;
        let a = joint_code(&x, &y, &p, &h, &h2, &d, &d2, &HyperParams::default()).unwrap();
        assert!(a[0] > 0.9);
        assert_eq!(a[1], 0.0);
    }
}
