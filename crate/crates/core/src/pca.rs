//! Per-group PCA bases from truncated SVD.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::Projection;

/// Training samples of one age group, stacked as columns (f × s).
#[derive(Clone, Debug)]
pub struct SampleMatrix {
    pub group: usize,
    pub columns: DMatrix<f64>,
}

impl SampleMatrix {
    pub fn new(group: usize, columns: DMatrix<f64>) -> Result<Self> {
        if columns.ncols() == 0 {
            return Err(Error::input("sample matrix has no columns"));
        }
        Ok(SampleMatrix { group, columns })
    }
}

/// Keeps the leading `m` left singular vectors of the sample matrix.
///
/// Ties in singular value keep SVD output order; each vector is signed so
/// its largest-magnitude entry (first one on ties) is positive.
pub fn build_projection(samples: &SampleMatrix, m: usize) -> Result<Projection> {
    let mat = &samples.columns;
    let (f, s) = mat.shape();
    if m == 0 || m > f.min(s) {
        return Err(Error::dim(format!(
            "pca dimension {m} must be in 1..={} for a {f} x {s} sample matrix",
            f.min(s)
        )));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("sample matrix has non-finite entries"));
    }

    let svd = mat.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left vectors".into()))?;
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let top = sv[order[0]];
    let cutoff = top * f.max(s) as f64 * f64::EPSILON;
    let smallest_kept = sv[order[m - 1]];
    if top == 0.0 || smallest_kept <= cutoff {
        return Err(Error::dim(format!(
            "sample matrix of group {} has rank below {m}",
            samples.group
        )));
    }

    let mut basis = DMatrix::zeros(f, m);
    for (dst, &src) in order.iter().take(m).enumerate() {
        let mut col = u.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..f {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        basis.set_column(dst, &col);
    }
    Projection::new(samples.group, basis)
}

/// Reduced coordinates `Hᵀx`.
pub fn project(h: &Projection, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != h.f() {
        return Err(Error::dim(format!(
            "sample has length {}, projection expects {}",
            x.len(),
            h.f()
        )));
    }
    Ok(h.basis().tr_mul(x))
}

/// Ambient vector `Hz`.
pub fn lift(h: &Projection, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != h.m() {
        return Err(Error::dim(format!(
            "coordinates have length {}, projection expects {}",
            z.len(),
            h.m()
        )));
    }
    Ok(h.basis() * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::max_identity_deviation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    /// Tail energy via eigenvalues of MᵀM, independent of the SVD path.
    fn tail_energy_oracle(mat: &DMatrix<f64>, m: usize) -> f64 {
        let gram = mat.tr_mul(mat);
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        eig[m..].iter().map(|v| v.max(0.0)).sum()
    }

    #[test]
    fn identity_input_picks_leading_coordinates() {
        let samples = SampleMatrix::new(1, DMatrix::identity(3, 3)).unwrap();
        let h = build_projection(&samples, 2).unwrap();
        let expected = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(h.basis(), &expected);
    }

    #[test]
    fn m_above_sample_count_is_dimension_error() {
        // s = 400 samples cannot support a rank-2000 basis
        let samples = SampleMatrix::new(1, DMatrix::zeros(2001, 400)).unwrap();
        assert!(matches!(
            build_projection(&samples, 2000),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rank_deficient_input_is_dimension_error() {
        let mut mat = random_matrix(6, 4, 3);
        let c0 = mat.column(0).into_owned();
        mat.set_column(1, &(c0 * 2.0));
        let samples = SampleMatrix::new(1, mat).unwrap();
        assert!(build_projection(&samples, 3).is_ok());
        assert!(matches!(
            build_projection(&samples, 4),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut mat = random_matrix(4, 4, 1);
        mat[(2, 2)] = f64::NAN;
        let samples = SampleMatrix::new(1, mat).unwrap();
        assert!(matches!(
            build_projection(&samples, 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn random_8x6_matches_full_svd_tail() {
        let mat = random_matrix(8, 6, 11);
        let samples = SampleMatrix::new(2, mat.clone()).unwrap();
        let h = build_projection(&samples, 4).unwrap();
        assert!(max_identity_deviation(&h.basis().tr_mul(h.basis())) <= 1e-10);
        let resid = &mat - h.basis() * h.basis().tr_mul(&mat);
        let err2 = resid.norm_squared();
        let tail = tail_energy_oracle(&mat, 4);
        assert!(
            (err2 - tail).abs() <= 1e-8 * tail.max(1e-300),
            "{err2} vs {tail}"
        );
    }

    #[test]
    fn best_rank_property_on_assorted_shapes() {
        for (seed, (f, s, m)) in [(5, 10, 3), (50, 50, 20), (30, 12, 12), (12, 30, 7)]
            .into_iter()
            .enumerate()
        {
            let mat = random_matrix(f, s, 100 + seed as u64);
            let h = build_projection(&SampleMatrix::new(1, mat.clone()).unwrap(), m).unwrap();
            assert!(max_identity_deviation(&h.basis().tr_mul(h.basis())) <= 1e-10);
            let err2 = (&mat - h.basis() * h.basis().tr_mul(&mat)).norm_squared();
            let tail = tail_energy_oracle(&mat, m);
            if tail > 1e-20 {
                assert!((err2 - tail).abs() <= 1e-8 * tail, "{f}x{s} m={m}");
            } else {
                assert!(err2 < 1e-18);
            }
        }
    }

    #[test]
    fn sign_convention_makes_pivot_positive() {
        let mat = random_matrix(7, 5, 9);
        let h = build_projection(&SampleMatrix::new(1, mat).unwrap(), 3).unwrap();
        for col in h.basis().column_iter() {
            let pivot = col.iter().copied().fold(
                0.0f64,
                |acc, v| {
                    if v.abs() > acc.abs() {
                        v
                    } else {
                        acc
                    }
                },
            );
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn project_selects_coordinates() {
        let h = Projection::new(1, DMatrix::identity(3, 2)).unwrap();
        let x = DVector::from_vec(vec![3.0, 4.0, 5.0]);
        assert_eq!(project(&h, &x).unwrap(), DVector::from_vec(vec![3.0, 4.0]));
        assert!(matches!(
            project(&h, &DVector::zeros(2)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            lift(&h, &DVector::zeros(3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn lift_of_zero_is_zero() {
        let h =
            build_projection(&SampleMatrix::new(1, random_matrix(9, 5, 2)).unwrap(), 3).unwrap();
        assert_eq!(lift(&h, &DVector::zeros(3)).unwrap(), DVector::zeros(9));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn basis() -> Projection {
            build_projection(&SampleMatrix::new(1, random_matrix(10, 8, 77)).unwrap(), 4).unwrap()
        }

        proptest! {
            #[test]
            fn lift_is_isometry(z in prop::collection::vec(-10.0f64..10.0, 4)) {
                let h = basis();
                let z = DVector::from_vec(z);
                let x = lift(&h, &z).unwrap();
                prop_assert!((x.norm() - z.norm()).abs() <= 1e-10 * z.norm().max(1e-12));
            }

            #[test]
            fn project_inverts_lift_on_span(z in prop::collection::vec(-10.0f64..10.0, 4)) {
                let h = basis();
                let x = lift(&h, &DVector::from_vec(z)).unwrap();
                let back = lift(&h, &project(&h, &x).unwrap()).unwrap();
                prop_assert!((&back - &x).norm() <= 1e-9 * x.norm().max(1e-12));
            }

            #[test]
            fn project_is_non_expansive(x in prop::collection::vec(-10.0f64..10.0, 10)) {
                let h = basis();
                let x = DVector::from_vec(x);
                prop_assert!(project(&h, &x).unwrap().norm() <= x.norm() * (1.0 + 1e-12));
            }
        }
    }
}
