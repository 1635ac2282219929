//! Planted-model generator: data with a known generating model.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coupled::PairBatch;
use crate::dataset::manifest::write_manifest;
use crate::dataset::ppm::{save_image, ImageDims};
use crate::error::{Error, Result};
use crate::model::{save_model, AgingDictionary, HyperParams, ModelBundle, Projection};

/// Pixel value of a synthetic entry `v` is `IMAGE_OFFSET + IMAGE_SCALE * v`.
pub const IMAGE_OFFSET: f64 = 0.5;
pub const IMAGE_SCALE: f64 = 0.25;

/// Fields missing from JSON take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub f: usize,
    pub m: usize,
    pub k: usize,
    pub groups: usize,
    /// Nonzeros per code.
    pub sparsity: usize,
    pub pairs_per_batch: usize,
    /// Per-entry standard deviation of the personalized layer.
    pub layer_magnitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            f: 64,
            m: 12,
            k: 8,
            groups: 3,
            sparsity: 3,
            pairs_per_batch: 200,
            layer_magnitude: 0.05,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.m == 0 || self.k == 0 || self.sparsity == 0 {
            return Err(Error::input("f, m, k and sparsity must be positive"));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::input("pairs_per_batch must be positive"));
        }
        if self.groups < 2 {
            return Err(Error::input("at least two groups are required"));
        }
        if self.m > self.f {
            return Err(Error::input(format!(
                "m = {} exceeds f = {}",
                self.m, self.f
            )));
        }
        if self.sparsity > self.k {
            return Err(Error::input(format!(
                "sparsity {} exceeds k = {}",
                self.sparsity, self.k
            )));
        }
        if !(self.layer_magnitude >= 0.0 && self.noise_sigma >= 0.0)
            || !self.layer_magnitude.is_finite()
            || !self.noise_sigma.is_finite()
        {
            return Err(Error::input(
                "layer magnitude and noise must be finite and >= 0",
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_str(text)
            .map_err(|e| Error::format(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Generating model plus the per-pair codes and layers actually used.
#[derive(Clone, Debug)]
pub struct PlantedTruth {
    pub model: ModelBundle,
    /// k × n per batch.
    pub codes: Vec<DMatrix<f64>>,
    /// f × n per batch.
    pub layers: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub batches: Vec<PairBatch>,
    pub truth: PlantedTruth,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthonormal_basis(f: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = gaussian_matrix(f, m, rng).qr().q();
    // one Gram-Schmidt pass removes the last ulps of non-orthogonality
    let mut basis = q;
    for j in 0..m {
        for i in 0..j {
            let proj = basis.column(i).dot(&basis.column(j));
            let ci = basis.column(i).into_owned();
            basis.column_mut(j).axpy(-proj, &ci, 1.0);
        }
        let n = basis.column(j).norm();
        basis.column_mut(j).unscale_mut(n);
    }
    basis
}

fn unit_atoms(m: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut d = gaussian_matrix(m, k, rng);
    for mut col in d.column_iter_mut() {
        let n = col.norm();
        col.unscale_mut(n);
    }
    d
}

/// Draws `n` fresh pairs for batch `g` from a generating model.
pub fn sample_pairs(
    model: &ModelBundle,
    g: usize,
    n: usize,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(PairBatch, DMatrix<f64>, DMatrix<f64>)> {
    if g == 0 || g >= model.groups() {
        return Err(Error::input(format!("batch index {g} out of range")));
    }
    let (f, k) = (model.f, model.params.k);
    if spec.sparsity > k {
        return Err(Error::input("sparsity exceeds k"));
    }
    let b_young = model.projection(g).basis() * model.dictionary(g).atoms();
    let b_old = model.projection(g + 1).basis() * model.dictionary(g + 1).atoms();
    let mut codes = DMatrix::zeros(k, n);
    let mut layers = DMatrix::zeros(f, n);
    let mut younger = DMatrix::zeros(f, n);
    let mut older = DMatrix::zeros(f, n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        for j in sample(rng, k, spec.sparsity).iter() {
            codes[(j, i)] = StandardNormal.sample(rng);
        }
        let p: DVector<f64> = DVector::from_fn(f, |_, _| {
            spec.layer_magnitude * rng.sample::<f64, _>(StandardNormal)
        });
        let a = codes.column(i);
        let mut x = &b_young * a + &p;
        let mut y = &b_old * a + &p;
        if spec.noise_sigma > 0.0 {
            for v in x.iter_mut().chain(y.iter_mut()) {
                *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        layers.set_column(i, &p);
        younger.set_column(i, &x);
        older.set_column(i, &y);
        ids.push(format!("g{g}_p{i:05}"));
    }
    Ok((PairBatch::new(g, younger, older, ids)?, codes, layers))
}

/// Planted dataset: orthonormal bases from QR of Gaussians, unit-norm
/// Gaussian atoms, codes with uniform support and Gaussian values, Gaussian
/// layers, and additive Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut projections = Vec::with_capacity(spec.groups);
    let mut dictionaries = Vec::with_capacity(spec.groups);
    for g in 1..=spec.groups {
        projections.push(Projection::new(
            g,
            orthonormal_basis(spec.f, spec.m, &mut rng),
        )?);
        dictionaries.push(AgingDictionary::projected(
            g,
            unit_atoms(spec.m, spec.k, &mut rng),
        )?);
    }
    let params = HyperParams {
        k: spec.k,
        m: spec.m,
        groups: spec.groups,
        ..HyperParams::default()
    };
    let model = ModelBundle::new(
        params,
        projections,
        dictionaries,
        format!(
            "planted model {}",
            serde_json::to_string(spec).expect("spec serializes")
        ),
    )?;

    let mut batches = Vec::with_capacity(spec.groups - 1);
    let mut codes = Vec::with_capacity(spec.groups - 1);
    let mut layers = Vec::with_capacity(spec.groups - 1);
    for g in 1..spec.groups {
        let (batch, a, p) = sample_pairs(&model, g, spec.pairs_per_batch, spec, &mut rng)?;
        batches.push(batch);
        codes.push(a);
        layers.push(p);
    }
    Ok(SyntheticData {
        batches,
        truth: PlantedTruth {
            model,
            codes,
            layers,
        },
    })
}

/// Writes `images/<person>_g<group>.ppm`, `manifest.csv`, `truth.adlm` and
/// `spec.json` under `dir`, encoding entries with [`IMAGE_OFFSET`] and [`IMAGE_SCALE`].
/// Returns the number of images written.
pub fn export_synthetic(spec: &SyntheticSpec, data: &SyntheticData, dir: &Path) -> Result<usize> {
    let dims = ImageDims::for_length(data.truth.model.f)?;
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut rows = Vec::new();
    for batch in &data.batches {
        for (i, id) in batch.person_ids.iter().enumerate() {
            for (mat, group) in [
                (&batch.younger, batch.group),
                (&batch.older, batch.group + 1),
            ] {
                let name = format!("images/{id}_g{group}.ppm");
                let pixels = mat.column(i).map(|v| IMAGE_OFFSET + IMAGE_SCALE * v);
                save_image(&pixels, dims, dir.join(&name))?;
                rows.push((id.clone(), group, name));
            }
        }
    }
    write_manifest(&rows, fs::File::create(dir.join("manifest.csv"))?)?;
    let mut truth = Vec::new();
    save_model(&data.truth.model, &mut truth)?;
    fs::write(dir.join("truth.adlm"), truth)?;
    let spec = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(dir.join("spec.json"), spec + "\n")?;
    Ok(rows.len())
}
