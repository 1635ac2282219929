//! Shared domain types and the ADLM model container.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ADLM"
//!      4     4  u32 version (= 1)
//!      8     4  u32 G
//!     12     8  u64 f
//!     20     4  u32 m
//!     24     4  u32 k
//!     28     8  f64 lambda1
//!     36     8  f64 lambda2
//!     44     8  f64 gamma
//!     52    12  reserved, zero
//!     64        H^1..H^G  (f*m f64 each, column-major)
//!               D^1..D^G  (m*k f64 each, column-major)
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADLM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

/// Orthonormality tolerance for projection bases, per entry of `HᵀH - I`.
pub const ORTHONORMAL_TOL: f64 = 1e-10;
/// Atoms may exceed the unit ball by at most this much.
pub const ATOM_NORM_TOL: f64 = 1e-12;

/// Model and solver hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// ℓ₁ weight on codes.
    pub lambda1: f64,
    /// ridge weight on codes.
    pub lambda2: f64,
    /// ridge weight on the personalized layer.
    pub gamma: f64,
    /// atoms per dictionary.
    pub k: usize,
    /// reduced (PCA) dimension.
    pub m: usize,
    /// number of age groups.
    pub groups: usize,
    /// base SGD step; the step at sample counter n0 is eta0 / n0.
    pub eta0: f64,
    /// relative objective change that ends the code/layer alternation.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// code entries with magnitude above this are active.
    pub support_eps: f64,
    /// KKT tolerance handed to the lasso solver.
    pub lasso_tol: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda1: 0.01,
            lambda2: 0.001,
            gamma: 0.1,
            k: 80,
            m: 2000,
            groups: 9,
            eta0: 4.0,
            inner_tol: 1e-6,
            inner_max_iter: 50,
            support_eps: 1e-10,
            lasso_tol: 1e-8,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 9] = [
            (self.lambda1 > 0.0, "lambda1 must be > 0"),
            (self.lambda2 >= 0.0, "lambda2 must be >= 0"),
            (self.gamma > 0.0, "gamma must be > 0"),
            (self.k > 0, "k must be > 0"),
            (self.m > 0, "m must be > 0"),
            (self.groups >= 2, "at least two age groups are required"),
            (self.eta0 > 0.0, "eta0 must be > 0"),
            (self.inner_tol > 0.0, "inner_tol must be > 0"),
            (
                self.support_eps > 0.0 && self.lasso_tol > 0.0,
                "tolerances must be > 0",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::input(msg));
            }
        }
        if self.inner_max_iter == 0 {
            return Err(Error::input("inner_max_iter must be > 0"));
        }
        Ok(())
    }
}

/// Column-orthonormal PCA basis `H^g` (f × m) of one age group.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    group: usize,
    basis: DMatrix<f64>,
}

impl Projection {
    pub fn new(group: usize, basis: DMatrix<f64>) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(Error::dim(format!(
                "projection must be f x m with 0 < m <= f, got {} x {}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("projection has non-finite entries".into()));
        }
        let gram = basis.tr_mul(&basis);
        let dev = max_identity_deviation(&gram);
        if dev > ORTHONORMAL_TOL {
            return Err(Error::Integrity(format!(
                "projection for group {group} is not orthonormal (max |HᵀH - I| = {dev:.3e})"
            )));
        }
        Ok(Projection { group, basis })
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Ambient dimension f.
    pub fn f(&self) -> usize {
        self.basis.nrows()
    }

    /// Reduced dimension m.
    pub fn m(&self) -> usize {
        self.basis.ncols()
    }
}

pub(crate) fn max_identity_deviation(gram: &DMatrix<f64>) -> f64 {
    let mut dev: f64 = 0.0;
    for j in 0..gram.ncols() {
        for i in 0..gram.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - target).abs());
        }
    }
    dev
}

/// Per-group dictionary `D^g` (m × k) whose atoms lie in the unit ℓ₂ ball.
#[derive(Clone, Debug, PartialEq)]
pub struct AgingDictionary {
    group: usize,
    atoms: DMatrix<f64>,
}

impl AgingDictionary {
    pub fn new(group: usize, atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("dictionary has non-finite entries".into()));
        }
        for (j, col) in atoms.column_iter().enumerate() {
            let norm = col.norm();
            if norm > 1.0 + ATOM_NORM_TOL {
                return Err(Error::Integrity(format!(
                    "atom {j} of group {group} has norm {norm} > 1"
                )));
            }
        }
        Ok(AgingDictionary { group, atoms })
    }

    /// Projects every column onto the unit ball before constructing.
    pub fn projected(group: usize, mut atoms: DMatrix<f64>) -> Result<Self> {
        project_atoms(&mut atoms);
        Self::new(group, atoms)
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn m(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn k(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn max_atom_norm(&self) -> f64 {
        self.atoms
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

/// Scales every column with norm > 1 back onto the unit sphere.
pub fn project_atoms(atoms: &mut DMatrix<f64>) {
    for mut col in atoms.column_iter_mut() {
        let norm = col.norm();
        if norm > 1.0 {
            col /= norm;
        }
    }
}

/// Sparse code and personalized layer of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedPair {
    pub code: DVector<f64>,
    pub layer: DVector<f64>,
    pub support: Vec<usize>,
}

impl CodedPair {
    pub fn new(code: DVector<f64>, layer: DVector<f64>, support_eps: f64) -> Self {
        let support = support_of(&code, support_eps);
        CodedPair {
            code,
            layer,
            support,
        }
    }
}

pub fn support_of(code: &DVector<f64>, eps: f64) -> Vec<usize> {
    code.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > eps)
        .map(|(j, _)| j)
        .collect()
}

/// All projections and dictionaries of a trained model.
///
/// Only `lambda1`, `lambda2`, `gamma` and the dimensions are persisted by
/// [`save_model`]; the remaining knobs reload as defaults and `provenance`
/// reloads empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub params: HyperParams,
    pub projections: Vec<Projection>,
    pub dictionaries: Vec<AgingDictionary>,
    pub f: usize,
    pub provenance: String,
}

impl ModelBundle {
    pub fn new(
        params: HyperParams,
        projections: Vec<Projection>,
        dictionaries: Vec<AgingDictionary>,
        provenance: String,
    ) -> Result<Self> {
        params.validate()?;
        let groups = params.groups;
        if projections.len() != groups || dictionaries.len() != groups {
            return Err(Error::dim(format!(
                "expected {groups} projections and dictionaries, got {} and {}",
                projections.len(),
                dictionaries.len()
            )));
        }
        let f = projections[0].f();
        for (g, (h, d)) in projections.iter().zip(&dictionaries).enumerate() {
            if h.group() != g + 1 || d.group() != g + 1 {
                return Err(Error::Integrity(format!(
                    "entry {} carries group indices {} / {}",
                    g + 1,
                    h.group(),
                    d.group()
                )));
            }
            if h.f() != f || h.m() != params.m {
                return Err(Error::dim(format!(
                    "projection {} is {} x {}, expected {f} x {}",
                    g + 1,
                    h.f(),
                    h.m(),
                    params.m
                )));
            }
            if d.m() != params.m || d.k() != params.k {
                return Err(Error::dim(format!(
                    "dictionary {} is {} x {}, expected {} x {}",
                    g + 1,
                    d.m(),
                    d.k(),
                    params.m,
                    params.k
                )));
            }
        }
        Ok(ModelBundle {
            params,
            projections,
            dictionaries,
            f,
            provenance,
        })
    }

    pub fn groups(&self) -> usize {
        self.params.groups
    }

    /// Projection of 1-based group `g`.
    pub fn projection(&self, g: usize) -> &Projection {
        &self.projections[g - 1]
    }

    /// Dictionary of 1-based group `g`.
    pub fn dictionary(&self, g: usize) -> &AgingDictionary {
        &self.dictionaries[g - 1]
    }
}

/// Size in bytes of an ADLM container with the given dimensions.
pub fn container_len(groups: usize, f: usize, m: usize, k: usize) -> u128 {
    HEADER_LEN as u128 + groups as u128 * (f as u128 * m as u128 + m as u128 * k as u128) * 8
}

pub fn save_model<W: Write>(model: &ModelBundle, mut sink: W) -> Result<()> {
    let p = &model.params;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&u32_dim(p.groups, "G")?.to_le_bytes());
    header.extend_from_slice(&(model.f as u64).to_le_bytes());
    header.extend_from_slice(&u32_dim(p.m, "m")?.to_le_bytes());
    header.extend_from_slice(&u32_dim(p.k, "k")?.to_le_bytes());
    header.extend_from_slice(&p.lambda1.to_le_bytes());
    header.extend_from_slice(&p.lambda2.to_le_bytes());
    header.extend_from_slice(&p.gamma.to_le_bytes());
    header.resize(HEADER_LEN, 0);
    sink.write_all(&header)?;

    for h in &model.projections {
        write_matrix(&mut sink, h.basis())?;
    }
    for d in &model.dictionaries {
        write_matrix(&mut sink, d.atoms())?;
    }
    sink.flush()?;
    Ok(())
}

fn u32_dim(v: usize, name: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::dim(format!("{name} = {v} does not fit the container")))
}

fn write_matrix<W: Write>(sink: &mut W, mat: &DMatrix<f64>) -> Result<()> {
    // nalgebra storage is column-major already.
    let mut buf = Vec::with_capacity(mat.nrows() * 8 * 64);
    for chunk in mat.as_slice().chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_model<R: Read>(mut source: R) -> Result<ModelBundle> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or_format(&mut source, &mut header, "header")?;
    if &header[0..4] != MAGIC {
        return Err(Error::format("bad magic, not an ADLM container"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported container version {version}"
        )));
    }
    let groups = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let f = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let m = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
    let lambda1 = f64::from_le_bytes(header[28..36].try_into().unwrap());
    let lambda2 = f64::from_le_bytes(header[36..44].try_into().unwrap());
    let gamma = f64::from_le_bytes(header[44..52].try_into().unwrap());
    if header[52..].iter().any(|&b| b != 0) {
        return Err(Error::format("reserved header bytes are not zero"));
    }
    let f = usize::try_from(f).map_err(|_| Error::format("f does not fit in memory"))?;
    if groups < 2 || m == 0 || k == 0 || f == 0 || m > f {
        return Err(Error::format(format!(
            "invalid dimensions G={groups} f={f} m={m} k={k}"
        )));
    }
    if f.checked_mul(m).is_none() || m.checked_mul(k).is_none() {
        return Err(Error::format("dimensions overflow"));
    }

    let params = HyperParams {
        lambda1,
        lambda2,
        gamma,
        k,
        m,
        groups,
        ..HyperParams::default()
    };
    params
        .validate()
        .map_err(|e| Error::format(format!("invalid hyperparameters: {e}")))?;

    let mut projections = Vec::with_capacity(groups);
    for g in 1..=groups {
        let basis = read_matrix(&mut source, f, m)?;
        projections.push(Projection::new(g, basis)?);
    }
    let mut dictionaries = Vec::with_capacity(groups);
    for g in 1..=groups {
        let atoms = read_matrix(&mut source, m, k)?;
        dictionaries.push(AgingDictionary::new(g, atoms)?);
    }
    let mut trailing = [0u8; 1];
    if source.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after payload"));
    }
    ModelBundle::new(params, projections, dictionaries, String::new())
}

fn read_exact_or_format<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_matrix<R: Read>(source: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = vec![0u8; rows * 8];
    for _ in 0..cols {
        read_exact_or_format(source, &mut buf, "payload")?;
        data.extend(
            buf.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
        );
    }
    Ok(DMatrix::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> ModelBundle {
        let params = HyperParams {
            k: 3,
            m: 4,
            groups: 2,
            ..HyperParams::default()
        };
        let eye = DMatrix::<f64>::identity(12, 4);
        let mut shifted = DMatrix::<f64>::zeros(12, 4);
        for j in 0..4 {
            shifted[(j + 4, j)] = 1.0;
        }
        let d1 = DMatrix::from_fn(4, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let d2 = DMatrix::from_fn(4, 3, |i, j| 0.25 * (i as f64 - j as f64));
        ModelBundle::new(
            params,
            vec![
                Projection::new(1, eye).unwrap(),
                Projection::new(2, shifted).unwrap(),
            ],
            vec![
                AgingDictionary::new(1, d1).unwrap(),
                AgingDictionary::new(2, d2).unwrap(),
            ],
            String::new(),
        )
        .unwrap()
    }

    #[test]
    fn tiny_container_is_1024_bytes_and_round_trips() {
        let model = tiny_bundle();
        let mut bytes = Vec::new();
        save_model(&model, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 64 + 2 * (12 * 4 + 4 * 3) * 8);
        assert_eq!(bytes.len() as u128, container_len(2, 12, 4, 3));
        let back = load_model(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn full_scale_container_size() {
        // G=9, f=123*98*3, m=2000, k=80
        let len = container_len(9, 36_162, 2000, 80);
        assert_eq!(len, 64 + 9 * (36_162 * 2000 + 2000 * 80) * 8);
    }

    #[test]
    fn header_fields_at_fixed_offsets() {
        let mut bytes = Vec::new();
        save_model(&tiny_bundle(), &mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"ADLM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 0.01);
        assert_eq!(f64::from_le_bytes(bytes[36..44].try_into().unwrap()), 0.001);
        assert_eq!(f64::from_le_bytes(bytes[44..52].try_into().unwrap()), 0.1);
        // first payload value is H^1[0,0], the next one H^1[1,0] (column-major)
        assert_eq!(f64::from_le_bytes(bytes[64..72].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[72..80].try_into().unwrap()), 0.0);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = Vec::new();
        save_model(&tiny_bundle(), &mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            load_model(bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = Vec::new();
        save_model(&tiny_bundle(), &mut bytes).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            load_model(bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = Vec::new();
        save_model(&tiny_bundle(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            load_model(bytes.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(load_model(&bytes[..30]), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = Vec::new();
        save_model(&tiny_bundle(), &mut bytes).unwrap();
        bytes.push(0);
        assert!(matches!(
            load_model(bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn oversized_atom_is_integrity_error() {
        let mut bytes = Vec::new();
        save_model(&tiny_bundle(), &mut bytes).unwrap();
        // D^1 column 0 starts right after both projections.
        let off = 64 + 2 * 12 * 4 * 8;
        bytes[off..off + 8].copy_from_slice(&1.5f64.to_le_bytes());
        assert!(matches!(
            load_model(bytes.as_slice()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn dictionary_rejects_long_atom() {
        let atoms = DMatrix::from_column_slice(2, 1, &[1.0, 1e-5]);
        assert!(AgingDictionary::new(1, atoms).is_err());
        let atoms = DMatrix::from_column_slice(2, 1, &[1.0 + 1e-13, 0.0]);
        assert!(AgingDictionary::new(1, atoms).is_ok());
    }

    #[test]
    fn projection_rejects_non_orthonormal() {
        let basis = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.1, 1.0, 0.0]);
        assert!(matches!(
            Projection::new(1, basis),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn support_uses_strict_threshold() {
        let code = DVector::from_vec(vec![0.0, 1e-10, -2e-10, 0.5]);
        let pair = CodedPair::new(code, DVector::zeros(2), 1e-10);
        assert_eq!(pair.support, vec![2, 3]);
    }

    #[test]
    fn bundle_rejects_mismatched_lengths() {
        let model = tiny_bundle();
        let err = ModelBundle::new(
            model.params.clone(),
            model.projections.clone(),
            model.dictionaries[..1].to_vec(),
            String::new(),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
