//! CSV manifests (`person_id,group,path`) and pair construction.
//!
//! A person contributes one pair to batch `g` when they have rows in both
//! `g` and `g + 1`. With several images in one group, the lexicographically
//! smallest path is used. Relative paths resolve against the manifest's
//! directory.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::coupled::PairBatch;
use crate::dataset::ppm::{load_image, ImageDims};
use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["person_id", "group", "path"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub person_id: String,
    pub group: usize,
    /// Resolved path.
    pub path: PathBuf,
    /// 1-based line in the source file.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub groups: usize,
    pub rows: Vec<ManifestRow>,
}

/// The two images of one person in neighbouring groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestPair {
    pub person_id: String,
    pub younger: PathBuf,
    pub older: PathBuf,
}

/// Reads a manifest. `groups` fixes the valid range `1..=groups`; when it
/// is `None` the largest group present is used.
pub fn load_manifest(path: impl AsRef<Path>, groups: Option<usize>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base, groups)
}

pub fn parse_manifest(text: &str, base: &Path, groups: Option<usize>) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::format(format!("manifest header: {e}")))?;
    if header.iter().ne(HEADER) {
        return Err(Error::format(format!(
            "manifest line 1: header must be `{}`",
            HEADER.join(",")
        )));
    }
    if groups == Some(0) {
        return Err(Error::input("groups must be positive"));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(format!("manifest line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line()) as usize;
        let bad = |msg: String| Error::format(format!("manifest line {line}: {msg}"));
        let person_id = record[0].to_string();
        if person_id.is_empty() {
            return Err(bad("empty person_id".into()));
        }
        let group: usize = record[1]
            .parse()
            .map_err(|_| bad(format!("group `{}` is not a positive integer", &record[1])))?;
        if group == 0 || groups.is_some_and(|g| group > g) {
            return Err(bad(format!(
                "group {group} out of range 1..={}",
                groups.map_or("G".to_string(), |g| g.to_string())
            )));
        }
        if record[2].is_empty() {
            return Err(bad("empty path".into()));
        }
        let path = base.join(&record[2]);
        if !seen.insert(path.clone()) {
            return Err(bad(format!("duplicate path {}", &record[2])));
        }
        rows.push(ManifestRow {
            person_id,
            group,
            path,
            line,
        });
    }
    let groups = groups.unwrap_or_else(|| rows.iter().map(|r| r.group).max().unwrap_or(0));
    Ok(Manifest { groups, rows })
}

impl Manifest {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Pairs for batch `g` (groups `g`, `g + 1`), ordered by person id.
    pub fn pairs(&self, g: usize) -> Vec<ManifestPair> {
        let mut chosen: BTreeMap<&str, [Option<&PathBuf>; 2]> = BTreeMap::new();
        for row in &self.rows {
            let side = match row.group {
                x if x == g => 0,
                x if x == g + 1 => 1,
                _ => continue,
            };
            let slot = &mut chosen.entry(&row.person_id).or_default()[side];
            if slot.is_none_or(|p| row.path < *p) {
                *slot = Some(&row.path);
            }
        }
        chosen
            .into_iter()
            .filter_map(|(id, [young, old])| {
                Some(ManifestPair {
                    person_id: id.to_string(),
                    younger: young?.clone(),
                    older: old?.clone(),
                })
            })
            .collect()
    }

    /// Loads batch `g`, or `None` when it has no pairs. All images of the
    /// batch must share one shape.
    pub fn load_batch(&self, g: usize) -> Result<Option<(PairBatch, ImageDims)>> {
        let pairs = self.pairs(g);
        if pairs.is_empty() {
            return Ok(None);
        }
        let images = pairs
            .par_iter()
            .map(|p| Ok((load_image(&p.younger)?, load_image(&p.older)?)))
            .collect::<Result<Vec<_>>>()?;
        let dims = images[0].0.dims;
        for (pair, (young, old)) in pairs.iter().zip(&images) {
            for (img, path) in [(young, &pair.younger), (old, &pair.older)] {
                check_dims(img.dims, dims, path)?;
            }
        }
        let f = dims.len();
        let younger = DMatrix::from_fn(f, pairs.len(), |r, c| images[c].0.pixels[r]);
        let older = DMatrix::from_fn(f, pairs.len(), |r, c| images[c].1.pixels[r]);
        let ids = pairs.into_iter().map(|p| p.person_id).collect();
        Ok(Some((PairBatch::new(g, younger, older, ids)?, dims)))
    }

    /// Loads every batch `1..groups`; each must have at least one pair and
    /// all images must share one shape.
    pub fn load_batches(&self) -> Result<(Vec<PairBatch>, ImageDims)> {
        if self.groups < 2 {
            return Err(Error::input("a manifest needs at least two groups"));
        }
        let mut batches = Vec::with_capacity(self.groups - 1);
        let mut dims: Option<ImageDims> = None;
        for g in 1..self.groups {
            let (batch, d) = self.load_batch(g)?.ok_or_else(|| {
                Error::input(format!(
                    "no person has images in both groups {g} and {}",
                    g + 1
                ))
            })?;
            let expected = *dims.get_or_insert(d);
            let first = self.pairs(g).swap_remove(0).younger;
            check_dims(d, expected, &first)?;
            batches.push(batch);
        }
        Ok((batches, dims.expect("at least one batch")))
    }
}

fn check_dims(got: ImageDims, expected: ImageDims, path: &Path) -> Result<()> {
    if got == expected {
        return Ok(());
    }
    Err(Error::dim(format!(
        "{} is {}x{}x{}, expected {}x{}x{}",
        path.display(),
        got.width,
        got.height,
        got.channels,
        expected.width,
        expected.height,
        expected.channels
    )))
}

/// Writes rows with paths as given (relative to the manifest's directory).
pub fn write_manifest<W: Write>(rows: &[(String, usize, String)], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(HEADER).map_err(io)?;
    for (id, group, path) in rows {
        w.write_record([id.as_str(), &group.to_string(), path.as_str()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, groups: Option<usize>) -> Result<Manifest> {
        parse_manifest(text, Path::new("/data"), groups)
    }

    #[test]
    fn neighbouring_groups_pair() {
        let m = parse(
            "person_id,group,path\nann,1,a1.ppm\nann,2,a2.ppm\n",
            Some(3),
        )
        .unwrap();
        let pairs = m.pairs(1);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].younger, Path::new("/data/a1.ppm"));
        assert_eq!(pairs[0].older, Path::new("/data/a2.ppm"));
        assert!(m.pairs(2).is_empty());
    }

    #[test]
    fn skipped_group_gives_no_pair() {
        let m = parse("person_id,group,path\nbo,1,b1.ppm\nbo,3,b3.ppm\n", None).unwrap();
        assert_eq!(m.groups, 3);
        assert!(m.pairs(1).is_empty() && m.pairs(2).is_empty());
    }

    #[test]
    fn smallest_path_wins() {
        let text = "person_id,group,path\ncy,1,z.ppm\ncy,1,b.ppm\ncy,2,y.ppm\ncy,2,c.ppm\n";
        let pairs = parse(text, None).unwrap().pairs(1);
        assert_eq!(pairs[0].younger, Path::new("/data/b.ppm"));
        assert_eq!(pairs[0].older, Path::new("/data/c.ppm"));
    }

    #[test]
    fn count_matches_persons_in_both_groups() {
        let mut text = String::from("person_id,group,path\n");
        for p in 0..10 {
            text.push_str(&format!("p{p},2,y{p}.ppm\n"));
            if p % 3 != 0 {
                text.push_str(&format!("p{p},3,o{p}.ppm\n"));
            }
        }
        let m = parse(&text, Some(3)).unwrap();
        assert_eq!(m.pairs(2).len(), 6);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse("person_id,group,path\na,1,x.ppm\na,9,y.ppm\n", Some(3)).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse("person_id,group,path\na,one,x.ppm\n", None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse("person_id,group,path\na,1,x.ppm\nb,2,x.ppm\n", None).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = parse("person_id,group,path\na,1\n", None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse("id,group,path\n", None).is_err());
        assert!(parse("person_id,group,path\na,0,x.ppm\n", None).is_err());
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_manifest("/nonexistent/manifest.csv", None),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn write_then_parse() {
        let rows = vec![
            ("a".to_string(), 1, "a1.ppm".to_string()),
            ("a".to_string(), 2, "a2.ppm".to_string()),
        ];
        let mut buf = Vec::new();
        write_manifest(&rows, &mut buf).unwrap();
        let m = parse(std::str::from_utf8(&buf).unwrap(), Some(2)).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.pairs(1).len(), 1);
    }
}
