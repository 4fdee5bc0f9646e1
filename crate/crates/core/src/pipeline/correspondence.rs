use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::io::{parse_rows, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub confidence: f64,
}

impl Correspondence {
    pub fn new(source: usize, target: usize, confidence: f64) -> Self {
        Self {
            source,
            target,
            confidence,
        }
    }
}

/// Putative point matches between a source and a target cloud.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Result<Self> {
        if let Some(c) = pairs.iter().find(|c| !(c.confidence.is_finite() && c.confidence >= 0.0)) {
            return Err(Error::Domain(format!(
                "correspondence ({}, {}) has invalid confidence {}",
                c.source, c.target, c.confidence
            )));
        }
        Ok(Self { pairs })
    }

    /// Unit-confidence pairs.
    pub fn from_index_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            pairs: pairs.iter().map(|&(s, t)| Correspondence::new(s, t, 1.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Correspondence> {
        self.pairs.iter()
    }

    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|c| (c.source, c.target)).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.pairs.iter().map(|c| c.confidence).collect()
    }

    /// Errors unless every index is below the given cloud sizes.
    pub fn check_bounds(&self, n_source: usize, n_target: usize) -> Result<()> {
        match self.pairs.iter().find(|c| c.source >= n_source || c.target >= n_target) {
            Some(c) => Err(Error::Domain(format!(
                "correspondence ({}, {}) out of range for clouds of {n_source} and {n_target} points",
                c.source, c.target
            ))),
            None => Ok(()),
        }
    }

    /// One `source<TAB>target<TAB>confidence` line per pair.
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.pairs.len() * 24);
        for c in &self.pairs {
            let _ = writeln!(out, "{}\t{}\t{:?}", c.source, c.target, c.confidence);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_tsv())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut pairs = Vec::new();
        for (line, row) in parse_rows(path, &text)? {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected `source target confidence` with integral indices".into(),
            };
            if row.len() != 3 || row[0] < 0.0 || row[1] < 0.0 || row[0].fract() != 0.0 || row[1].fract() != 0.0 {
                return Err(bad());
            }
            pairs.push(Correspondence::new(row[0] as usize, row[1] as usize, row[2]));
        }
        Self::new(pairs)
    }
}

impl FromIterator<Correspondence> for CorrespondenceSet {
    fn from_iter<I: IntoIterator<Item = Correspondence>>(iter: I) -> Self {
        Self {
            pairs: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a CorrespondenceSet {
    type Item = &'a Correspondence;
    type IntoIter = std::slice::Iter<'a, Correspondence>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let set = CorrespondenceSet::new(vec![Correspondence::new(0, 3, 0.25), Correspondence::new(7, 1, 1.0 / 3.0)]).unwrap();
        assert_eq!(set.to_tsv().lines().next().unwrap(), "0\t3\t0.25");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        set.write_tsv(&path).unwrap();
        assert_eq!(CorrespondenceSet::read_tsv(&path).unwrap(), set);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(CorrespondenceSet::new(vec![Correspondence::new(0, 0, -0.1)]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        std::fs::write(&path, "0\t1\t0.5\n1.5\t2\t0.1\n").unwrap();
        assert!(matches!(CorrespondenceSet::read_tsv(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn bounds_check() {
        let set = CorrespondenceSet::from_index_pairs(&[(0, 1), (2, 0)]);
        assert!(set.check_bounds(3, 2).is_ok());
        assert!(set.check_bounds(2, 2).is_err());
    }
}
