use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::{Error, Result};

/// Named parameter arrays, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedParams {
    entries: BTreeMap<String, Matrix>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Option<Matrix> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    /// Look up a parameter and check its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<&Matrix> {
        let m = self
            .entries
            .get(name)
            .ok_or_else(|| Error::dim(format!("missing parameter `{name}`")))?;
        if m.shape() != (rows, cols) {
            return Err(Error::dim(format!(
                "parameter `{name}` is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &NamedParams) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .keys()
                .zip(other.entries.keys())
                .any(|(a, b)| a != b)
        {
            let a: Vec<_> = self.names().collect();
            let b: Vec<_> = other.names().collect();
            return Err(Error::dim(format!(
                "parameter names differ: {a:?} vs {b:?}"
            )));
        }
        for (name, m) in &self.entries {
            let o = &other.entries[name];
            if !m.same_shape(o) {
                return Err(Error::dim(format!(
                    "parameter `{name}` is {}x{} vs {}x{}",
                    m.rows(),
                    m.cols(),
                    o.rows(),
                    o.cols()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha · other`; names and shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &NamedParams) -> Result<()> {
        self.check_compatible(other)?;
        for (name, m) in self.entries.iter_mut() {
            m.axpy(alpha, &other.entries[name])?;
        }
        Ok(())
    }

    pub fn add(&self, other: &NamedParams) -> Result<NamedParams> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> NamedParams {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, m)| (k.clone(), m.scale(s)))
                .collect(),
        }
    }

    /// Sub-collection of entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> NamedParams {
        Self {
            entries: self
                .entries
                .range(prefix.to_string()..)
                .take_while(|(k, _)| k.starts_with(prefix))
                .map(|(k, m)| (k.clone(), m.clone()))
                .collect(),
        }
    }

    /// Union of two collections with disjoint names.
    pub fn merged(&self, other: &NamedParams) -> Result<NamedParams> {
        let mut out = self.clone();
        for (k, m) in &other.entries {
            if out.entries.insert(k.clone(), m.clone()).is_some() {
                return Err(Error::dim(format!("duplicate parameter `{k}` in merge")));
            }
        }
        Ok(out)
    }

    /// Overwrite (or add) every entry of `other` into `self`.
    pub fn overwrite_from(&mut self, other: &NamedParams) {
        for (k, m) in &other.entries {
            self.entries.insert(k.clone(), m.clone());
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .map(Matrix::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |m, v| m.max(v.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Matrix::is_finite)
    }

    /// All scalars concatenated in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    /// Serialize to the checkpoint format: a one-line JSON header listing
    /// `{name, rows, cols}` in order, a newline, then little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header: Vec<HeaderEntry> = self
            .entries
            .iter()
            .map(|(name, m)| HeaderEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.num_scalars() * 8);
        for m in self.entries.values() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<NamedParams> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "missing header terminator".into(),
            })?;
        let header: Vec<HeaderEntry> =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad parameter header: {e}"),
            })?;
        let body = &bytes[nl + 1..];
        let expected: usize = header.iter().map(|h| h.rows * h.cols).sum::<usize>() * 8;
        if body.len() != expected {
            return Err(Error::Parse {
                line: 2,
                message: format!("payload is {} bytes, header implies {expected}", body.len()),
            });
        }
        let mut out = NamedParams::new();
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for h in header {
            let data: Vec<f64> = values.by_ref().take(h.rows * h.cols).collect();
            let m = Matrix::new(h.rows, h.cols, data).map_err(|e| e.with_context(&h.name))?;
            if out.insert(h.name.clone(), m).is_some() {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("duplicate parameter `{}`", h.name),
                });
            }
        }
        Ok(out)
    }
}

impl FromIterator<(String, Matrix)> for NamedParams {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a NamedParams {
    type Item = (&'a String, &'a Matrix);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Matrix>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
