//! Named, ordered parameter collections and their binary wire format.
//!
//! Wire layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "PSET"
//! version u32      1
//! count   u64
//! count × entry:
//!     name_len u64, name (UTF-8, name_len bytes)
//!     rank     u64, dims (rank × u64)
//!     values   (Π dims) × f64 IEEE-754
//! ```
//!
//! Values are always written as `f64`, whatever the in-memory scalar.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 4] = b"PSET";
pub const PARAMS_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f64> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor<T> {
        &self.entries[index]
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index]
    }

    pub fn name_at(&self, index: usize) -> &str {
        self.entries.get_index(index).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Drops every gradient slot.
    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::clear_grad);
    }

    /// Same names in the same order with the same shapes.
    pub fn conforms(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn ensure_conforms(&self, other: &Self) -> Result<()> {
        if self.conforms(other) {
            return Ok(());
        }
        let first_mismatch = self
            .iter()
            .zip(other.iter())
            .find(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
            .map(|((na, _), (nb, _))| format!(" (first mismatch `{na}` vs `{nb}`)"))
            .unwrap_or_default();
        Err(Error::contract(format!(
            "parameter sets do not conform: {} vs {} entries{first_mismatch}",
            self.len(),
            other.len()
        )))
    }

    /// Copy without gradients.
    pub fn detached(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.detached()))
                .collect(),
        }
    }

    /// Weighted sum `Σ wᵢ · setᵢ` over conforming sets.
    pub fn weighted_sum(sets: &[(&Self, T)]) -> Result<Self> {
        let (first, _) = sets
            .first()
            .ok_or_else(|| Error::contract("weighted sum of zero parameter sets"))?;
        for (s, _) in &sets[1..] {
            first.ensure_conforms(s)?;
        }
        let entries = first
            .entries
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                let mut acc = vec![T::zero(); t.len()];
                for (s, w) in sets {
                    for (a, &v) in acc.iter_mut().zip(s.tensor_at(i).data()) {
                        *a += *w * v;
                    }
                }
                (name.clone(), Tensor::from_parts(t.shape().to_vec(), acc))
            })
            .collect();
        Ok(Self { entries })
    }

    /// Squared Euclidean distance to a conforming set.
    pub fn squared_distance(&self, other: &Self) -> Result<T> {
        self.ensure_conforms(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)))
            .sum())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Encodes into the wire format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 8 + self.len() * 48);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Decodes the wire format. Either the whole stream parses or nothing
    /// is returned.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != PARAMS_MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != PARAMS_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let count = r.u64()? as usize;
        let mut set = Self::new();
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.len_prefix(1)?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error_at(at, "name is not UTF-8"))?
                .to_owned();
            let shape = r.shape()?;
            let data = r.values::<T>(shape.iter().product())?;
            let tensor = Tensor::new(&shape, data).map_err(|e| r.error_at(at, e.to_string()))?;
            set.push(name, tensor).map_err(|e| r.error_at(at, e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.offset(), "trailing bytes"));
        }
        Ok(set)
    }
}

/// Little-endian cursor with offset-carrying errors, shared by the
/// parameter and dataset formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a u64 length and checks that `len × unit` bytes could follow.
    pub(crate) fn len_prefix(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        match (n as usize).checked_mul(unit) {
            Some(bytes) if n <= usize::MAX as u64 && bytes <= self.remaining() => Ok(n as usize),
            _ => Err(self.error_at(at, format!("length {n} exceeds the remaining stream"))),
        }
    }

    pub(crate) fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.len_prefix(8)?;
        let at = self.pos;
        let shape: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let total = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&t| t.checked_mul(8).is_some_and(|b| b <= self.remaining()));
        if total.is_none() {
            return Err(self.error_at(at, format!("shape {shape:?} exceeds the remaining stream")));
        }
        Ok(shape)
    }

    pub(crate) fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::cst(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()).unwrap();
        p.push("b", Tensor::scalar(-0.0)).unwrap();
        p
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = sample();
        assert!(p.push("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn empty_set_is_header_only() {
        let bytes = ParamSet::<f64>::new().to_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(ParamSet::<f64>::from_bytes(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn roundtrip_keeps_negative_zero() {
        let p = sample();
        let q = ParamSet::<f64>::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(q.get("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(p, q);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            match ParamSet::<f64>::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("expected format error at cut {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ParamSet::<f64>::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(ParamSet::<f64>::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn weighted_sum_requires_conformance() {
        let p = sample();
        let mut q = ParamSet::new();
        q.push("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(ParamSet::weighted_sum(&[(&p, 0.5), (&q, 0.5)]).is_err());
        let s = ParamSet::weighted_sum(&[(&p, 0.25), (&p, 0.75)]).unwrap();
        assert_eq!(s, p);
    }
}
