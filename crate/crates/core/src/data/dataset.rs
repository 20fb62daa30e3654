//! Sample collections, their binary file format, client partitioning and
//! train/test splits.
//!
//! File layout (little-endian, same conventions as the parameter format):
//!
//! ```text
//! magic    4 bytes "DSET"
//! version  u32     1
//! count, roi_count, of_side, au_count, classes   u64 each
//! count × sample:
//!     subject u64, emotion u64, aus u64 (bit per node)
//!     rois  (roi_count · 75) × f64
//!     flow  (3 · of_side²) × f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::gen::Sample;
use crate::error::{Error, Result};
use crate::nn::{Batch, PATCH, TOKEN};
use crate::params::ByteReader;
use crate::priors::AuSet;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub roi_count: usize,
    pub of_side: usize,
    pub au_count: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks every sample against the header dimensions.
    pub fn new(roi_count: usize, of_side: usize, au_count: usize, classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            roi_count,
            of_side,
            au_count,
            classes,
            samples: Vec::new(),
        };
        for (i, s) in samples.iter().enumerate() {
            ds.check(s).map_err(|m| Error::contract(format!("sample {i}: {m}")))?;
        }
        Ok(Self { samples, ..ds })
    }

    fn check(&self, s: &Sample) -> std::result::Result<(), String> {
        if s.rois.len() != self.roi_count * TOKEN {
            return Err(format!("{} ROI values, expected {}", s.rois.len(), self.roi_count * TOKEN));
        }
        if s.flow.len() != 3 * self.of_side * self.of_side {
            return Err(format!("{} flow values for side {}", s.flow.len(), self.of_side));
        }
        if s.emotion >= self.classes {
            return Err(format!("class {} of {}", s.emotion, self.classes));
        }
        if self.au_count < 64 && s.aus.0 >> self.au_count != 0 {
            return Err(format!("AU bits beyond node {}", self.au_count));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same header, chosen samples.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header()
        }
    }

    fn header(&self) -> Self {
        Self {
            roi_count: self.roi_count,
            of_side: self.of_side,
            au_count: self.au_count,
            classes: self.classes,
            samples: Vec::new(),
        }
    }

    /// Distinct subject ids, ascending.
    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.samples.iter().map(|s| s.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for s in &self.samples {
            c[s.emotion] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.emotion).collect()
    }

    pub fn au_labels(&self) -> Vec<AuSet> {
        self.samples.iter().map(|s| s.aus).collect()
    }

    /// Network input for the given samples.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let (k, s, m) = (self.roi_count, self.of_side, self.au_count);
        let b = indices.len();
        let mut rois = Vec::with_capacity(b * k * TOKEN);
        let mut flow = Vec::with_capacity(b * 3 * s * s);
        let mut aus = Vec::with_capacity(b * m);
        let mut labels = Vec::with_capacity(b);
        for &i in indices {
            let smp = &self.samples[i];
            rois.extend(smp.rois.iter().map(|&v| T::cst(v)));
            flow.extend(smp.flow.iter().map(|&v| T::cst(v)));
            aus.extend((0..m).map(|j| if smp.aus.contains(j) { T::one() } else { T::zero() }));
            labels.push(smp.emotion);
        }
        Batch {
            rois: Tensor::new(&[b, k, 3, PATCH, PATCH], rois).expect("sample sizes checked"),
            flow: Tensor::new(&[b, 3, s, s], flow).expect("sample sizes checked"),
            aus,
            labels,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = 24 + 8 * (self.roi_count * TOKEN + 3 * self.of_side * self.of_side);
        let mut out = Vec::with_capacity(48 + per * self.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [self.len(), self.roi_count, self.of_side, self.au_count, self.classes] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for s in &self.samples {
            for v in [s.subject as u64, s.emotion as u64, s.aus.0] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in s.rois.iter().chain(&s.flow) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let mut head = [0usize; 5];
        for h in &mut head {
            *h = r.u64()? as usize;
        }
        let [count, roi_count, of_side, au_count, classes] = head;
        let per = roi_count
            .checked_mul(TOKEN)
            .zip(of_side.checked_mul(of_side).and_then(|p| p.checked_mul(3)))
            .and_then(|(a, b)| a.checked_add(b))
            .filter(|&n| n.checked_mul(8).and_then(|b| b.checked_add(24)).is_some());
        let Some(per) = per else {
            return Err(r.error_at(at, "header dimensions overflow"));
        };
        let ds = Self {
            roi_count,
            of_side,
            au_count,
            classes,
            samples: Vec::new(),
        };
        if count.checked_mul(24 + 8 * per).is_none_or(|n| n > r.remaining()) {
            return Err(r.error_at(at, format!("{count} samples exceed the remaining stream")));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let subject = r.u64()? as usize;
            let emotion = r.u64()? as usize;
            let aus = AuSet(r.u64()?);
            let rois = r.values::<f64>(roi_count * TOKEN)?;
            let flow = r.values::<f64>(3 * of_side * of_side)?;
            let s = Sample {
                rois,
                flow,
                aus,
                emotion,
                subject,
            };
            ds.check(&s).map_err(|m| r.error_at(at, m))?;
            samples.push(s);
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.offset(), "trailing bytes"));
        }
        Ok(Self { samples, ..ds })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Splits by subject: ascending subject ids are dealt out in contiguous
/// runs of equal length, the first `subjects % clients` clients taking one
/// extra subject each.
pub fn partition_clients(data: &Dataset, clients: usize) -> Result<Vec<Dataset>> {
    if clients < 1 {
        return Err(Error::contract("need at least one client"));
    }
    let subjects = data.subjects();
    if subjects.len() < clients {
        return Err(Error::contract(format!("{} subjects for {clients} clients", subjects.len())));
    }
    let (base, extra) = (subjects.len() / clients, subjects.len() % clients);
    let mut owner = BTreeMap::new();
    let mut next = 0;
    for c in 0..clients {
        let take = base + usize::from(c < extra);
        for &s in &subjects[next..next + take] {
            owner.insert(s, c);
        }
        next += take;
    }
    let mut out: Vec<Dataset> = (0..clients).map(|_| data.header()).collect();
    for s in &data.samples {
        out[owner[&s.subject]].samples.push(s.clone());
    }
    Ok(out)
}

/// One train/test split by sample index into the client's dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub stratified: bool,
}

/// `repeats` independent splits with `round(ratio · n)` training samples.
/// Stratified by class when every present class has at least two samples:
/// per-class training quotas follow the largest-remainder rule, and each
/// class keeps at least one sample on both sides.
pub fn split_train_test(data: &Dataset, ratio: f64, repeats: usize, master: u64) -> Result<Vec<Split>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    if n < 4 {
        return Err(Error::contract(format!("{n} samples, need at least 4 to split")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.emotion].push(i);
    }
    let present: Vec<usize> = (0..data.classes).filter(|&c| !by_class[c].is_empty()).collect();
    let stratified = present.iter().all(|&c| by_class[c].len() >= 2) && present.len() <= n_train.min(n - n_train);
    let quotas = stratified.then(|| quotas(&by_class, &present, n_train, ratio));

    let splits = (0..repeats)
        .map(|rep| {
            let mut rng = seed::rng_at(master, "split", rep as u64);
            let mut train = Vec::with_capacity(n_train);
            let mut test = Vec::with_capacity(n - n_train);
            match &quotas {
                Some(q) => {
                    for &c in &present {
                        let mut idx = by_class[c].clone();
                        idx.shuffle(&mut rng);
                        train.extend_from_slice(&idx[..q[c]]);
                        test.extend_from_slice(&idx[q[c]..]);
                    }
                }
                None => {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng);
                    train.extend_from_slice(&idx[..n_train]);
                    test.extend_from_slice(&idx[n_train..]);
                }
            }
            train.sort_unstable();
            test.sort_unstable();
            Split { train, test, stratified }
        })
        .collect();
    Ok(splits)
}

fn quotas(by_class: &[Vec<usize>], present: &[usize], n_train: usize, ratio: f64) -> Vec<usize> {
    let mut q = vec![0; by_class.len()];
    let mut rem = Vec::with_capacity(present.len());
    for &c in present {
        let exact = ratio * by_class[c].len() as f64;
        q[c] = (exact.floor() as usize).clamp(1, by_class[c].len() - 1);
        rem.push((exact - exact.floor(), c));
    }
    // Largest remainders first, ties to the lower class id.
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = q.iter().sum();
    let mut k = 0;
    while assigned < n_train {
        let c = rem[k % rem.len()].1;
        if q[c] + 1 < by_class[c].len() {
            q[c] += 1;
            assigned += 1;
        }
        k += 1;
    }
    while assigned > n_train {
        let c = rem[rem.len() - 1 - k % rem.len()].1;
        if q[c] > 1 {
            q[c] -= 1;
            assigned -= 1;
        }
        k += 1;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(subject: usize, emotion: usize) -> Sample {
        Sample {
            rois: vec![subject as f64; TOKEN],
            flow: vec![emotion as f64; 3 * 4],
            aus: AuSet::from_indices([emotion]),
            emotion,
            subject,
        }
    }

    fn toy(subjects: usize, per: usize, classes: usize) -> Dataset {
        let samples = (0..subjects)
            .flat_map(|s| (0..per).map(move |i| sample(s, (s + i) % classes)))
            .collect();
        Dataset::new(1, 2, 4, classes, samples).unwrap()
    }

    #[test]
    fn file_roundtrip_and_truncation() {
        let ds = toy(3, 2, 3);
        let bytes = ds.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        for cut in [0, 3, 10, 50, bytes.len() - 1] {
            assert!(matches!(Dataset::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "{cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn ten_subjects_five_clients() {
        let ds = toy(10, 3, 2);
        let parts = partition_clients(&ds, 5).unwrap();
        for p in &parts {
            assert_eq!(p.subjects().len(), 2);
        }
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.subjects()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), ds.len());
    }

    #[test]
    fn remainder_goes_to_low_ids() {
        let parts = partition_clients(&toy(7, 1, 2), 3).unwrap();
        assert_eq!(parts.iter().map(|p| p.subjects()).collect::<Vec<_>>(), vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
        assert_eq!(partition_clients(&toy(4, 2, 2), 1).unwrap()[0], toy(4, 2, 2));
        assert!(matches!(partition_clients(&toy(4, 2, 2), 0), Err(Error::Contract(_))));
        assert!(matches!(partition_clients(&toy(2, 2, 2), 3), Err(Error::Contract(_))));
    }

    #[test]
    fn hundred_samples_split_seventy_thirty() {
        let ds = toy(10, 10, 3);
        let splits = split_train_test(&ds, 0.7, 10, 42).unwrap();
        assert_eq!(splits.len(), 10);
        for sp in &splits {
            assert!(sp.stratified);
            assert_eq!((sp.train.len(), sp.test.len()), (70, 30));
            let mut all = [sp.train.clone(), sp.test.clone()].concat();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(splits[i], splits[j]);
            }
        }
        assert_eq!(splits, split_train_test(&ds, 0.7, 10, 42).unwrap());
    }

    #[test]
    fn rare_class_falls_back_to_plain_split() {
        let mut samples: Vec<Sample> = (0..9).map(|i| sample(i, i % 2)).collect();
        samples.push(sample(9, 2));
        let ds = Dataset::new(1, 2, 4, 3, samples).unwrap();
        let sp = &split_train_test(&ds, 0.7, 1, 0).unwrap()[0];
        assert!(!sp.stratified);
        assert_eq!(sp.train.len(), 7);
        assert!(matches!(split_train_test(&toy(1, 3, 2), 0.7, 1, 0), Err(Error::Contract(_))));
        let empty = Dataset::new(1, 2, 4, 2, vec![]).unwrap();
        assert!(matches!(split_train_test(&empty, 0.7, 1, 0), Err(Error::Contract(_))));
    }
}
