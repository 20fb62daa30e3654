use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::catalog::{AuCatalog, Region};
use crate::error::{Error, Result};

/// Row sums of D must hit 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Set of active AUs, bit `i` for catalog index `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuSet(pub u64);

impl AuSet {
    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self(0);
        for i in idx {
            s.insert(i);
        }
        s
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < 64, "AU index {i} does not fit an AuSet");
        self.0 |= 1 << i;
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Dense 0/1 vector over `n` AUs.
    pub fn to_vec(self, n: usize) -> Vec<f64> {
        (0..n).map(|i| if self.contains(i) { 1.0 } else { 0.0 }).collect()
    }
}

/// Dense square matrix over AU nodes.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct AuMatrix {
    n: usize,
    data: Vec<f64>,
}

impl fmt::Debug for AuMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AuMatrix({n}x{n})", n = self.n)?;
        for i in 0..self.n {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        Ok(())
    }
}

impl AuMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    /// All-ones off the diagonal.
    pub fn complete(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 0.0 } else { 1.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Neighbours of `i`, i.e. the support of row `i`.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j) != 0.0).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&v| v != 0.0).count()
    }

    /// Principal submatrix on `nodes`, in the given order.
    pub fn submatrix(&self, nodes: &[usize]) -> Self {
        Self::from_fn(nodes.len(), |a, b| self.get(nodes[a], nodes[b]))
    }

    /// Boolean support mask, row-major.
    pub fn mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0.0).collect()
    }
}

/// Coordinated-pair declaration as read from the prior config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencyConfig {
    /// Undirected coordinated pairs of AU ids.
    #[serde(default)]
    pub pairs: Vec<[u32; 2]>,
    /// Directed neighbour lists keyed by AU id. One-sided entries are
    /// mirrored and reported.
    #[serde(default)]
    pub neighbours: BTreeMap<String, Vec<u32>>,
}

/// Builds the symmetric 0/1 adjacency over `catalog` from the declared pairs.
///
/// Returns the matrix and a list of warnings (self pairs dropped, one-sided
/// neighbour entries mirrored).
pub fn load_adjacency(cfg: &AdjacencyConfig, catalog: &AuCatalog) -> Result<(AuMatrix, Vec<String>)> {
    let n = catalog.au_count();
    let lookup = |au: u32, path: String| {
        catalog
            .index_of(au)
            .ok_or_else(|| Error::config(path, format!("AU{au} is not in the catalog")))
    };
    let mut directed = AuMatrix::zeros(n);
    let mut warnings = Vec::new();
    let mut undirected = Vec::new();
    for (p, &[a, b]) in cfg.pairs.iter().enumerate() {
        let i = lookup(a, format!("adjacency.pairs[{p}]"))?;
        let j = lookup(b, format!("adjacency.pairs[{p}]"))?;
        undirected.push((i, j));
    }
    for (key, list) in &cfg.neighbours {
        let path = format!("adjacency.neighbours.{key}");
        let a: u32 = key
            .trim_start_matches("AU")
            .parse()
            .map_err(|_| Error::config(path.clone(), "key must be an AU id"))?;
        let i = lookup(a, path.clone())?;
        for &b in list {
            let j = lookup(b, path.clone())?;
            if i == j {
                warnings.push(format!("AU{a} lists itself as a neighbour; dropped"));
            } else {
                directed.set(i, j, 1.0);
            }
        }
    }
    let ids = catalog.au_ids();
    for i in 0..n {
        for j in 0..i {
            if directed.get(i, j) != directed.get(j, i) {
                let (from, to) = if directed.get(i, j) != 0.0 { (i, j) } else { (j, i) };
                warnings.push(format!(
                    "AU{} lists AU{} but not the reverse; made symmetric",
                    ids[from], ids[to]
                ));
                directed.set(i, j, 1.0);
                directed.set(j, i, 1.0);
            }
        }
    }
    for (i, j) in undirected {
        if i == j {
            warnings.push(format!("self pair (AU{0}, AU{0}) dropped", ids[i]));
            continue;
        }
        directed.set(i, j, 1.0);
        directed.set(j, i, 1.0);
    }
    for w in &warnings {
        log::warn!("adjacency prior: {w}");
    }
    Ok((directed, warnings))
}

/// Data-driven attention prior and the rows that fell back to uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct Cooccurrence {
    pub d: AuMatrix,
    /// Rows with no observed co-occurrence mass on A's support.
    pub fallback: Vec<usize>,
}

/// `D_ij = count(i ∧ j) / count(i)` on A's support, rows renormalized.
///
/// Rows without mass (AU never seen, or never seen together with any
/// neighbour) become uniform over A's neighbours. Isolated nodes get an
/// all-zero row.
pub fn compute_cooccurrence(labels: &[AuSet], adjacency: &AuMatrix) -> Result<Cooccurrence> {
    if labels.is_empty() {
        return Err(Error::contract("co-occurrence needs at least one label vector"));
    }
    let n = adjacency.n();
    let mut count = vec![0usize; n];
    let mut joint = vec![0usize; n * n];
    for s in labels {
        for i in (0..n).filter(|&i| s.contains(i)) {
            count[i] += 1;
            for j in (0..n).filter(|&j| j != i && s.contains(j)) {
                joint[i * n + j] += 1;
            }
        }
    }
    let raw = AuMatrix::from_fn(n, |i, j| {
        if i == j || adjacency.get(i, j) == 0.0 || count[i] == 0 {
            0.0
        } else {
            joint[i * n + j] as f64 / count[i] as f64
        }
    });
    let (d, fallback) = normalize_on_support(&raw, adjacency);
    Ok(Cooccurrence { d, fallback })
}

/// Restricts `raw` to `support`, renormalizes every row, and falls back to
/// uniform-over-support for rows that carry no mass. Returns the fallback rows.
fn normalize_on_support(raw: &AuMatrix, support: &AuMatrix) -> (AuMatrix, Vec<usize>) {
    let n = support.n();
    let mut d = AuMatrix::zeros(n);
    let mut fallback = Vec::new();
    for i in 0..n {
        let nb = support.neighbours(i);
        if nb.is_empty() {
            continue;
        }
        let mass: f64 = nb.iter().map(|&j| raw.get(i, j)).sum();
        if mass > 0.0 {
            for &j in &nb {
                d.set(i, j, raw.get(i, j) / mass);
            }
        } else {
            fallback.push(i);
            for &j in &nb {
                d.set(i, j, 1.0 / nb.len() as f64);
            }
        }
    }
    (d, fallback)
}

/// Psychological adjacency A, data prior D and node regions.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorPack {
    adjacency: AuMatrix,
    attention: AuMatrix,
    regions: Vec<Region>,
}

impl PriorPack {
    /// Validates and assembles a pack.
    pub fn new(adjacency: AuMatrix, attention: AuMatrix, regions: Vec<Region>) -> Result<Self> {
        let n = adjacency.n();
        if attention.n() != n || regions.len() != n {
            return Err(Error::contract(format!(
                "prior sizes disagree: A {n}, D {}, regions {}",
                attention.n(),
                regions.len()
            )));
        }
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(Error::contract(format!("A has a self loop at node {i}")));
            }
            for j in 0..n {
                let a = adjacency.get(i, j);
                if a != 0.0 && a != 1.0 {
                    return Err(Error::contract(format!("A[{i},{j}] = {a} is not binary")));
                }
                let dv = attention.get(i, j);
                if dv < 0.0 || !dv.is_finite() {
                    return Err(Error::contract(format!("D[{i},{j}] = {dv} is not a probability")));
                }
                if a == 0.0 && dv != 0.0 {
                    return Err(Error::contract(format!(
                        "D[{i},{j}] = {dv} lies outside the support of A"
                    )));
                }
            }
            let sum: f64 = attention.row(i).iter().sum();
            let expect = if adjacency.degree(i) == 0 { 0.0 } else { 1.0 };
            if (sum - expect).abs() > ROW_SUM_TOL {
                return Err(Error::contract(format!("D row {i} sums to {sum}, expected {expect}")));
            }
        }
        if !adjacency.is_symmetric() {
            return Err(Error::contract("A is not symmetric"));
        }
        Ok(Self {
            adjacency,
            attention,
            regions,
        })
    }

    /// Pack whose D is uniform over each node's neighbours.
    pub fn uniform(adjacency: AuMatrix, regions: Vec<Region>) -> Result<Self> {
        let (d, _) = normalize_on_support(&AuMatrix::zeros(adjacency.n()), &adjacency);
        Self::new(adjacency, d, regions)
    }

    /// Pack with D estimated from label co-occurrence.
    pub fn from_labels(adjacency: AuMatrix, regions: Vec<Region>, labels: &[AuSet]) -> Result<(Self, Vec<usize>)> {
        let co = compute_cooccurrence(labels, &adjacency)?;
        Ok((Self::new(adjacency, co.d, regions)?, co.fallback))
    }

    pub fn adjacency(&self) -> &AuMatrix {
        &self.adjacency
    }

    pub fn attention(&self) -> &AuMatrix {
        &self.attention
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    /// Nodes with no neighbour.
    pub fn isolated(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.adjacency.degree(i) == 0).collect()
    }

    /// Sub-pack on `nodes` with D renormalized over the surviving support.
    pub fn restrict(&self, nodes: &[usize]) -> Self {
        let adjacency = self.adjacency.submatrix(nodes);
        let raw = self.attention.submatrix(nodes);
        let (attention, _) = normalize_on_support(&raw, &adjacency);
        Self {
            adjacency,
            attention,
            regions: nodes.iter().map(|&i| self.regions[i]).collect(),
        }
    }

    /// Sub-pack for one facial region.
    pub fn region_block(&self, region: Region) -> Self {
        let nodes: Vec<usize> = (0..self.n()).filter(|&i| self.regions[i] == region).collect();
        self.restrict(&nodes)
    }
}

/// A pack whose same-region edges have been removed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPack {
    pub pack: PriorPack,
    /// Nodes left without any neighbour by the masking.
    pub orphaned: Vec<usize>,
}

/// Zeroes every same-region entry of A, re-masks D and renormalizes its rows.
pub fn mask_intra_region(pack: &PriorPack) -> MaskedPack {
    let n = pack.n();
    let r = &pack.regions;
    let adjacency = AuMatrix::from_fn(n, |i, j| {
        if r[i] == r[j] {
            0.0
        } else {
            pack.adjacency.get(i, j)
        }
    });
    let (attention, _) = normalize_on_support(&pack.attention, &adjacency);
    let orphaned = (0..n)
        .filter(|&i| adjacency.degree(i) == 0 && pack.adjacency.degree(i) > 0)
        .collect();
    MaskedPack {
        pack: PriorPack {
            adjacency,
            attention,
            regions: r.clone(),
        },
        orphaned,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaKind {
    Constant,
    Linear,
    Cosine,
}

/// Weight of D in the attention mixture as a function of training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub kind: BetaKind,
    pub start: f64,
    pub end: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            kind: BetaKind::Linear,
            start: 0.5,
            end: 0.0,
        }
    }
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            kind: BetaKind::Constant,
            start: beta,
            end: beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("beta.{name}"), format!("{v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// β at step `t` of `horizon`; steps past the horizon clamp to the end value.
    pub fn value(&self, t: usize, horizon: usize) -> f64 {
        if self.kind == BetaKind::Constant {
            return self.start;
        }
        if horizon == 0 || t >= horizon {
            return self.end;
        }
        let frac = t as f64 / horizon as f64;
        match self.kind {
            BetaKind::Linear => self.start + (self.end - self.start) * frac,
            BetaKind::Cosine => self.end + (self.start - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            BetaKind::Constant => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn au_regions() -> Vec<Region> {
        AuCatalog::standard().regions()
    }

    fn pairs(p: &[[u32; 2]]) -> AdjacencyConfig {
        AdjacencyConfig {
            pairs: p.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn coordinated_pair_is_symmetric() {
        let cat = AuCatalog::standard();
        let (a, w) = load_adjacency(&pairs(&[[6, 12]]), &cat).unwrap();
        let (i6, i12) = (cat.index_of(6).unwrap(), cat.index_of(12).unwrap());
        assert_eq!(a.get(i6, i12), 1.0);
        assert_eq!(a.get(i12, i6), 1.0);
        assert_eq!(a.data().iter().sum::<f64>(), 2.0);
        assert!(w.is_empty());
    }

    #[test]
    fn empty_pairs_give_zero_matrix() {
        let (a, _) = load_adjacency(&AdjacencyConfig::default(), &AuCatalog::standard()).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_au_is_a_config_error() {
        let err = load_adjacency(&pairs(&[[1, 2], [3, 4]]), &AuCatalog::standard()).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "adjacency.pairs[1]"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn one_sided_neighbours_are_mirrored_with_warning() {
        let cat = AuCatalog::standard();
        let cfg = AdjacencyConfig {
            neighbours: [("1".to_string(), vec![2, 1])].into_iter().collect(),
            ..Default::default()
        };
        let (a, w) = load_adjacency(&cfg, &cat).unwrap();
        assert!(a.is_symmetric());
        assert_eq!(a.get(1, 0), 1.0);
        assert_eq!(a.get(0, 0), 0.0);
        assert_eq!(w.len(), 2, "{w:?}");
    }

    #[test]
    fn cooccurrence_hand_count() {
        // Node 0 has neighbours {1, 2}; 0 and 1 always co-occur, 2 never joins.
        let mut a = AuMatrix::zeros(3);
        for (i, j) in [(0, 1), (0, 2)] {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        let labels = [AuSet::from_indices([0, 1]), AuSet::from_indices([0, 1]), AuSet::from_indices([2])];
        let co = compute_cooccurrence(&labels, &a).unwrap();
        assert_eq!(co.d.get(0, 1), 1.0);
        assert_eq!(co.d.get(0, 2), 0.0);
        assert_eq!(co.d.row(1), &[1.0, 0.0, 0.0]);
        // AU 2 occurs but never with its only neighbour.
        assert_eq!(co.fallback, vec![2]);
        assert_eq!(co.d.row(2), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_label_falls_back_to_uniform() {
        let a = AuMatrix::complete(4);
        let co = compute_cooccurrence(&[AuSet::from_indices([0])], &a).unwrap();
        for j in 1..4 {
            assert!((co.d.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(co.fallback, vec![0, 1, 2, 3]);
        assert!(compute_cooccurrence(&[], &a).is_err());
    }

    #[test]
    fn pack_validation() {
        let regions = vec![Region::Upper, Region::Lower];
        let a = AuMatrix::complete(2);
        assert!(PriorPack::new(a.clone(), AuMatrix::zeros(2), regions.clone()).is_err());
        let mut d = AuMatrix::complete(2);
        d.set(0, 0, 0.0);
        PriorPack::new(a, d.clone(), regions.clone()).unwrap();
        assert!(PriorPack::new(AuMatrix::zeros(2), d, regions).is_err());
    }

    #[test]
    fn upper_only_edges_vanish_under_masking() {
        let cat = AuCatalog::standard();
        let (a, _) = load_adjacency(&pairs(&[[1, 2], [4, 7], [5, 6]]), &cat).unwrap();
        let pack = PriorPack::uniform(a, au_regions()).unwrap();
        let m = mask_intra_region(&pack);
        assert!(m.pack.adjacency().data().iter().all(|&v| v == 0.0));
        assert_eq!(m.orphaned.len(), 6);
    }

    #[test]
    fn cross_region_edge_survives_masking() {
        let cat = AuCatalog::standard();
        let (a, _) = load_adjacency(&pairs(&[[4, 12], [1, 2]]), &cat).unwrap();
        let pack = PriorPack::uniform(a, au_regions()).unwrap();
        let m = mask_intra_region(&pack);
        let (i4, i12) = (cat.index_of(4).unwrap(), cat.index_of(12).unwrap());
        assert_eq!(m.pack.adjacency().get(i4, i12), 1.0);
        assert_eq!(m.pack.attention().get(i4, i12), 1.0);
        assert_eq!(m.pack.adjacency().get(0, 1), 0.0);
        assert_eq!(mask_intra_region(&m.pack).pack, m.pack);
    }

    #[test]
    fn restriction_renormalizes() {
        let a = AuMatrix::complete(3);
        let d = AuMatrix::from_fn(3, |i, j| match (i, j) {
            (0, 1) => 0.25,
            (0, 2) => 0.75,
            (1, 0) | (2, 0) => 1.0,
            _ => 0.0,
        });
        let pack = PriorPack::new(a, d, vec![Region::Upper; 3]).unwrap();
        let sub = pack.restrict(&[0, 1]);
        assert_eq!(sub.attention().row(0), &[0.0, 1.0]);
        let sub = pack.restrict(&[1, 2]);
        // Neither node kept any mass: uniform fallback over the surviving edge.
        assert_eq!(sub.attention().row(0), &[0.0, 1.0]);
        assert_eq!(sub.attention().row(1), &[1.0, 0.0]);
    }

    #[test]
    fn beta_linear_default() {
        let b = BetaSchedule::default();
        assert_eq!(b.value(0, 10), 0.5);
        assert_eq!(b.value(10, 10), 0.0);
        assert_eq!(b.value(5, 10), 0.25);
        assert_eq!(b.value(11, 10), 0.0);
        let mut last = 1.0;
        for t in 0..=40 {
            let v = b.value(t, 40);
            assert!(v <= last && (0.0..=1.0).contains(&v));
            last = v;
        }
    }

    #[test]
    fn beta_cosine_and_constant() {
        let c = BetaSchedule {
            kind: BetaKind::Cosine,
            start: 0.5,
            end: 0.0,
        };
        assert!((c.value(0, 8) - 0.5).abs() < 1e-15);
        assert!((c.value(4, 8) - 0.25).abs() < 1e-15);
        assert_eq!(c.value(8, 8), 0.0);
        assert_eq!(BetaSchedule::constant(0.3).value(99, 1), 0.3);
        assert!(BetaSchedule::constant(1.5).validate().is_err());
    }
}
