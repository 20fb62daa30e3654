use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layout::RoiLayout;
use crate::error::{Error, Result};
use crate::nn::{PATCH, TOKEN};
use crate::priors::{AuCatalog, AuMatrix, AuSet, Region};
use crate::seed;

/// Values per ROI: u, v and strain planes.
const ROI_VALUES: usize = TOKEN;

/// AU pattern of one emotion class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prototype {
    pub name: String,
    pub aus: Vec<u32>,
    /// Allows a prototype confined to one facial region.
    #[serde(default)]
    pub single_region: bool,
}

impl Prototype {
    fn new(name: &str, aus: &[u32], single_region: bool) -> Self {
        Self {
            name: name.to_owned(),
            aus: aus.to_vec(),
            single_region,
        }
    }

    /// Negative / positive / surprise.
    pub fn three_class() -> Vec<Self> {
        vec![
            Self::new("negative", &[4, 7, 15, 17], false),
            Self::new("positive", &[6, 12], false),
            Self::new("surprise", &[1, 2, 5], true),
        ]
    }

    pub fn seven_class() -> Vec<Self> {
        vec![
            Self::new("happiness", &[6, 12], false),
            Self::new("surprise", &[1, 2, 5], true),
            Self::new("disgust", &[4, 9, 10, 15], false),
            Self::new("sadness", &[1, 4, 15, 17], false),
            Self::new("anger", &[4, 5, 7, 17], false),
            Self::new("fear", &[1, 2, 4, 5], true),
            Self::new("contempt", &[12, 14], true),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    /// One per class, in class-id order.
    pub prototypes: Vec<Prototype>,
    /// Independent flip probability of every AU bit.
    pub flip: f64,
    /// Std of the Gaussian noise on every flow pixel.
    pub noise: f64,
    pub subjects: usize,
    /// Inclusive range, drawn uniformly per subject.
    pub samples_per_subject: [usize; 2],
    /// Scale of each subject's class-logit tilt.
    pub subject_bias: f64,
    /// Std of each subject's constant flow offset.
    pub flow_bias: f64,
    /// Inclusive range of AU intensities.
    pub intensity: [f64; 2],
    /// Flow gain in a group's secondary ROIs.
    pub secondary_gain: f64,
    /// Side of the global flow map.
    pub of_side: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            prototypes: Prototype::three_class(),
            flip: 0.05,
            noise: 0.3,
            subjects: 30,
            samples_per_subject: [15, 25],
            subject_bias: 0.5,
            flow_bias: 0.1,
            intensity: [0.5, 1.0],
            secondary_gain: 0.3,
            of_side: 32,
        }
    }
}

impl GeneratorSpec {
    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Checks the spec against the catalog and the adjacency prior.
    pub fn validate(&self, catalog: &AuCatalog, adjacency: &AuMatrix) -> Result<()> {
        let path = |f: &str| format!("generator.{f}");
        if self.prototypes.is_empty() {
            return Err(Error::config(path("prototypes"), "need at least one class"));
        }
        for (c, p) in self.prototypes.iter().enumerate() {
            let at = path(&format!("prototypes[{c}]"));
            let nodes = prototype_nodes(p, catalog).map_err(|m| Error::config(&at, m))?;
            let regions: Vec<Region> = nodes.iter().map(|&n| catalog.region_of(n)).collect();
            let both = regions.contains(&Region::Upper) && regions.contains(&Region::Lower);
            if !both && !p.single_region {
                return Err(Error::config(
                    &at,
                    "activates one region only; set single_region to allow it",
                ));
            }
            if !connected(&nodes, adjacency) {
                return Err(Error::config(at, "AUs are not connected in the adjacency prior"));
            }
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let non_neg = |v: f64| v.is_finite() && v >= 0.0;
        if !unit(self.flip) {
            return Err(Error::config(path("flip"), format!("{} is not a probability", self.flip)));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("subject_bias", self.subject_bias),
            ("flow_bias", self.flow_bias),
        ] {
            if !non_neg(v) {
                return Err(Error::config(path(name), format!("{v} must be finite and non-negative")));
            }
        }
        if !unit(self.secondary_gain) {
            return Err(Error::config(path("secondary_gain"), "must lie in [0, 1]"));
        }
        if self.subjects == 0 {
            return Err(Error::config(path("subjects"), "must be positive"));
        }
        let [lo, hi] = self.samples_per_subject;
        if lo == 0 || lo > hi {
            return Err(Error::config(path("samples_per_subject"), format!("bad range [{lo}, {hi}]")));
        }
        let [a, b] = self.intensity;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::config(path("intensity"), format!("bad range [{a}, {b}]")));
        }
        if self.of_side < PATCH {
            return Err(Error::config(path("of_side"), format!("must be at least {PATCH}")));
        }
        Ok(())
    }
}

fn prototype_nodes(p: &Prototype, catalog: &AuCatalog) -> std::result::Result<Vec<usize>, String> {
    if p.aus.is_empty() {
        return Err("prototype has no AUs".into());
    }
    let mut nodes = Vec::with_capacity(p.aus.len());
    for &au in &p.aus {
        let n = catalog.index_of(au).ok_or_else(|| format!("AU{au} is not in the catalog"))?;
        if nodes.contains(&n) {
            return Err(format!("AU{au} listed twice"));
        }
        nodes.push(n);
    }
    Ok(nodes)
}

fn connected(nodes: &[usize], a: &AuMatrix) -> bool {
    let mut seen = vec![nodes[0]];
    let mut frontier = vec![nodes[0]];
    while let Some(i) = frontier.pop() {
        for &j in nodes {
            if !seen.contains(&j) && a.get(i, j) != 0.0 {
                seen.push(j);
                frontier.push(j);
            }
        }
    }
    seen.len() == nodes.len()
}

/// One synthetic clip reduced to its apex flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `K × 3 × 5 × 5`: u, v, strain per ROI.
    pub rois: Vec<f64>,
    /// `3 × S × S`.
    pub flow: Vec<f64>,
    /// Active AUs by catalog node index.
    pub aus: AuSet,
    pub emotion: usize,
    pub subject: usize,
}

/// Per-AU motion template.
#[derive(Clone, Debug)]
struct AuShape {
    dir: [f64; 2],
    bump: [f64; PATCH * PATCH],
}

/// Deterministic sample source for one spec and seed.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    layout: RoiLayout,
    seed: u64,
    prototypes: Vec<AuSet>,
    au_count: usize,
    shapes: Vec<AuShape>,
    /// `[node][roi]` flow gain.
    gains: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, layout: &RoiLayout, catalog: &AuCatalog, adjacency: &AuMatrix, seed: u64) -> Result<Self> {
        catalog.validate()?;
        if layout.len() != catalog.roi_count {
            return Err(Error::contract(format!(
                "layout has {} ROIs, catalog {}",
                layout.len(),
                catalog.roi_count
            )));
        }
        spec.validate(catalog, adjacency)?;
        let prototypes = spec
            .prototypes
            .iter()
            .map(|p| AuSet::from_indices(prototype_nodes(p, catalog).expect("validated")))
            .collect();

        let mut rng = seed::rng(seed, "au-shapes");
        let mut shapes = Vec::with_capacity(catalog.au_count());
        for group in &catalog.groups {
            let phase = rng.random_range(0.0..2.0 * PI);
            let k = group.aus.len() as f64;
            for j in 0..group.aus.len() {
                let angle = phase + 2.0 * PI * j as f64 / k + rng.random_range(-0.2..0.2);
                let cy = rng.random_range(1.0..3.0);
                let cx = rng.random_range(1.0..3.0);
                let mut bump = [0.0; PATCH * PATCH];
                for (i, b) in bump.iter_mut().enumerate() {
                    let (y, x) = ((i / PATCH) as f64, (i % PATCH) as f64);
                    *b = (-((y - cy).powi(2) + (x - cx).powi(2)) / 2.0).exp();
                }
                shapes.push(AuShape {
                    dir: [angle.cos(), angle.sin()],
                    bump,
                });
            }
        }

        let mut gains = Vec::with_capacity(catalog.au_count());
        for group in &catalog.groups {
            let mut g = vec![0.0; catalog.roi_count];
            for &r in &group.secondary {
                g[r] = spec.secondary_gain;
            }
            for &r in &group.primary {
                g[r] = 1.0;
            }
            for _ in &group.aus {
                gains.push(g.clone());
            }
        }

        Ok(Self {
            spec: spec.clone(),
            layout: layout.clone(),
            seed,
            prototypes,
            au_count: catalog.au_count(),
            shapes,
            gains,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn roi_count(&self) -> usize {
        self.layout.len()
    }

    pub fn au_count(&self) -> usize {
        self.au_count
    }

    pub fn prototype(&self, class: usize) -> AuSet {
        self.prototypes[class]
    }

    /// Samples of one subject, produced lazily from the subject's own stream.
    pub fn subject(&self, subject: usize) -> impl Iterator<Item = Sample> + '_ {
        let mut rng = seed::rng_at(self.seed, "subject", subject as u64);
        let [lo, hi] = self.spec.samples_per_subject;
        let count = rng.random_range(lo..=hi);
        let classes = self.spec.classes();
        let logits: Vec<f64> = (0..classes)
            .map(|_| self.spec.subject_bias * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let bias = [
            self.spec.flow_bias * rng.sample::<f64, _>(StandardNormal),
            self.spec.flow_bias * rng.sample::<f64, _>(StandardNormal),
        ];
        (0..count).map(move |_| {
            let emotion = pick(&weights, &mut rng);
            self.render(emotion, subject, bias, &mut rng)
        })
    }

    /// All samples in subject order.
    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.spec.subjects).flat_map(move |s| self.subject(s))
    }

    fn draw_aus(&self, emotion: usize, rng: &mut ChaCha8Rng) -> AuSet {
        let proto = self.prototypes[emotion];
        loop {
            let mut set = AuSet::default();
            for i in 0..self.au_count {
                let flipped = rng.random::<f64>() < self.spec.flip;
                if proto.contains(i) != flipped {
                    set.insert(i);
                }
            }
            if !set.is_empty() {
                return set;
            }
        }
    }

    fn render(&self, emotion: usize, subject: usize, bias: [f64; 2], rng: &mut ChaCha8Rng) -> Sample {
        let aus = self.draw_aus(emotion, rng);
        let k = self.roi_count();
        let plane = PATCH * PATCH;
        let mut rois = vec![0.0; k * ROI_VALUES];
        let [lo, hi] = self.spec.intensity;
        for m in (0..self.au_count).filter(|&m| aus.contains(m)) {
            let a = rng.random_range(lo..=hi);
            let shape = &self.shapes[m];
            for (r, &gain) in self.gains[m].iter().enumerate() {
                if gain == 0.0 {
                    continue;
                }
                let patch = &mut rois[r * ROI_VALUES..r * ROI_VALUES + 2 * plane];
                for (c, d) in shape.dir.iter().enumerate() {
                    for (p, b) in patch[c * plane..(c + 1) * plane].iter_mut().zip(&shape.bump) {
                        *p += gain * a * d * b;
                    }
                }
            }
        }
        let noise = Normal::new(0.0, self.spec.noise).expect("validated noise");
        for r in 0..k {
            let patch = &mut rois[r * ROI_VALUES..(r + 1) * ROI_VALUES];
            for c in 0..2 {
                for p in &mut patch[c * plane..(c + 1) * plane] {
                    *p += bias[c] + noise.sample(rng);
                }
            }
            let (uv, strain_plane) = patch.split_at_mut(2 * plane);
            strain(&uv[..plane], &uv[plane..], PATCH, strain_plane);
        }
        let flow = self.splat(&rois);
        Sample {
            rois,
            flow,
            aus,
            emotion,
            subject,
        }
    }

    /// Adds every ROI's u/v patch onto the global map at its landmark and
    /// derives the strain plane from the result.
    fn splat(&self, rois: &[f64]) -> Vec<f64> {
        let s = self.spec.of_side;
        let plane = PATCH * PATCH;
        let mut flow = vec![0.0; 3 * s * s];
        let half = (PATCH / 2) as isize;
        for (r, lm) in self.layout.landmarks.iter().enumerate() {
            let cx = (lm.pos[0] * (s - 1) as f64).round() as isize;
            let cy = (lm.pos[1] * (s - 1) as f64).round() as isize;
            for c in 0..2 {
                let src = &rois[r * ROI_VALUES + c * plane..r * ROI_VALUES + (c + 1) * plane];
                for (i, &v) in src.iter().enumerate() {
                    let y = cy + (i / PATCH) as isize - half;
                    let x = cx + (i % PATCH) as isize - half;
                    if (0..s as isize).contains(&y) && (0..s as isize).contains(&x) {
                        flow[c * s * s + y as usize * s + x as usize] += v;
                    }
                }
            }
        }
        let (uv, strain_plane) = flow.split_at_mut(2 * s * s);
        strain(&uv[..s * s], &uv[s * s..], s, strain_plane);
        flow
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

/// Derivative along one axis: central inside, one-sided at the borders.
fn diff(f: &[f64], side: usize, y: usize, x: usize, along_x: bool) -> f64 {
    let at = |y: usize, x: usize| f[y * side + x];
    let i = if along_x { x } else { y };
    let step = |j: usize| if along_x { at(y, j) } else { at(j, x) };
    if side < 2 {
        0.0
    } else if i == 0 {
        step(1) - step(0)
    } else if i == side - 1 {
        step(i) - step(i - 1)
    } else {
        (step(i + 1) - step(i - 1)) / 2.0
    }
}

/// `sqrt(u_x² + u_y² + v_x² + v_y²)` on a square grid.
pub fn strain(u: &[f64], v: &[f64], side: usize, out: &mut [f64]) {
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for f in [u, v] {
                acc += diff(f, side, y, x, true).powi(2) + diff(f, side, y, x, false).powi(2);
            }
            out[y * side + x] = acc.sqrt();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::PriorConfig;

    fn standard() -> (RoiLayout, AuCatalog, AuMatrix) {
        let cfg = PriorConfig::standard();
        (RoiLayout::standard(), cfg.catalog.clone(), cfg.adjacency().unwrap().0)
    }

    #[test]
    fn strain_of_linear_field() {
        // u = 2x, v = -y: gradient magnitude sqrt(4 + 1) everywhere.
        let side = 4;
        let u: Vec<f64> = (0..16).map(|i| 2.0 * (i % side) as f64).collect();
        let v: Vec<f64> = (0..16).map(|i| -((i / side) as f64)).collect();
        let mut out = vec![0.0; 16];
        strain(&u, &v, side, &mut out);
        assert!(out.iter().all(|s| (s - 5f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn default_prototypes_validate() {
        let (layout, catalog, a) = standard();
        for protos in [Prototype::three_class(), Prototype::seven_class()] {
            let spec = GeneratorSpec {
                prototypes: protos,
                ..Default::default()
            };
            Generator::new(&spec, &layout, &catalog, &a, 0).unwrap();
        }
    }

    #[test]
    fn prototype_rules() {
        let (_, catalog, a) = standard();
        let with = |p: Prototype| GeneratorSpec {
            prototypes: vec![p],
            ..Default::default()
        };
        let err = |spec: GeneratorSpec| match spec.validate(&catalog, &a) {
            Err(Error::Config { path, message }) => (path, message),
            other => panic!("{other:?}"),
        };
        let (path, msg) = err(with(Prototype::new("x", &[1, 2], false)));
        assert_eq!(path, "generator.prototypes[0]");
        assert!(msg.contains("single_region"));
        // 4 and 12 share no edge.
        let (_, msg) = err(with(Prototype::new("x", &[4, 12], false)));
        assert!(msg.contains("connected"));
        let (_, msg) = err(with(Prototype::new("x", &[3], true)));
        assert!(msg.contains("AU3"));
        let bad = GeneratorSpec {
            flip: 1.5,
            ..Default::default()
        };
        assert_eq!(err(bad).0, "generator.flip");
    }

    #[test]
    fn zero_noise_single_au_stays_in_its_rois() {
        let (layout, catalog, a) = standard();
        let spec = GeneratorSpec {
            prototypes: vec![Prototype::new("brow", &[1], true)],
            flip: 0.0,
            noise: 0.0,
            flow_bias: 0.0,
            subjects: 1,
            samples_per_subject: [3, 3],
            ..Default::default()
        };
        let generator = Generator::new(&spec, &layout, &catalog, &a, 3).unwrap();
        let group = &catalog.groups[0];
        for s in generator.samples() {
            assert_eq!(s.aus, AuSet::from_indices([0]));
            let energy = |r: usize| -> f64 { s.rois[r * ROI_VALUES..(r + 1) * ROI_VALUES].iter().map(|v| v * v).sum() };
            let primary: f64 = group.primary.iter().map(|&r| energy(r)).sum::<f64>() / group.primary.len() as f64;
            let secondary: f64 = group.secondary.iter().map(|&r| energy(r)).sum::<f64>() / group.secondary.len() as f64;
            assert!(primary > 5.0 * secondary && secondary > 0.0);
            for r in (0..65).filter(|r| !group.primary.contains(r) && !group.secondary.contains(r)) {
                assert_eq!(energy(r), 0.0, "roi {r}");
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (layout, catalog, a) = standard();
        let spec = GeneratorSpec {
            subjects: 3,
            of_side: 16,
            ..Default::default()
        };
        let run = |seed| -> Vec<Sample> { Generator::new(&spec, &layout, &catalog, &a, seed).unwrap().samples().collect() };
        let (x, y) = (run(5), run(5));
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(&y) {
            assert_eq!(p.rois.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.rois.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(p.flow.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.flow.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!((p.aus, p.emotion, p.subject), (q.aus, q.emotion, q.subject));
        }
        assert_ne!(run(6)[0].rois, x[0].rois);
    }

    #[test]
    fn subject_streams_are_independent_of_order() {
        let (layout, catalog, a) = standard();
        let spec = GeneratorSpec {
            subjects: 4,
            of_side: 8,
            ..Default::default()
        };
        let generator = Generator::new(&spec, &layout, &catalog, &a, 1).unwrap();
        let third: Vec<Sample> = generator.subject(2).collect();
        let all: Vec<Sample> = generator.samples().filter(|s| s.subject == 2).collect();
        assert_eq!(third, all);
    }
}
