use aufed::data::{partition_clients, Dataset, Generator, GeneratorSpec, RoiLayout, Sample};
use aufed::fed::{FedConfig, Federation, LogisticData, LogisticLearner, Strategy};
use aufed::nn::PATCH;
use aufed::priors::{AuMatrix, PriorConfig};
use aufed::Tensor;

const PLANE: usize = PATCH * PATCH;
const ROI_VALUES: usize = 3 * PLANE;

fn generator(spec: &GeneratorSpec, seed: u64) -> (Generator, PriorConfig, AuMatrix) {
    let priors = PriorConfig::standard();
    let (a, _) = priors.adjacency().unwrap();
    let g = Generator::new(spec, &RoiLayout::standard(), &priors.catalog, &a, seed).unwrap();
    (g, priors, a)
}

/// `P(i ∧ j)` under the label model: independent bits that equal the class
/// prototype except for flips, redrawn while empty.
fn closed_form(proto: &[bool], flip: f64) -> Vec<Vec<f64>> {
    let p: Vec<f64> = proto.iter().map(|&on| if on { 1.0 - flip } else { flip }).collect();
    let nonempty = 1.0 - p.iter().map(|q| 1.0 - q).product::<f64>();
    let n = p.len();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { p[i] } else { p[i] * p[j] } / nonempty).collect())
        .collect()
}

#[test]
fn cooccurrence_matches_prototype_probabilities() {
    for (prototypes, flip) in [
        (aufed::data::Prototype::three_class(), 0.05),
        (aufed::data::Prototype::seven_class(), 0.2),
    ] {
        let spec = GeneratorSpec {
            prototypes,
            flip,
            subjects: 500,
            samples_per_subject: [20, 20],
            of_side: 8,
            ..Default::default()
        };
        let (g, priors, _) = generator(&spec, 3);
        let m = priors.catalog.au_count();
        let samples: Vec<Sample> = g.samples().collect();
        assert_eq!(samples.len(), 10_000);

        let mut counts = vec![0usize; spec.classes()];
        let mut empirical = vec![vec![0.0; m]; m];
        for s in &samples {
            counts[s.emotion] += 1;
            for i in 0..m {
                for j in 0..m {
                    if s.aus.contains(i) && s.aus.contains(j) {
                        empirical[i][j] += 1.0 / samples.len() as f64;
                    }
                }
            }
        }
        let mut expected = vec![vec![0.0; m]; m];
        for (c, &n) in counts.iter().enumerate() {
            let proto = g.prototype(c);
            let bits: Vec<bool> = (0..m).map(|i| proto.contains(i)).collect();
            let cf = closed_form(&bits, flip);
            for i in 0..m {
                for j in 0..m {
                    expected[i][j] += n as f64 / samples.len() as f64 * cf[i][j];
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                assert!(
                    (empirical[i][j] - expected[i][j]).abs() < 0.05,
                    "({i},{j}): {} vs {}",
                    empirical[i][j],
                    expected[i][j]
                );
            }
        }
    }
}

#[test]
fn at_least_one_active_au_per_sample() {
    let spec = GeneratorSpec {
        flip: 0.9,
        subjects: 5,
        of_side: 8,
        ..Default::default()
    };
    let (g, _, _) = generator(&spec, 1);
    assert!(g.samples().all(|s| !s.aus.is_empty()));
}

/// Per-ROI, per-channel flow energy.
fn energy(s: &Sample, rois: usize) -> Vec<f64> {
    (0..rois)
        .flat_map(|r| {
            (0..2).map(move |c| {
                let off = r * ROI_VALUES + c * PLANE;
                s.rois[off..off + PLANE].iter().map(|v| v * v).sum::<f64>()
            })
        })
        .collect()
}

#[test]
fn linear_probe_reads_au_labels_at_zero_noise() {
    let spec = GeneratorSpec {
        noise: 0.0,
        flow_bias: 0.0,
        flip: 0.05,
        subjects: 30,
        of_side: 8,
        ..Default::default()
    };
    let (g, priors, _) = generator(&spec, 5);
    let samples: Vec<Sample> = g.samples().collect();
    let k = g.roi_count();
    let n_train = samples.len() * 7 / 10;
    let features = |part: &[Sample]| {
        let x: Vec<f64> = part.iter().flat_map(|s| energy(s, k)).collect();
        Tensor::new(&[part.len(), 2 * k], x).unwrap()
    };
    let (train, test) = samples.split_at(n_train);
    let learner = LogisticLearner::new(2 * k, 2).unwrap();
    let cfg = FedConfig {
        rounds: 300,
        local_epochs: 1,
        lr: 0.05,
        momentum: 0.9,
        ..Default::default()
    };
    for au in 0..priors.catalog.au_count() {
        let label = |part: &[Sample]| part.iter().map(|s| s.aus.contains(au) as usize).collect::<Vec<_>>();
        let data = LogisticData {
            train_x: features(train),
            train_y: label(train),
            test_x: features(test),
            test_y: label(test),
        };
        let rounds = Federation::new(&learner, &cfg, Strategy::LocalOnly, vec![data], 0).unwrap().run().unwrap();
        let cm = &rounds.last().unwrap().clients[0].confusion;
        let acc = (cm.get(0, 0) + cm.get(1, 1)) as f64 / cm.total() as f64;
        assert!(acc > 0.9, "AU{}: accuracy {acc}", priors.catalog.au_ids()[au]);
    }
}

#[test]
fn inactive_rois_have_zero_mean_flow() {
    let spec = GeneratorSpec {
        noise: 0.5,
        flow_bias: 0.0,
        subjects: 60,
        of_side: 8,
        ..Default::default()
    };
    let (g, priors, _) = generator(&spec, 8);
    let samples: Vec<Sample> = g.samples().collect();
    let catalog = &priors.catalog;
    // Nodes whose flow reaches each ROI.
    let mut touching = vec![Vec::new(); catalog.roi_count];
    let mut node = 0;
    for group in &catalog.groups {
        for _ in &group.aus {
            for &r in group.primary.iter().chain(&group.secondary) {
                touching[r].push(node);
            }
            node += 1;
        }
    }
    let mut checked = 0;
    for (r, nodes) in touching.iter().enumerate() {
        for c in 0..2 {
            let (mut sum, mut n) = (0.0, 0usize);
            for s in samples.iter().filter(|s| nodes.iter().all(|&m| !s.aus.contains(m))) {
                let off = r * ROI_VALUES + c * PLANE;
                sum += s.rois[off..off + PLANE].iter().sum::<f64>();
                n += PLANE;
            }
            if n < 50 * PLANE {
                continue;
            }
            // Five standard errors of the noise mean.
            let tol = 5.0 * spec.noise / (n as f64).sqrt();
            assert!((sum / n as f64).abs() < tol, "roi {r} channel {c}: mean {}", sum / n as f64);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

/// Mean pairwise Euclidean distance between client class-frequency vectors.
fn heterogeneity(bias: f64, seed: u64) -> f64 {
    let spec = GeneratorSpec {
        subject_bias: bias,
        of_side: 8,
        ..Default::default()
    };
    let (g, priors, _) = generator(&spec, seed);
    let data = Dataset::new(g.roi_count(), 8, priors.catalog.au_count(), 3, g.samples().collect()).unwrap();
    let freqs: Vec<Vec<f64>> = partition_clients(&data, 5)
        .unwrap()
        .iter()
        .map(|d| d.class_counts().iter().map(|&c| c as f64 / d.len() as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..freqs.len() {
        for j in i + 1..freqs.len() {
            total += freqs[i].iter().zip(&freqs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[test]
fn heterogeneity_grows_with_subject_bias() {
    let scales = [0.0, 0.5, 1.0, 2.0, 4.0];
    let means: Vec<f64> = scales
        .iter()
        .map(|&b| (0..5).map(|seed| heterogeneity(b, seed)).sum::<f64>() / 5.0)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] > w[0], "{means:?}");
    }
}

#[test]
fn partition_keeps_subjects_whole() {
    let spec = GeneratorSpec {
        subjects: 12,
        of_side: 8,
        ..Default::default()
    };
    let (g, priors, _) = generator(&spec, 2);
    let data = Dataset::new(g.roi_count(), 8, priors.catalog.au_count(), 3, g.samples().collect()).unwrap();
    let parts = partition_clients(&data, 5).unwrap();
    assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), data.len());
    let subjects: Vec<Vec<usize>> = parts.iter().map(Dataset::subjects).collect();
    assert_eq!(subjects.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 2, 2, 2]);
    for i in 0..subjects.len() {
        for j in i + 1..subjects.len() {
            assert!(subjects[i].iter().all(|s| !subjects[j].contains(s)));
        }
    }
    let one = partition_clients(&data, 1).unwrap();
    assert_eq!(one[0].len(), data.len());
}
