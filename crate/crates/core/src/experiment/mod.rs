//! End-to-end experiments: synthetic data, per-client priors, federated
//! training over repeated splits, and the result files.

mod learner;
mod report;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use learner::{MerClient, MerLearner};
pub use report::{Report, StrategyRun};

use crate::data::{partition_clients, split_train_test, Dataset, Generator, GeneratorSpec, RoiLayout, Split};
use crate::error::{Error, Result};
use crate::fed::{FedConfig, Federation, RoundRecord, Strategy};
use crate::nn::{AfrPriors, ModelConfig};
use crate::priors::{build_pack, BetaSchedule, PriorConfig, PriorToggles};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSource {
    /// Prior config file; the shipped default when unset. Relative paths
    /// resolve against the experiment config's directory.
    pub path: Option<PathBuf>,
    pub psych: bool,
    pub data: bool,
}

impl Default for PriorSource {
    fn default() -> Self {
        Self {
            path: None,
            psych: true,
            data: true,
        }
    }
}

impl PriorSource {
    pub fn toggles(&self) -> PriorToggles {
        PriorToggles {
            psych: self.psych,
            data: self.data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub split_ratio: f64,
    pub splits: usize,
    pub precision: Precision,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            split_ratio: 0.7,
            splits: 10,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub strategies: Vec<Strategy>,
    pub out_dir: PathBuf,
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub priors: PriorSource,
    pub federation: FedConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 5,
            strategies: Strategy::ALL.to_vec(),
            out_dir: PathBuf::from("results"),
            generator: GeneratorSpec::default(),
            model: ModelConfig::default(),
            priors: PriorSource::default(),
            federation: FedConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        crate::config::parse_toml(text)
    }

    /// Reads a config file; a relative prior path is anchored at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg: Self = crate::config::parse_toml(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.priors.path, path.parent()) {
            if p.is_relative() {
                cfg.priors.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        match &self.priors.path {
            None => Ok(PriorConfig::standard()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config("priors.path", format!("{}: {e}", p.display())))?;
                PriorConfig::from_toml(&text)
            }
        }
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<PriorConfig> {
        let priors = self.prior_config()?;
        if self.clients == 0 {
            return Err(Error::config("clients", "must be positive"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "list at least one strategy"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::config(format!("strategies[{i}]"), format!("`{s}` listed twice")));
            }
            if *s == Strategy::PFedProx && self.clients == 1 && self.federation.theta < 1.0 {
                return Err(Error::config(format!("strategies[{i}]"), "pfedprox needs at least two clients"));
            }
        }
        self.federation.validate()?;
        self.model.validate()?;
        let layout = RoiLayout::standard();
        if priors.catalog.roi_count != layout.len() {
            return Err(Error::config(
                "priors.path",
                format!("catalog has {} ROIs, the layout {}", priors.catalog.roi_count, layout.len()),
            ));
        }
        let (adjacency, _) = priors.adjacency()?;
        self.generator.validate(&priors.catalog, &adjacency)?;
        if self.model.classes != self.generator.classes() {
            return Err(Error::config(
                "model.classes",
                format!("{} but the generator has {} prototypes", self.model.classes, self.generator.classes()),
            ));
        }
        if self.model.of_side != self.generator.of_side {
            return Err(Error::config(
                "model.of_side",
                format!("{} but the generator renders {}", self.model.of_side, self.generator.of_side),
            ));
        }
        if self.generator.subjects < self.clients {
            return Err(Error::config(
                "clients",
                format!("{} clients for {} subjects", self.clients, self.generator.subjects),
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if !(t.split_ratio > 0.0 && t.split_ratio < 1.0) {
            return Err(Error::config("training.split_ratio", format!("{} outside (0, 1)", t.split_ratio)));
        }
        if t.splits == 0 {
            return Err(Error::config("training.splits", "must be positive"));
        }
        Ok(priors)
    }
}

/// Generated and partitioned data with the per-client splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub priors: PriorConfig,
    pub clients: Vec<Arc<Dataset>>,
    /// `splits[client][repeat]`.
    pub splits: Vec<Vec<Split>>,
}

/// The full synthetic dataset of an experiment.
pub fn generate(cfg: &ExperimentConfig, priors: &PriorConfig) -> Result<Dataset> {
    let layout = RoiLayout::standard();
    let (adjacency, _) = priors.adjacency()?;
    let gen = Generator::new(&cfg.generator, &layout, &priors.catalog, &adjacency, seed::subseed(cfg.seed, "data"))?;
    Dataset::new(gen.roi_count(), cfg.generator.of_side, gen.au_count(), cfg.generator.classes(), gen.samples().collect())
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let priors = cfg.validate()?;
    let data = generate(cfg, &priors)?;
    let parts = partition_clients(&data, cfg.clients)?;
    let splits = parts
        .iter()
        .enumerate()
        .map(|(c, d)| {
            split_train_test(d, cfg.training.split_ratio, cfg.training.splits, seed::subseed_at(cfg.seed, "splits", c as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        priors,
        clients: parts.into_iter().map(Arc::new).collect(),
        splits,
    })
}

impl Prepared {
    /// Client data for split `repeat`, with D estimated from each client's
    /// own training labels.
    pub fn clients_for<T: Scalar>(&self, repeat: usize, toggles: PriorToggles) -> Result<Vec<MerClient<T>>> {
        self.clients
            .iter()
            .zip(&self.splits)
            .map(|(data, splits)| {
                let split = &splits[repeat];
                let labels: Vec<_> = split.train.iter().map(|&i| data.samples[i].aus).collect();
                let (pack, fallback) = build_pack(&self.priors, toggles, &labels)?;
                if !fallback.is_empty() {
                    log::debug!("uniform D rows for AU nodes {fallback:?}");
                }
                Ok(MerClient {
                    data: Arc::clone(data),
                    train: split.train.clone(),
                    test: split.test.clone(),
                    priors: AfrPriors::from_pack(&pack),
                })
            })
            .collect()
    }
}

/// The learner an experiment trains; β is held at 0 without the data prior.
pub fn learner<T: Scalar>(cfg: &ExperimentConfig, priors: &PriorConfig) -> Result<MerLearner<T>> {
    let beta = if cfg.priors.data { priors.beta } else { BetaSchedule::constant(0.0) };
    MerLearner::new(&cfg.model, &priors.catalog, cfg.training.batch_size, beta)
}

/// Seed of federated run `repeat`; shared by all strategies so that they
/// start from the same model.
pub fn run_seed(cfg: &ExperimentConfig, repeat: usize) -> u64 {
    seed::subseed_at(cfg.seed, "run", repeat as u64)
}

/// Trains every configured strategy on every split.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    let prepared = prepare(cfg)?;
    match cfg.training.precision {
        Precision::F64 => run_with::<f64>(cfg, &prepared),
        Precision::F32 => run_with::<f32>(cfg, &prepared),
    }
}

pub fn run_with<T: Scalar>(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Report> {
    let learner = learner::<T>(cfg, &prepared.priors)?;
    let mut runs = Vec::with_capacity(cfg.strategies.len());
    for &strategy in &cfg.strategies {
        let started = Instant::now();
        let mut splits: Vec<Vec<RoundRecord>> = Vec::with_capacity(cfg.training.splits);
        for repeat in 0..cfg.training.splits {
            let clients = prepared.clients_for::<T>(repeat, cfg.priors.toggles())?;
            let mut fed = Federation::new(&learner, &cfg.federation, strategy, clients, run_seed(cfg, repeat))?;
            let mut rounds = Vec::with_capacity(cfg.federation.rounds);
            for _ in 0..cfg.federation.rounds {
                let record = fed.round()?;
                let mean = record.clients.iter().map(|c| c.uf1).sum::<f64>() / record.clients.len() as f64;
                log::info!("{strategy} split {} round {}: mean UF1 {mean:.4}", repeat + 1, record.round);
                rounds.push(record);
            }
            splits.push(rounds);
        }
        runs.push(StrategyRun {
            strategy,
            splits,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Report {
        seed: cfg.seed,
        classes: cfg.model.classes,
        client_samples: prepared.clients.iter().map(|d| d.len()).collect(),
        stratified: prepared.splits.iter().map(|s| s.iter().map(|x| x.stratified).collect()).collect(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn schema_errors_name_the_field() {
        let path = |text: &str| match ExperimentConfig::from_toml(text).and_then(|c| c.validate().map(|_| ())) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("{other:?}"),
        };
        assert_eq!(path("[federation]\ntheta = 1.5\n"), "federation.theta");
        assert_eq!(path("[training]\nbatch = 4\n"), "training.batch");
        assert_eq!(path("strategies = [\"fedsgd\"]\n"), "strategies[0]");
        assert_eq!(path("[model]\nof_side = 16\n"), "model.of_side");
        assert_eq!(path("clients = 40\n"), "clients");
        assert_eq!(path("[priors]\npath = \"/nonexistent/priors.toml\"\n"), "priors.path");
    }
}
