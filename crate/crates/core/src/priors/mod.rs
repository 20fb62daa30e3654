//! AU catalog, adjacency prior A, co-occurrence prior D and the β schedule.

pub mod catalog;
mod pack;

use serde::{Deserialize, Serialize};

pub use catalog::{AuCatalog, AuGroup, Region};
pub use pack::{
    compute_cooccurrence, load_adjacency, mask_intra_region, AdjacencyConfig, AuMatrix, AuSet, BetaKind,
    BetaSchedule, Cooccurrence, MaskedPack, PriorPack, ROW_SUM_TOL,
};

use crate::error::Result;

/// Text of the shipped default prior config (`config/priors.toml`).
pub const DEFAULT_PRIORS_TOML: &str = include_str!("../../../../config/priors.toml");

/// Contents of a prior config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub catalog: AuCatalog,
    #[serde(default)]
    pub adjacency: AdjacencyConfig,
    #[serde(default)]
    pub beta: BetaSchedule,
}

impl PriorConfig {
    /// The shipped default.
    pub fn standard() -> Self {
        Self::from_toml(DEFAULT_PRIORS_TOML).expect("shipped prior config is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = crate::config::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        self.beta.validate()?;
        load_adjacency(&self.adjacency, &self.catalog).map(|_| ())
    }

    /// The configured A with its load warnings.
    pub fn adjacency(&self) -> Result<(AuMatrix, Vec<String>)> {
        load_adjacency(&self.adjacency, &self.catalog)
    }
}

/// Which priors feed the attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorToggles {
    /// Use the configured A; otherwise every pair of distinct AUs is adjacent.
    pub psych: bool,
    /// Mix D into the attention; otherwise β is held at 0.
    pub data: bool,
}

impl Default for PriorToggles {
    fn default() -> Self {
        Self { psych: true, data: true }
    }
}

impl PriorToggles {
    /// The four ablation settings: both, psych only, data only, neither.
    pub const ABLATIONS: [(&'static str, PriorToggles); 4] = [
        ("both", PriorToggles { psych: true, data: true }),
        ("psych-only", PriorToggles { psych: true, data: false }),
        ("data-only", PriorToggles { psych: false, data: true }),
        ("neither", PriorToggles { psych: false, data: false }),
    ];
}

/// Builds the full prior pack for a client's training labels.
///
/// Returns the pack and the D rows that fell back to uniform.
pub fn build_pack(cfg: &PriorConfig, toggles: PriorToggles, labels: &[AuSet]) -> Result<(PriorPack, Vec<usize>)> {
    let regions = cfg.catalog.regions();
    let adjacency = if toggles.psych {
        cfg.adjacency()?.0
    } else {
        AuMatrix::complete(cfg.catalog.au_count())
    };
    if toggles.data {
        PriorPack::from_labels(adjacency, regions, labels)
    } else {
        Ok((PriorPack::uniform(adjacency, regions)?, Vec::new()))
    }
}
