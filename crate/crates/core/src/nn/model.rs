use rand::Rng;
use serde::{Deserialize, Serialize};

use super::afr::{Afr, AfrPriors};
use super::dsi::Dsi;
use super::loss::{au_loss, mer_loss, LossWeights};
use super::lrm::{Lfe, Sse, PATCH, TOKEN};
use super::{Builder, Fwd};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::priors::AuCatalog;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Network dimensions. Defaults are the full-size network; the experiment
/// configs under `config/` use smaller widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Emotion classes.
    pub classes: usize,
    /// Hidden channels of the first two LFE convolutions.
    pub lfe_channels: [usize; 2],
    pub sse_heads: usize,
    pub sse_ffn: usize,
    /// Hidden channels of the AFE 3×3 stage; unset doubles the stacked input.
    pub afe_hidden: Option<usize>,
    /// Per-head width of every GAT layer.
    pub gat_width: usize,
    pub gat_heads: usize,
    /// Channels per inception branch.
    pub inception_branch: usize,
    /// Side of the global flow map.
    pub of_side: usize,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            lfe_channels: [32, 64],
            sse_heads: 3,
            sse_ffn: 2 * TOKEN,
            afe_hidden: None,
            gat_width: 64,
            gat_heads: 3,
            inception_branch: 8,
            of_side: 32,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("lfe_channels[0]", self.lfe_channels[0]),
            ("lfe_channels[1]", self.lfe_channels[1]),
            ("sse_heads", self.sse_heads),
            ("sse_ffn", self.sse_ffn),
            ("gat_width", self.gat_width),
            ("gat_heads", self.gat_heads),
            ("inception_branch", self.inception_branch),
            ("of_side", self.of_side),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least two classes"));
        }
        if self.afe_hidden == Some(0) {
            return Err(Error::config("model.afe_hidden", "must be positive"));
        }
        if !TOKEN.is_multiple_of(self.sse_heads) {
            return Err(Error::config("model.sse_heads", format!("must divide {TOKEN}")));
        }
        self.loss.validate()
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f64> {
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn conforms(&self, other: &Self) -> bool {
        self.params.conforms(&other.params) && self.buffers.conforms(&other.buffers)
    }
}

/// A minibatch in network layout.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar = f64> {
    /// `[B, K, 3, 5, 5]`.
    pub rois: Tensor<T>,
    /// `[B, 3, S, S]`.
    pub flow: Tensor<T>,
    /// `B × M` AU targets in {0, 1}, row-major.
    pub aus: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub au_logits_afe: Var,
    pub au_logits_gat: Var,
    pub ce: Var,
    pub au_loss_afe: Var,
    pub au_loss_gat: Var,
    /// Weighted recognition loss.
    pub loss: Var,
    pub h_global: Var,
}

/// The full recognition network.
#[derive(Clone, Debug)]
pub struct MerNet {
    pub config: ModelConfig,
    rois: usize,
    aus: usize,
    lfe: Lfe,
    sse: Sse,
    afr: Afr,
    dsi: Dsi,
}

impl MerNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &ModelConfig,
        catalog: &AuCatalog,
        rng: &mut R,
    ) -> Result<(Self, ModelState<T>)> {
        config.validate()?;
        catalog.validate()?;
        let mut bld = Builder::new(rng);
        let lfe = Lfe::new(&mut bld, config.lfe_channels)?;
        let sse = Sse::new(&mut bld, catalog.roi_count, config.sse_heads, config.sse_ffn)?;
        let afr = Afr::new(&mut bld, catalog, config.afe_hidden, config.gat_width, config.gat_heads)?;
        let dsi = Dsi::new(
            &mut bld,
            [catalog.au_count(), afr.out_dim()],
            config.of_side,
            config.inception_branch,
            config.classes,
        )?;
        let net = Self {
            config: config.clone(),
            rois: catalog.roi_count,
            aus: catalog.au_count(),
            lfe,
            sse,
            afr,
            dsi,
        };
        Ok((
            net,
            ModelState {
                params: bld.params,
                buffers: bld.buffers,
            },
        ))
    }

    pub fn afr(&self) -> &Afr {
        &self.afr
    }

    pub fn au_count(&self) -> usize {
        self.aus
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<'_, T>,
        batch: &Batch<T>,
        priors: &AfrPriors<T>,
        beta: f64,
    ) -> Result<ForwardOutput> {
        let b = batch.len();
        let (k, s) = (self.rois, self.config.of_side);
        if batch.rois.shape() != [b, k, 3, PATCH, PATCH] {
            return Err(Error::dim("mer_net", format!("rois {:?} for batch of {b}", batch.rois.shape())));
        }
        if batch.flow.shape() != [b, 3, s, s] {
            return Err(Error::dim("mer_net", format!("flow {:?} for batch of {b}", batch.flow.shape())));
        }
        if batch.aus.len() != b * self.aus {
            return Err(Error::dim("mer_net", format!("{} AU targets for batch of {b}", batch.aus.len())));
        }
        let rois = f.constant(batch.rois.reshape(&[b * k, 3, PATCH, PATCH])?);
        let phi = self.lfe.forward(f, rois)?;
        let phi = f.g.reshape(phi, &[b, k, TOKEN])?;
        let z = self.sse.forward(f, phi)?.z;
        let afr = self.afr.forward(f, z, priors, beta)?;
        let flow = f.constant(batch.flow.clone());
        let logits = self.dsi.forward(f, afr.h_global, flow)?;

        let ce = f.g.cross_entropy(logits, &batch.labels)?;
        let au_loss_afe = au_loss(f.g, afr.au_logits_afe, &batch.aus)?;
        let au_loss_gat = au_loss(f.g, afr.au_logits_gat, &batch.aus)?;
        let loss = mer_loss(f.g, ce, au_loss_afe, au_loss_gat, &self.config.loss)?;
        Ok(ForwardOutput {
            logits,
            au_logits_afe: afr.au_logits_afe,
            au_logits_gat: afr.au_logits_gat,
            ce,
            au_loss_afe,
            au_loss_gat,
            loss,
            h_global: afr.h_global,
        })
    }
}
