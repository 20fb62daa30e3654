//! Layers of the recognition network and the plumbing shared by them.
//!
//! A layer is a small struct of parameter indices. Parameters live in a
//! [`ParamSet`]; batch-norm running statistics live in a second set of
//! buffers so that only trainable tensors see gradients and proximal terms.

mod afr;
mod dsi;
mod loss;
mod lrm;
mod model;

pub use afr::{Afe, Afr, AfrOutput, AfrPriors, DpkGat, GatLayer, GatOutput, GatPrior, Gse, GAT_SLOPE};
pub use dsi::{Dsi, Inception};
pub use loss::{au_loss, mer_loss, LossWeights};
pub use lrm::{Lfe, Sse, SseOutput, PATCH, TOKEN};
pub use model::{Batch, ForwardOutput, MerNet, ModelConfig, ModelState};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Epsilon of batch and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradient tracking.
    Train,
    /// Running statistics, no tracking.
    Eval,
}

/// Registers parameters and buffers while a network is being built.
pub struct Builder<'r, T: Scalar, R: Rng + ?Sized> {
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng + ?Sized> Builder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            params: ParamSet::new(),
            buffers: ParamSet::new(),
            rng,
        }
    }

    /// `U(−1/√fan_in, 1/√fan_in)` weights.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::<f64>::uniform(shape, -bound, bound, self.rng).cast();
        self.params.push(name, t)
    }

    /// Gaussian weights with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<usize> {
        let t = Tensor::<f64>::randn(shape, std, self.rng).cast();
        self.params.push(name, t)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<usize> {
        self.params.push(name, Tensor::full(shape, T::cst(value)))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<usize> {
        self.buffers.push(name, Tensor::full(shape, T::cst(value)))
    }
}

/// One forward pass: the graph plus the parameters it reads.
pub struct Fwd<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    params: &'a ParamSet<T>,
    buffers: &'a ParamSet<T>,
    mode: Mode,
    vars: Vec<Option<Var>>,
    bn_nodes: Vec<(usize, Var)>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamSet<T>, buffers: &'a ParamSet<T>, mode: Mode) -> Self {
        Self {
            g,
            params,
            buffers,
            mode,
            vars: vec![None; params.len()],
            bn_nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph node of parameter `idx`, created once per pass.
    pub fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = self.g.param(self.params, idx);
        self.vars[idx] = Some(v);
        v
    }

    pub fn param_value(&self, idx: usize) -> &Tensor<T> {
        self.params.tensor_at(idx)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Batch-norm nodes of a training pass with the buffer index of their
    /// running mean (the running variance sits right after it).
    pub fn bn_nodes(&self) -> &[(usize, Var)] {
        &self.bn_nodes
    }

    pub fn into_bn_nodes(self) -> Vec<(usize, Var)> {
        self.bn_nodes
    }
}

/// Folds the batch statistics of a training pass into the running buffers.
pub fn update_running_stats<T: Scalar>(buffers: &mut ParamSet<T>, g: &Graph<T>, nodes: &[(usize, Var)]) -> Result<()> {
    let m = T::cst(BN_MOMENTUM);
    for &(mean_idx, v) in nodes {
        let (bm, bv) = g
            .batch_stats(v)
            .ok_or_else(|| Error::contract("recorded node is not a batch-norm"))?;
        let count = g.value(v).len() / bm.len();
        // Running variance uses the unbiased batch estimate.
        let corr = if count > 1 {
            T::cst(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        let (bm, bv) = (bm.to_vec(), bv.to_vec());
        for (r, b) in buffers.tensor_at_mut(mean_idx).data_mut().iter_mut().zip(&bm) {
            *r = (T::one() - m) * *r + m * *b;
        }
        for (r, b) in buffers.tensor_at_mut(mean_idx + 1).data_mut().iter_mut().zip(&bv) {
            *r = (T::one() - m) * *r + m * *b * corr;
        }
    }
    Ok(())
}

/// Fully connected layer on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = bld.weight(&format!("{name}.w"), &[in_dim, out_dim], in_dim)?;
        let b = if bias {
            Some(bld.fill(&format!("{name}.b"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.b
    }

    /// `x: [..., in] → [..., out]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let shape = f.g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim("linear", format!("{shape:?} into width {}", self.in_dim)));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let x2 = if shape.len() == 2 { x } else { f.g.reshape(x, &[rows, self.in_dim])? };
        let w = f.p(self.w);
        let mut y = f.g.matmul(x2, w)?;
        if let Some(b) = self.b {
            let b = f.p(b);
            y = f.g.add_broadcast(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        f.g.reshape(y, &out_shape)
    }
}

/// Stride-1 square convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: usize,
    b: Option<usize>,
    pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = bld.weight(&format!("{name}.w"), &[out_ch, in_ch, k, k], in_ch * k * k)?;
        let b = if bias {
            Some(bld.fill(&format!("{name}.b"), &[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            pad: k / 2,
            in_ch,
            out_ch,
        })
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.g.conv2d(x, w, b, self.pad)
    }
}

/// Batch normalization over axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    running: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(bld: &mut Builder<'_, T, R>, name: &str, ch: usize) -> Result<Self> {
        let gamma = bld.fill(&format!("{name}.gamma"), &[ch], 1.0)?;
        let beta = bld.fill(&format!("{name}.beta"), &[ch], 0.0)?;
        let running = bld.buffer(&format!("{name}.running_mean"), &[ch], 0.0)?;
        bld.buffer(&format!("{name}.running_var"), &[ch], 1.0)?;
        Ok(Self { gamma, beta, running })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        let eps = T::cst(NORM_EPS);
        match f.mode {
            Mode::Train => {
                let y = f.g.batch_norm(x, gamma, beta, eps)?;
                f.bn_nodes.push((self.running, y));
                Ok(y)
            }
            Mode::Eval => {
                let mean = f.buffers.tensor_at(self.running).data();
                let var = f.buffers.tensor_at(self.running + 1).data();
                f.g.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(bld: &mut Builder<'_, T, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: bld.fill(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: bld.fill(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        f.g.layer_norm(x, gamma, beta, T::cst(NORM_EPS))
    }
}

/// Conv → batch-norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(bld, &format!("{name}.conv"), in_ch, out_ch, k, true)?,
            bn: BatchNorm::new(bld, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.g.relu(y)
    }
}

/// Mean over axis 1 of a rank-3 tensor: `[B, n, d] → [B, d]`.
pub fn mean_over_nodes<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let t = g.permute(x, &[0, 2, 1])?;
    g.mean_last(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bld = Builder::<f64, _>::new(&mut rng);
        let bn = BatchNorm::new(&mut bld, "bn", 1).unwrap();
        let (params, mut buffers) = (bld.params, bld.buffers);
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let snapshot = buffers.clone();
        let mut f = Fwd::new(&mut g, &params, &snapshot, Mode::Train);
        let xv = f.constant(x);
        bn.forward(&mut f, xv).unwrap();
        let nodes = f.into_bn_nodes();
        update_running_stats(&mut buffers, &g, &nodes).unwrap();
        // mean 3, unbiased variance 14/3
        assert!((buffers.tensor_at(0).data()[0] - 0.3).abs() < 1e-15);
        assert!((buffers.tensor_at(1).data()[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bld = Builder::<f64, _>::new(&mut rng);
        let bn = BatchNorm::new(&mut bld, "bn", 1).unwrap();
        let mut g = Graph::no_grad();
        let mut f = Fwd::new(&mut g, &bld.params, &bld.buffers, Mode::Eval);
        let xv = f.constant(Tensor::new(&[2, 1], vec![2.0, -1.0]).unwrap());
        let y = bn.forward(&mut f, xv).unwrap();
        let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert_eq!(g.value(y).data(), &[2.0 * scale, -scale]);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bld = Builder::<f64, _>::new(&mut rng);
        let lin = Linear::new(&mut bld, "fc", 4, 3, true).unwrap();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &bld.params, &bld.buffers, Mode::Train);
        let xv = f.constant(Tensor::ones(&[2, 5, 4]));
        let y = lin.forward(&mut f, xv).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 3]);
        let bad = g.constant(Tensor::ones(&[2, 3]));
        let mut f = Fwd::new(&mut g, &bld.params, &bld.buffers, Mode::Train);
        assert!(matches!(lin.forward(&mut f, bad), Err(Error::Dimension { op: "linear", .. })));
    }
}
