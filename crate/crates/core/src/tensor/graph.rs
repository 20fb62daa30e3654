use super::kernels::{self, Window};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulRepeat(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        count: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        spatial: usize,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        spatial: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Elu(Var),
    CrossEntropy {
        x: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Bce {
        x: Var,
        targets: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    SquaredDistance {
        x: Var,
        anchor: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Permute {
        x: Var,
        source: Vec<usize>,
    },
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulRepeat(..) => "mul_repeat",
            Op::Affine(..) => "affine",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Elu(_) => "elu",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce_with_logits",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanLast(_) => "mean_last",
            Op::SquaredDistance { .. } => "squared_distance",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations in creation (hence topological) order.
///
/// A graph is single-use: build it for one forward pass, call
/// [`Graph::backward`] once or more, then drop it.
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    tracking: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients of a scalar loss.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shapes_of<T: Scalar>(ts: &[&Tensor<T>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" vs ")
}

impl<T: Scalar> Graph<T> {
    /// Graph with gradient tracking enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// Graph for inference only; [`Graph::backward`] will refuse to run.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let needs_grad = self.tracking && inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input that is not a parameter; its gradient is
    /// available through [`Graph::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op: Op::Leaf,
            needs_grad: self.tracking,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings parameter `index` of `params` into the graph.
    pub fn param(&mut self, params: &ParamSet<T>, index: usize) -> Var {
        let value = params.tensor_at(index).detached();
        self.nodes.push(Node {
            value,
            op: Op::Param(index),
            needs_grad: self.tracking,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let index = params
            .index_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        Ok(self.param(params, index))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, shapes_of(&[ta, tb])));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s; `b` repeats over the
    /// leading axes (bias rows, positional tables).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if !tx.shape().ends_with(tb.shape()) {
            return Err(Error::dim("add_broadcast", shapes_of(&[tx, tb])));
        }
        let n = tb.len();
        let bd = tb.data();
        let out = Tensor::from_parts(
            tx.shape().to_vec(),
            tx.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect(),
        );
        self.push(out, Op::AddBroadcast(x, b), &[x, b])
    }

    /// `x * w` where `w`'s shape is a prefix of `x`'s; each entry of `w`
    /// scales one contiguous trailing block (channel gates).
    pub fn mul_repeat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if !tx.shape().starts_with(tw.shape()) {
            return Err(Error::dim("mul_repeat", shapes_of(&[tx, tw])));
        }
        let k = tx.len() / tw.len();
        let wd = tw.data();
        let out = Tensor::from_parts(
            tx.shape().to_vec(),
            tx.data().iter().enumerate().map(|(i, &v)| v * wd[i / k]).collect(),
        );
        self.push(out, Op::MulRepeat(x, w), &[x, w])
    }

    /// `scale · x + shift`, with a constant `shift` broadcast like
    /// [`Graph::add_broadcast`].
    pub fn affine(&mut self, x: Var, scale: T, shift: Option<&Tensor<T>>) -> Result<Var> {
        let tx = self.value(x);
        let out = match shift {
            None => Tensor::from_parts(
                tx.shape().to_vec(),
                tx.data().iter().map(|&v| scale * v).collect(),
            ),
            Some(s) => {
                if !tx.shape().ends_with(s.shape()) {
                    return Err(Error::dim("affine", shapes_of(&[tx, s])));
                }
                let n = s.len();
                let sd = s.data();
                Tensor::from_parts(
                    tx.shape().to_vec(),
                    tx.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| scale * v + sd[i % n])
                        .collect(),
                )
            }
        };
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, None)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", shapes_of(&[ta, tb])));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Batched `[B,m,k] · [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3
            || tb.rank() != 3
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[2] != tb.shape()[1]
        {
            return Err(Error::dim("bmm", shapes_of(&[ta, tb])));
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b), &[a, b])
    }

    /// Stride-1 convolution of `x: [N,C,H,W]` with `w: [O,C,kh,kw]`, zero
    /// padding `pad` on every side, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::dim("conv2d", shapes_of(&[tx, tw])));
        }
        let (count, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", shapes_of(&[tx, tw])));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::dim("conv2d", shapes_of(&[tw, self.value(b)])));
            }
        }
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            pad,
        };
        let (oh, ow) = (win.out_h(), win.out_w());
        let plane = oh * ow;
        let mut out = vec![T::zero(); count * o * plane];
        for (start, len) in conv_chunks(count, win.col_rows() * plane) {
            let img = c * h * wd;
            let cols = kernels::im2col(&tx.data()[start * img..(start + len) * img], len, &win);
            let mut res = vec![T::zero(); o * len * plane];
            kernels::matmul_acc(tw.data(), &cols, &mut res, o, win.col_rows(), len * plane);
            // res is [O, len, plane]; output wants [len, O, plane]
            for oc in 0..o {
                for n in 0..len {
                    let src = &res[(oc * len + n) * plane..(oc * len + n + 1) * plane];
                    let dst = ((start + n) * o + oc) * plane;
                    out[dst..dst + plane].copy_from_slice(src);
                }
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += bd[(i / plane) % o];
            }
        }
        let value = Tensor::from_parts(vec![count, o, oh, ow], out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                win,
                count,
            },
            &inputs,
        )
    }

    /// Stride-1 max pooling over `k×k` windows with `pad` cells of `-∞`.
    pub fn max_pool2d(&mut self, x: Var, k: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || tx.shape()[2] + 2 * pad < k || tx.shape()[3] + 2 * pad < k {
            return Err(Error::dim("max_pool2d", shapes_of(&[tx])));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = tx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy + ky) as isize - pad as isize;
                            let xx = (ox + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let idx = base + y as usize * w + xx as usize;
                            if d[idx] > best || at == usize::MAX {
                                best = d[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.push(value, Op::MaxPool2d { x, argmax }, &[x])
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() < 2 || tg.shape() != [tx.shape()[1]] || tb.shape() != tg.shape() {
            return Err(Error::dim(op, shapes_of(&[tx, tg, tb])));
        }
        let n = tx.shape()[0];
        let c = tx.shape()[1];
        let spatial = tx.len() / (n * c);
        Ok((n, c, spatial))
    }

    /// Training-mode batch normalization over axis 1 of `x: [N,C,...]`
    /// using the batch's own statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c, spatial) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let count = T::from_usize(n * spatial).unwrap();
        let d = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for &v in &d[base..base + spatial] {
                    mean[ch] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for &v in &d[base..base + spatial] {
                    let dv = v - mean[ch];
                    var[ch] += dv * dv;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (xhat, out) = self.normalize_channels(x, gamma, beta, &mean, &inv_std, n, c, spatial);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                spatial,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, spatial) = self.channel_layout("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm_eval", format!("{c} channels vs running stats")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (xhat, out) = self.normalize_channels(x, gamma, beta, running_mean, &inv_std, n, c, spatial);
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
            },
            &[x, gamma, beta],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        spatial: usize,
    ) -> (Vec<T>, Tensor<T>) {
        let tx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut out = vec![T::zero(); tx.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let h = (tx.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        (xhat, Tensor::from_parts(tx.shape().to_vec(), out))
    }

    /// Batch mean and biased batch variance per channel of a
    /// [`Graph::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Normalizes the last axis of `x`, then applies `gamma`/`beta` of that
    /// axis's length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap_or(&1);
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", shapes_of(&[tx, tg, tb])));
        }
        let dn = T::from_usize(d).unwrap();
        let rows = tx.len() / d;
        let mut xhat = vec![T::zero(); tx.len()];
        let mut out = vec![T::zero(); tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true. `mask` holds `r × n` flags (`n` = last axis) and is applied to
    /// rows cyclically, so one `n×n` adjacency can mask a `[B,n,n]` batch.
    /// Masked entries come out as exactly zero; fully masked rows are zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or_else(|| Error::dim("softmax", "rank-0 input"))?;
        if let Some(m) = mask {
            if m.is_empty() || m.len() % n != 0 || !tx.len().is_multiple_of(m.len()) {
                return Err(Error::dim(
                    "softmax",
                    format!("mask of {} entries vs {:?}", m.len(), tx.shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); tx.len()];
        for (r, row) in tx.data().chunks(n).enumerate() {
            let allowed = |j: usize| match mask {
                None => true,
                Some(m) => m[(r * n + j) % m.len()],
            };
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    out[r * n + j] = e;
                    total += e;
                }
            }
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = self.map(x, |v| if v > T::zero() { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| if v > T::zero() { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits: [B,N]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tx = self.value(logits);
        if tx.rank() != 2 || tx.shape()[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{:?} vs {} labels", tx.shape(), labels.len()),
            ));
        }
        let (b, n) = (tx.shape()[0], tx.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::contract(format!("class label {bad} outside 0..{n}")));
        }
        let mut probs = vec![T::zero(); b * n];
        let mut loss = T::zero();
        for (r, row) in tx.data().chunks(n).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= T::from_usize(b).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x: logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets`,
    /// evaluated as `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let tx = self.value(logits);
        if tx.len() != targets.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{:?} vs {} targets", tx.shape(), targets.len()),
            ));
        }
        let total: T = tx
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::from_usize(targets.len()).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                x: logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / T::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::dim("mean_last", shapes_of(&[t])));
        }
        let n = *t.shape().last().unwrap();
        let nn = T::from_usize(n).unwrap();
        let data = t.data().chunks(n).map(|c| c.iter().copied().sum::<T>() / nn).collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MeanLast(x), &[x])
    }

    /// `‖x − anchor‖²` with a constant anchor.
    pub fn squared_distance(&mut self, x: Var, anchor: &Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != anchor.shape() {
            return Err(Error::dim("squared_distance", shapes_of(&[t, anchor])));
        }
        let s = t
            .data()
            .iter()
            .zip(anchor.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::scalar(s),
            Op::SquaredDistance {
                x,
                anchor: anchor.data().to_vec(),
            },
            &[x],
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                let ts: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
                return Err(Error::dim("concat", shapes_of(&ts)));
            }
            total_axis += s[axis];
        }
        let outer = numel(&base[..axis]);
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let inner = numel(&t.shape()[axis..]);
                out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!("{start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let outer = numel(&t.shape()[..axis]);
        let step = numel(&t.shape()[axis + 1..]);
        let full = t.shape()[axis] * step;
        let mut out = Vec::with_capacity(outer * len * step);
        for o in 0..outer {
            let from = o * full + start * step;
            out.extend_from_slice(&t.data()[from..from + len * step]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x])
    }

    /// Selects entries of axis 0 by index (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || indices.is_empty() || indices.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::dim(
                "gather",
                format!("{} indices into {:?}", indices.len(), t.shape()),
            ));
        }
        let row = numel(&t.shape()[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank()
            || axes.iter().any(|&a| a >= t.rank() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", format!("{axes:?} on {:?}", t.shape())));
        }
        let source = kernels::permute_index(t.shape(), axes);
        let data = source.iter().map(|&i| t.data()[i]).collect();
        let shape = axes.iter().map(|&a| t.shape()[a]).collect();
        self.push(Tensor::from_parts(shape, data), Op::Permute { x, source }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::dim("flatten", "rank-0 input"));
        }
        let shape = [t.shape()[0], t.len() / t.shape()[0]];
        self.reshape(x, &shape)
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.tracking {
            return Err(Error::contract("backward on a graph built without gradient tracking"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates d`loss`/dθ into the gradient slot of every parameter of
    /// `params` that entered this graph. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(p) = node.op {
                if p >= params.len() || params.tensor_at(p).shape() != node.value.shape() {
                    return Err(Error::contract(format!(
                        "graph parameter #{p} does not match the supplied parameter set"
                    )));
                }
                if let Some(g) = &grads.grads[id] {
                    params.tensor_at_mut(p).accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
            }
            Op::AddBroadcast(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            Op::MulRepeat(x, w) => {
                let (dx, dw) = (self.value(*x).data(), self.value(*w).data());
                let k = dx.len() / dw.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * dw[i / k];
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for i in 0..g.len() {
                        gw[i / k] += g[i] * dx[i];
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += *s * v);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_a_bt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_at_b_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        kernels::matmul_a_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        kernels::matmul_at_b_acc(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                win,
                count,
            } => self.conv2d_backward(*x, *w, *b, win, *count, g, grads),
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                ..
            } => {
                let tx = self.value(*x);
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let gd = self.value(*gamma).data();
                self.affine_param_grads(*gamma, *beta, g, xhat, n, c, *spatial, grads);
                if let Some(gx) = self.acc(grads, *x) {
                    let m = T::from_usize(n * spatial).unwrap();
                    for ch in 0..c {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..n {
                            let base = (i * c + ch) * spatial;
                            for j in base..base + spatial {
                                let dh = g[j] * gd[ch];
                                s1 += dh;
                                s2 += dh * xhat[j];
                            }
                        }
                        let k = inv_std[ch] / m;
                        for i in 0..n {
                            let base = (i * c + ch) * spatial;
                            for j in base..base + spatial {
                                let dh = g[j] * gd[ch];
                                gx[j] += k * (m * dh - s1 - xhat[j] * s2);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
            } => {
                let tx = self.value(*x);
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let gd = self.value(*gamma).data();
                self.affine_param_grads(*gamma, *beta, g, xhat, n, c, *spatial, grads);
                if let Some(gx) = self.acc(grads, *x) {
                    for (j, o) in gx.iter_mut().enumerate() {
                        let ch = (j / spatial) % c;
                        *o += g[j] * gd[ch] * inv_std[ch];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gd = self.value(*gamma).data();
                let d = gd.len();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (j, &v) in g.iter().enumerate() {
                        gg[j % d] += v * xhat[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % d] += v;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::from_usize(d).unwrap();
                    for (r, &is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in row.clone() {
                            let dh = g[j] * gd[j - r * d];
                            s1 += dh;
                            s2 += dh * xhat[j];
                        }
                        for j in row {
                            let dh = g[j] * gd[j - r * d];
                            gx[j] += is / dn * (dn * dh - s1 - xhat[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = *node.value.shape().last().unwrap();
                    for r in 0..y.len() / n {
                        let span = r * n..(r + 1) * n;
                        let dot: T = span.clone().map(|j| y[j] * g[j]).sum();
                        for j in span {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (T::one() - y[j]);
                    }
                }
            }
            Op::Relu(x) => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        if dx[j] > T::zero() {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += if dx[j] > T::zero() { g[j] } else { *slope * g[j] };
                    }
                }
            }
            Op::Elu(x) => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += if dx[j] > T::zero() { g[j] } else { g[j] * (y[j] + T::one()) };
                    }
                }
            }
            Op::CrossEntropy { x, probs, labels } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = probs.len() / labels.len();
                    let k = g[0] / T::from_usize(labels.len()).unwrap();
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            gx[r * n + j] += k * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { x, targets } => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let k = g[0] / T::from_usize(targets.len()).unwrap();
                    for j in 0..targets.len() {
                        gx[j] += k * (sigmoid(dx[j]) - targets[j]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let k = g[0] / T::from_usize(gx.len()).unwrap();
                    gx.iter_mut().for_each(|o| *o += k);
                }
            }
            Op::MeanLast(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() / g.len();
                    let nn = T::from_usize(n).unwrap();
                    for (j, o) in gx.iter_mut().enumerate() {
                        *o += g[j / n] / nn;
                    }
                }
            }
            Op::SquaredDistance { x, anchor } => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let two = T::cst(2.0);
                    for j in 0..anchor.len() {
                        gx[j] += two * g[0] * (dx[j] - anchor[j]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let total = numel(&shape[*axis..]);
                let mut offset = 0;
                for &p in parts {
                    let inner = numel(&self.value(p).shape()[*axis..]);
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + inner];
                            add_into(&mut gp[o * inner..(o + 1) * inner], src);
                        }
                    }
                    offset += inner;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.value(*x).shape().to_vec();
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    let outer = numel(&in_shape[..*axis]);
                    let step = numel(&in_shape[axis + 1..]);
                    let full = in_shape[*axis] * step;
                    for o in 0..outer {
                        let to = o * full + start * step;
                        add_into(&mut gx[to..to + len * step], &g[o * len * step..(o + 1) * len * step]);
                    }
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let row = g.len() / indices.len();
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut gx[i * row..(i + 1) * row], &g[k * row..(k + 1) * row]);
                    }
                }
            }
            Op::Permute { x, source } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &s) in source.iter().enumerate() {
                        gx[s] += g[o];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_param_grads(
        &self,
        gamma: Var,
        beta: Var,
        g: &[T],
        xhat: &[T],
        n: usize,
        c: usize,
        spatial: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        if let Some(gg) = self.acc(grads, gamma) {
            for i in 0..n {
                for (ch, o) in gg.iter_mut().enumerate() {
                    let base = (i * c + ch) * spatial;
                    for j in base..base + spatial {
                        *o += g[j] * xhat[j];
                    }
                }
            }
        }
        if let Some(gb) = self.acc(grads, beta) {
            for i in 0..n {
                for (ch, o) in gb.iter_mut().enumerate() {
                    let base = (i * c + ch) * spatial;
                    *o += g[base..base + spatial].iter().copied().sum::<T>();
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        win: &Window,
        count: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let o = tw.shape()[0];
        let plane = win.out_h() * win.out_w();
        let rows = win.col_rows();
        let img = win.channels * win.height * win.width;
        if let Some(b) = b {
            if let Some(gb) = self.acc(grads, b) {
                for (i, &v) in g.iter().enumerate() {
                    gb[(i / plane) % o] += v;
                }
            }
        }
        let want_w = self.needs(w);
        let want_x = self.needs(x);
        if !want_w && !want_x {
            return;
        }
        let mut gw_local = vec![T::zero(); if want_w { tw.len() } else { 0 }];
        let mut gx_local = vec![T::zero(); if want_x { tx.len() } else { 0 }];
        for (start, len) in conv_chunks(count, rows * plane) {
            // gradient of the chunk laid out as [O, len·plane]
            let mut gout = vec![T::zero(); o * len * plane];
            for n in 0..len {
                for oc in 0..o {
                    let src = ((start + n) * o + oc) * plane;
                    let dst = (oc * len + n) * plane;
                    gout[dst..dst + plane].copy_from_slice(&g[src..src + plane]);
                }
            }
            if want_w {
                let cols = kernels::im2col(&tx.data()[start * img..(start + len) * img], len, win);
                kernels::matmul_a_bt_acc(&gout, &cols, &mut gw_local, o, len * plane, rows);
            }
            if want_x {
                let mut gcols = vec![T::zero(); rows * len * plane];
                kernels::matmul_at_b_acc(tw.data(), &gout, &mut gcols, o, rows, len * plane);
                kernels::col2im(&gcols, len, win, &mut gx_local[start * img..(start + len) * img]);
            }
        }
        if let Some(gw) = self.acc(grads, w) {
            add_into(gw, &gw_local);
        }
        if let Some(gx) = self.acc(grads, x) {
            add_into(gx, &gx_local);
        }
    }
}

/// Splits a conv batch so each unfolded column buffer stays near 64K values.
fn conv_chunks(count: usize, per_item: usize) -> Vec<(usize, usize)> {
    const BUDGET: usize = 1 << 16;
    let step = (BUDGET / per_item.max(1)).clamp(1, count.max(1));
    (0..count)
        .step_by(step)
        .map(|s| (s, step.min(count - s)))
        .collect()
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
