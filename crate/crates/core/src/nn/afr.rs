use rand::Rng;

use super::lrm::{PATCH, TOKEN};
use super::{mean_over_nodes, Builder, ConvBnRelu, Fwd, Linear};
use crate::error::{Error, Result};
use crate::priors::{mask_intra_region, AuCatalog, PriorPack, Region};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// LeakyReLU slope of the attention scores.
pub const GAT_SLOPE: f64 = 0.2;

/// Group squeeze-and-excitation: per-ROI channel gates from pooled
/// features, applied with a residual, `W ⊙ Z + Z`.
#[derive(Clone, Debug)]
pub struct Gse {
    fc: Linear,
}

impl Gse {
    pub fn new<T: Scalar, R: Rng + ?Sized>(bld: &mut Builder<'_, T, R>, name: &str) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(bld, name, 3, 3, true)?,
        })
    }

    /// Channel gates in (0, 1): `x: [B, N, 3, 25] → [B, N, 3]`.
    pub fn gates<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let s = f.g.shape(x);
        if s.len() != 4 || s[2..] != [3, PATCH * PATCH] {
            return Err(Error::dim("gse", format!("expected [B, N, 3, 25], got {s:?}")));
        }
        if s[1] == 0 {
            return Err(Error::contract("GSE on an empty ROI group"));
        }
        let pooled = f.g.mean_last(x)?;
        let logits = self.fc.forward(f, pooled)?;
        f.g.sigmoid(logits)
    }

    /// `x ⊙ gates + x`.
    pub fn apply<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var, gates: Var) -> Result<Var> {
        let gated = f.g.mul_repeat(x, gates)?;
        f.g.add(gated, x)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let w = self.gates(f, x)?;
        self.apply(f, x, w)
    }
}

/// AU feature extraction: the group's ROI features stacked on the channel
/// axis, a 3×3 expansion and a 1×1 reduction to `3·N_AU` channels.
#[derive(Clone, Debug)]
pub struct Afe {
    rois: usize,
    aus: usize,
    expand: ConvBnRelu,
    reduce: ConvBnRelu,
}

impl Afe {
    /// `hidden = None` doubles the stacked channel count.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        rois: usize,
        aus: usize,
        hidden: Option<usize>,
    ) -> Result<Self> {
        let c = 3 * rois;
        let h = hidden.unwrap_or(2 * c);
        Ok(Self {
            rois,
            aus,
            expand: ConvBnRelu::new(bld, &format!("{name}.expand"), c, h, 3)?,
            reduce: ConvBnRelu::new(bld, &format!("{name}.reduce"), h, 3 * aus, 1)?,
        })
    }

    /// `x: [B, N_g, 3, 25] → [B, N_AU, 75]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let s = f.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.rois {
            return Err(Error::dim("afe", format!("expected [B, {}, 3, 25], got {s:?}", self.rois)));
        }
        let b = s[0];
        let x = f.g.reshape(x, &[b, 3 * self.rois, PATCH, PATCH])?;
        let y = self.expand.forward(f, x)?;
        let y = self.reduce.forward(f, y)?;
        f.g.reshape(y, &[b, self.aus, TOKEN])
    }
}

/// Adjacency mask and β-free prior attention in the graph's scalar type.
#[derive(Clone, Debug)]
pub struct GatPrior<T: Scalar> {
    pub n: usize,
    pub mask: Vec<bool>,
    pub d: Tensor<T>,
}

impl<T: Scalar> GatPrior<T> {
    pub fn from_pack(pack: &PriorPack) -> Self {
        let n = pack.n();
        Self {
            n,
            mask: pack.adjacency().mask(),
            d: Tensor::from_fn(&[n, n], |i| T::cst(pack.attention().data()[i])),
        }
    }
}

/// One DPK-GAT layer with several heads.
#[derive(Clone, Debug)]
pub struct GatLayer {
    heads: Vec<(Linear, usize, usize)>,
    concat: bool,
    pub in_dim: usize,
    pub head_dim: usize,
}

/// Layer output and each head's attention `[B, n, n]`.
pub struct GatOutput {
    pub h: Var,
    pub alphas: Vec<Var>,
}

impl GatLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        in_dim: usize,
        head_dim: usize,
        heads: usize,
        concat: bool,
    ) -> Result<Self> {
        let heads = (0..heads)
            .map(|h| {
                let w = Linear::new(bld, &format!("{name}.h{h}.w"), in_dim, head_dim, false)?;
                let a1 = bld.weight(&format!("{name}.h{h}.a_src"), &[head_dim, 1], head_dim)?;
                let a2 = bld.weight(&format!("{name}.h{h}.a_dst"), &[head_dim, 1], head_dim)?;
                Ok((w, a1, a2))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            concat,
            in_dim,
            head_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        if self.concat {
            self.head_dim * self.heads.len()
        } else {
            self.head_dim
        }
    }

    /// `x: [B, n, in] → [B, n, out]`.
    ///
    /// Per head: `f = W x`, `e_ij = LeakyReLU(a_srcᵀ f_i + a_dstᵀ f_j)` masked by
    /// A, `α = (1 − β)·softmax(e) + β·D`, `h_i = ELU(Σ_j α_ij f_j) + f_i`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var, prior: &GatPrior<T>, beta: f64) -> Result<GatOutput> {
        let s = f.g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.in_dim {
            return Err(Error::dim("gat", format!("expected [B, n, {}], got {s:?}", self.in_dim)));
        }
        if s[1] != prior.n {
            return Err(Error::contract(format!("{} nodes against a {}-node prior", s[1], prior.n)));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::contract(format!("beta {beta} outside [0, 1]")));
        }
        let (b, n, fd) = (s[0], s[1], self.head_dim);
        let shift = Tensor::from_fn(&[n, n], |i| T::cst(beta) * prior.d.data()[i]);
        let ones_col = f.constant(Tensor::ones(&[b, n, 1]));
        let ones_row = f.constant(Tensor::ones(&[b, 1, n]));
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for (w, a1, a2) in &self.heads {
            let fh = w.forward(f, x)?;
            let flat = f.g.reshape(fh, &[b * n, fd])?;
            let (a1, a2) = (f.p(*a1), f.p(*a2));
            let s1 = f.g.matmul(flat, a1)?;
            let s1 = f.g.reshape(s1, &[b, n, 1])?;
            let s2 = f.g.matmul(flat, a2)?;
            let s2 = f.g.reshape(s2, &[b, 1, n])?;
            // e_ij = s1_i + s2_j as one batched outer product.
            let left = f.g.concat(&[s1, ones_col], 2)?;
            let right = f.g.concat(&[ones_row, s2], 1)?;
            let e = f.g.bmm(left, right)?;
            let e = f.g.leaky_relu(e, T::cst(GAT_SLOPE))?;
            let sm = f.g.masked_softmax(e, &prior.mask)?;
            let alpha = f.g.affine(sm, T::cst(1.0 - beta), Some(&shift))?;
            let agg = f.g.bmm(alpha, fh)?;
            let agg = f.g.elu(agg)?;
            outs.push(f.g.add(agg, fh)?);
            alphas.push(alpha);
        }
        let h = if self.concat {
            f.g.concat(&outs, 2)?
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = f.g.add(acc, o)?;
            }
            f.g.scale(acc, T::cst(1.0 / outs.len() as f64))?
        };
        Ok(GatOutput { h, alphas })
    }
}

/// Two-layer DPK-GAT: heads concatenated after the first layer, averaged
/// after the second.
#[derive(Clone, Debug)]
pub struct DpkGat {
    layers: [GatLayer; 2],
}

impl DpkGat {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        in_dim: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        let l1 = GatLayer::new(bld, &format!("{name}.l1"), in_dim, width, heads, true)?;
        let l2 = GatLayer::new(bld, &format!("{name}.l2"), l1.out_dim(), width, heads, false)?;
        Ok(Self { layers: [l1, l2] })
    }

    pub fn out_dim(&self) -> usize {
        self.layers[1].out_dim()
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var, prior: &GatPrior<T>, beta: f64) -> Result<GatOutput> {
        let o1 = self.layers[0].forward(f, x, prior, beta)?;
        let mut o2 = self.layers[1].forward(f, o1.h, prior, beta)?;
        let mut alphas = o1.alphas;
        alphas.append(&mut o2.alphas);
        Ok(GatOutput { h: o2.h, alphas })
    }
}

/// Priors of the three GATs.
#[derive(Clone, Debug)]
pub struct AfrPriors<T: Scalar> {
    pub upper: GatPrior<T>,
    pub lower: GatPrior<T>,
    pub global: GatPrior<T>,
}

impl<T: Scalar> AfrPriors<T> {
    /// Region blocks of `pack` for the local GATs and its intra-region-masked
    /// form for the global GAT.
    pub fn from_pack(pack: &PriorPack) -> Self {
        Self {
            upper: GatPrior::from_pack(&pack.region_block(Region::Upper)),
            lower: GatPrior::from_pack(&pack.region_block(Region::Lower)),
            global: GatPrior::from_pack(&mask_intra_region(pack).pack),
        }
    }
}

/// AU feature refinement: GSE and AFE per ROI group, then upper and lower
/// DPK-GATs in parallel and a global DPK-GAT over their concatenation.
#[derive(Clone, Debug)]
pub struct Afr {
    groups: Vec<Vec<usize>>,
    upper_nodes: usize,
    gse: Vec<Gse>,
    afe: Vec<Afe>,
    au_head_afe: Linear,
    gat_upper: DpkGat,
    gat_lower: DpkGat,
    gat_global: DpkGat,
    au_head_gat: Linear,
}

pub struct AfrOutput {
    /// Concatenated AFE node features `[B, M, 75]` in catalog order.
    pub f_au: Var,
    pub au_logits_afe: Var,
    /// Upper nodes then lower nodes, `[B, M, F]`.
    pub h_local: Var,
    pub h_global: Var,
    pub au_logits_gat: Var,
    /// Attention of the global GAT, per layer and head.
    pub global_alphas: Vec<Var>,
}

impl Afr {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        catalog: &AuCatalog,
        afe_hidden: Option<usize>,
        gat_width: usize,
        gat_heads: usize,
    ) -> Result<Self> {
        let m = catalog.au_count();
        let upper_nodes = catalog.nodes_in(Region::Upper).len();
        if upper_nodes == 0 || upper_nodes == m {
            return Err(Error::config("catalog.groups", "both facial regions need at least one AU"));
        }
        let mut gse = Vec::new();
        let mut afe = Vec::new();
        for (g, group) in catalog.groups.iter().enumerate() {
            let n = group.primary.len() + group.secondary.len();
            gse.push(Gse::new(bld, &format!("gse{}", g + 1))?);
            afe.push(Afe::new(bld, &format!("afe{}", g + 1), n, group.aus.len(), afe_hidden)?);
        }
        let au_head_afe = Linear::new(bld, "au_head_afe", TOKEN, m, true)?;
        let gat_upper = DpkGat::new(bld, "gat_upper", TOKEN, gat_width, gat_heads)?;
        let gat_lower = DpkGat::new(bld, "gat_lower", TOKEN, gat_width, gat_heads)?;
        let gat_global = DpkGat::new(bld, "gat_global", gat_upper.out_dim(), gat_width, gat_heads)?;
        let au_head_gat = Linear::new(bld, "au_head_gat", gat_global.out_dim(), m, true)?;
        Ok(Self {
            groups: catalog.groups.iter().map(|g| g.rois()).collect(),
            upper_nodes,
            gse,
            afe,
            au_head_afe,
            gat_upper,
            gat_lower,
            gat_global,
            au_head_gat,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.gat_global.out_dim()
    }

    /// The GSE of 1-based group `g`.
    pub fn gse(&self, g: usize) -> Result<&Gse> {
        self.gse
            .get(g.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("group {g} outside 1..={}", self.gse.len())))
    }

    /// The AFE of 1-based group `g`.
    pub fn afe(&self, g: usize) -> Result<&Afe> {
        self.afe
            .get(g.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("group {g} outside 1..={}", self.afe.len())))
    }

    /// `z: [B, K, 75]` SSE output → AU features and logits.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, z: Var, priors: &AfrPriors<T>, beta: f64) -> Result<AfrOutput> {
        let s = f.g.shape(z).to_vec();
        if s.len() != 3 || s[2] != TOKEN {
            return Err(Error::dim("afr", format!("expected [B, K, {TOKEN}], got {s:?}")));
        }
        let b = s[0];
        let by_roi = f.g.permute(z, &[1, 0, 2])?;
        let mut feats = Vec::with_capacity(self.groups.len());
        for (g, rois) in self.groups.iter().enumerate() {
            let r = f.g.gather(by_roi, rois)?;
            let r = f.g.permute(r, &[1, 0, 2])?;
            let r = f.g.reshape(r, &[b, rois.len(), 3, PATCH * PATCH])?;
            let r = self.gse[g].forward(f, r)?;
            feats.push(self.afe[g].forward(f, r)?);
        }
        let f_au = f.g.concat(&feats, 1)?;
        let m = f.g.shape(f_au)[1];
        let pooled = mean_over_nodes(f.g, f_au)?;
        let au_logits_afe = self.au_head_afe.forward(f, pooled)?;

        let upper = f.g.slice(f_au, 1, 0, self.upper_nodes)?;
        let lower = f.g.slice(f_au, 1, self.upper_nodes, m - self.upper_nodes)?;
        let h_upper = self.gat_upper.forward(f, upper, &priors.upper, beta)?.h;
        let h_lower = self.gat_lower.forward(f, lower, &priors.lower, beta)?.h;
        let h_local = f.g.concat(&[h_upper, h_lower], 1)?;
        let global = self.gat_global.forward(f, h_local, &priors.global, beta)?;
        let pooled = mean_over_nodes(f.g, global.h)?;
        let au_logits_gat = self.au_head_gat.forward(f, pooled)?;
        Ok(AfrOutput {
            f_au,
            au_logits_afe,
            h_local,
            h_global: global.h,
            au_logits_gat,
            global_alphas: global.alphas,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients, GradCheckConfig};
    use crate::nn::Mode;
    use crate::priors::{AuMatrix, PriorConfig};
    use crate::tensor::Graph;
    use crate::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builder_parts<F, L>(seed: u64, make: F) -> (L, ParamSet<f64>, ParamSet<f64>)
    where
        F: FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> Result<L>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder::new(&mut rng);
        let l = make(&mut bld).unwrap();
        (l, bld.params, bld.buffers)
    }

    #[test]
    fn gse_forced_gates() {
        let (gse, p, b) = builder_parts(0, |bld| Gse::new(bld, "gse"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 4, 3, 25], 1.0, &mut rng);
        for (w, factor) in [(0.0, 1.0), (1.0, 2.0)] {
            let mut g = Graph::new();
            let mut f = Fwd::new(&mut g, &p, &b, Mode::Train);
            let xv = f.constant(x.clone());
            let gates = f.constant(Tensor::full(&[2, 4, 3], w));
            let y = gse.apply(&mut f, xv, gates).unwrap();
            let expect: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
            assert_eq!(g.value(y).data(), &expect[..]);
        }
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &p, &b, Mode::Train);
        let xv = f.constant(x.clone());
        let gates = gse.gates(&mut f, xv).unwrap();
        assert!(g.value(gates).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gse_gradients() {
        let (gse, p, b) = builder_parts(2, |bld| Gse::new(bld, "gse"));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 3, 25], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 3, 3, 25], 1.0, &mut rng);
        assert_gradients(
            &p,
            |g, p| {
                let mut f = Fwd::new(g, p, &b, Mode::Train);
                let xv = f.constant(x.clone());
                let y = gse.forward(&mut f, xv)?;
                let w = f.constant(probe.clone());
                let y = f.g.mul(y, w)?;
                f.g.sum(y)
            },
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
    }

    #[test]
    fn afe_yields_table_node_counts() {
        let catalog = AuCatalog::standard();
        let (afr, p, b) = builder_parts(4, |bld| Afr::new(bld, &catalog, Some(8), 8, 3));
        for (g, rois, aus) in [(3, 38, 2), (4, 52, 4)] {
            let mut g_ = Graph::new();
            let mut f = Fwd::new(&mut g_, &p, &b, Mode::Train);
            let x = f.constant(Tensor::ones(&[2, rois, 3, 25]));
            let y = afr.afe(g).unwrap().forward(&mut f, x).unwrap();
            assert_eq!(g_.shape(y), &[2, aus, TOKEN]);
        }
        assert!(matches!(afr.afe(0), Err(Error::Contract(_))));
        assert!(matches!(afr.afe(5), Err(Error::Contract(_))));
    }

    fn random_prior(n: usize, rng: &mut ChaCha8Rng, isolate: Option<usize>) -> PriorPack {
        let mut a = AuMatrix::zeros(n);
        for i in 0..n {
            for j in 0..i {
                if Some(i) == isolate || Some(j) == isolate {
                    continue;
                }
                if rng.random::<f64>() < 0.5 {
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
            }
        }
        let raw = AuMatrix::from_fn(n, |i, j| if a.get(i, j) != 0.0 { rng.random::<f64>() } else { 0.0 });
        let d = AuMatrix::from_fn(n, |i, j| {
            let s: f64 = raw.row(i).iter().sum();
            if s > 0.0 {
                raw.get(i, j) / s
            } else {
                0.0
            }
        });
        let regions = (0..n).map(|i| if i < n / 2 { Region::Upper } else { Region::Lower }).collect();
        PriorPack::new(a, d, regions).unwrap()
    }

    #[test]
    fn attention_mixture_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let pack = random_prior(n, &mut rng, Some(2));
        let prior = GatPrior::<f64>::from_pack(&pack);
        let (layer, p, b) = builder_parts(6, |bld| GatLayer::new(bld, "gat", 10, 4, 3, true));
        let x = Tensor::randn(&[2, n, 10], 1.0, &mut rng);
        for beta in [0.0, 0.25, 0.5, 1.0] {
            let mut g = Graph::new();
            let mut f = Fwd::new(&mut g, &p, &b, Mode::Train);
            let xv = f.constant(x.clone());
            let out = layer.forward(&mut f, xv, &prior, beta).unwrap();
            for &alpha in &out.alphas {
                let t = g.value(alpha);
                for bi in 0..2 {
                    for i in 0..n {
                        let row = &t.data()[(bi * n + i) * n..(bi * n + i + 1) * n];
                        let sum: f64 = row.iter().sum();
                        if pack.adjacency().degree(i) == 0 {
                            assert!(row.iter().all(|&v| v == 0.0));
                        } else {
                            assert!((sum - 1.0).abs() < 1e-9, "beta {beta} row {i} sum {sum}");
                        }
                        for j in 0..n {
                            if pack.adjacency().get(i, j) == 0.0 {
                                assert_eq!(row[j], 0.0);
                            }
                            if beta == 1.0 {
                                assert_eq!(row[j], pack.attention().get(i, j));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn isolated_node_keeps_only_its_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let pack = random_prior(n, &mut rng, Some(1));
        let prior = GatPrior::<f64>::from_pack(&pack);
        let (layer, p, b) = builder_parts(8, |bld| GatLayer::new(bld, "gat", 5, 3, 1, true));
        let x = Tensor::randn(&[1, n, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &p, &b, Mode::Train);
        let xv = f.constant(x.clone());
        let out = layer.forward(&mut f, xv, &prior, 0.3).unwrap();
        let w = p.tensor_at(layer.heads[0].0.weight_index());
        let h = g.value(out.h);
        for c in 0..3 {
            let proj: f64 = (0..5).map(|k| x.data()[5 + k] * w.data()[k * 3 + c]).sum();
            assert!((h.data()[3 + c] - proj).abs() < 1e-14);
        }
    }

    #[test]
    fn gat_rejects_wrong_node_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = GatPrior::<f64>::from_pack(&random_prior(4, &mut rng, None));
        let (layer, p, b) = builder_parts(10, |bld| GatLayer::new(bld, "gat", 5, 3, 1, true));
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &p, &b, Mode::Train);
        let xv = f.constant(Tensor::ones(&[1, 5, 5]));
        assert!(matches!(layer.forward(&mut f, xv, &prior, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn gat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let prior = GatPrior::<f64>::from_pack(&random_prior(n, &mut rng, Some(4)));
        let (gat, p, b) = builder_parts(12, |bld| DpkGat::new(bld, "gat", 6, 4, 3));
        let x = Tensor::randn(&[2, n, 6], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, n, 4], 1.0, &mut rng);
        assert_gradients(
            &p,
            |g, p| {
                let mut f = Fwd::new(g, p, &b, Mode::Train);
                let xv = f.constant(x.clone());
                let h = gat.forward(&mut f, xv, &prior, 0.3)?.h;
                let w = f.constant(probe.clone());
                let y = f.g.mul(h, w)?;
                f.g.sum(y)
            },
            &GradCheckConfig::piecewise(),
            &mut rng,
        )
        .unwrap();
    }

    #[test]
    fn afr_node_order_and_global_mask() {
        let cfg = PriorConfig::standard();
        let pack = PriorPack::uniform(cfg.adjacency().unwrap().0, cfg.catalog.regions()).unwrap();
        let priors = AfrPriors::<f64>::from_pack(&pack);
        let (afr, p, b) = builder_parts(13, |bld| Afr::new(bld, &cfg.catalog, Some(6), 4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::randn(&[2, 65, TOKEN], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &p, &b, Mode::Train);
        let zv = f.constant(z);
        let out = afr.forward(&mut f, zv, &priors, 0.4).unwrap();
        assert_eq!(g.shape(out.h_local), &[2, 12, 4]);
        assert_eq!(g.shape(out.h_global), &[2, 12, 4]);
        assert_eq!(g.shape(out.au_logits_afe), &[2, 12]);
        assert_eq!(g.shape(out.au_logits_gat), &[2, 12]);
        let regions = cfg.catalog.regions();
        for &alpha in &out.global_alphas {
            let t = g.value(alpha);
            for (k, &v) in t.data().iter().enumerate() {
                let (i, j) = ((k / 12) % 12, k % 12);
                if regions[i] == regions[j] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
