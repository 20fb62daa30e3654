use rand::Rng;

use super::{Builder, Conv2d, Fwd, Linear};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Four parallel branches (1×1, 3×3, 5×5, 3×3 max-pool → 1×1), each with
/// ReLU, concatenated on channels.
#[derive(Clone, Debug)]
pub struct Inception {
    b1: Conv2d,
    b3: Conv2d,
    b5: Conv2d,
    pool: Conv2d,
}

impl Inception {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        in_ch: usize,
        branch: usize,
    ) -> Result<Self> {
        Ok(Self {
            b1: Conv2d::new(bld, &format!("{name}.b1"), in_ch, branch, 1, true)?,
            b3: Conv2d::new(bld, &format!("{name}.b3"), in_ch, branch, 3, true)?,
            b5: Conv2d::new(bld, &format!("{name}.b5"), in_ch, branch, 5, true)?,
            pool: Conv2d::new(bld, &format!("{name}.pool"), in_ch, branch, 1, true)?,
        })
    }

    pub fn out_ch(&self) -> usize {
        self.b1.out_ch + self.b3.out_ch + self.b5.out_ch + self.pool.out_ch
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(4);
        for conv in [&self.b1, &self.b3, &self.b5] {
            let y = conv.forward(f, x)?;
            outs.push(f.g.relu(y)?);
        }
        let pooled = f.g.max_pool2d(x, 3, 1)?;
        let y = self.pool.forward(f, pooled)?;
        outs.push(f.g.relu(y)?);
        f.g.concat(&outs, 1)
    }
}

/// Dual-stream classifier over the AU relation features and the global
/// flow map.
#[derive(Clone, Debug)]
pub struct Dsi {
    au_stream: [Inception; 2],
    of_stream: [Inception; 2],
    fc: Linear,
    au_shape: [usize; 2],
    of_side: usize,
}

impl Dsi {
    /// `au_shape` is `[nodes, width]` of `h^Global`; `of_side` the side of
    /// the 3-channel global flow map.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        au_shape: [usize; 2],
        of_side: usize,
        branch: usize,
        classes: usize,
    ) -> Result<Self> {
        let a1 = Inception::new(bld, "dsi.au1", 1, branch)?;
        let a2 = Inception::new(bld, "dsi.au2", a1.out_ch(), branch)?;
        let o1 = Inception::new(bld, "dsi.of1", 3, branch)?;
        let o2 = Inception::new(bld, "dsi.of2", o1.out_ch(), branch)?;
        let flat = a2.out_ch() * au_shape[0] * au_shape[1] + o2.out_ch() * of_side * of_side;
        let fc = Linear::new(bld, "dsi.fc", flat, classes, true)?;
        Ok(Self {
            au_stream: [a1, a2],
            of_stream: [o1, o2],
            fc,
            au_shape,
            of_side,
        })
    }

    pub fn inception(&self, stream: usize, block: usize) -> &Inception {
        if stream == 0 {
            &self.au_stream[block]
        } else {
            &self.of_stream[block]
        }
    }

    /// `h_global: [B, M, F]`, `of: [B, 3, S, S]` → logits `[B, N]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, h_global: Var, of: Var) -> Result<Var> {
        let hs = f.g.shape(h_global).to_vec();
        let os = f.g.shape(of).to_vec();
        let s = self.of_side;
        if hs.len() != 3 || hs[1..] != self.au_shape || os != [hs[0], 3, s, s] {
            return Err(Error::dim(
                "dsi",
                format!(
                    "h_global {hs:?} and flow {os:?} against [B, {}, {}] and [B, 3, {s}, {s}]",
                    self.au_shape[0], self.au_shape[1]
                ),
            ));
        }
        let b = hs[0];
        let a = f.g.reshape(h_global, &[b, 1, hs[1], hs[2]])?;
        let a = self.au_stream.iter().try_fold(a, |x, blk| blk.forward(f, x))?;
        let o = self.of_stream.iter().try_fold(of, |x, blk| blk.forward(f, x))?;
        let a = f.g.flatten(a)?;
        let o = f.g.flatten(o)?;
        let joint = f.g.concat(&[a, o], 1)?;
        self.fc.forward(f, joint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients, GradCheckConfig};
    use crate::nn::Mode;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_width_follows_class_count() {
        for classes in [7, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut bld = Builder::<f64, _>::new(&mut rng);
            let dsi = Dsi::new(&mut bld, [12, 4], 8, 2, classes).unwrap();
            assert_eq!(dsi.inception(0, 0).out_ch(), 8);
            let mut g = Graph::new();
            let mut f = Fwd::new(&mut g, &bld.params, &bld.buffers, Mode::Train);
            let h = f.constant(Tensor::ones(&[2, 12, 4]));
            let of = f.constant(Tensor::ones(&[2, 3, 8, 8]));
            let y = dsi.forward(&mut f, h, of).unwrap();
            assert_eq!(g.shape(y), &[2, classes]);
            let mut f = Fwd::new(&mut g, &bld.params, &bld.buffers, Mode::Train);
            let of_bad = f.constant(Tensor::ones(&[2, 3, 6, 6]));
            assert!(matches!(dsi.forward(&mut f, h, of_bad), Err(Error::Dimension { op: "dsi", .. })));
        }
    }

    #[test]
    fn inception_concatenates_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bld = Builder::<f64, _>::new(&mut rng);
        let blk = Inception::new(&mut bld, "inc", 3, 5).unwrap();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &bld.params, &bld.buffers, Mode::Train);
        let x = f.constant(Tensor::randn(&[1, 3, 6, 6], 1.0, &mut rng));
        let y = blk.forward(&mut f, x).unwrap();
        assert_eq!(blk.out_ch(), 20);
        assert_eq!(g.shape(y), &[1, 20, 6, 6]);
    }

    #[test]
    fn dsi_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bld = Builder::<f64, _>::new(&mut rng);
        let dsi = Dsi::new(&mut bld, [4, 3], 6, 2, 3).unwrap();
        let (p, b) = (bld.params, bld.buffers);
        let h = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let of = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        assert_gradients(
            &p,
            |g, p| {
                let mut f = Fwd::new(g, p, &b, Mode::Train);
                let hv = f.constant(h.clone());
                let ov = f.constant(of.clone());
                let y = dsi.forward(&mut f, hv, ov)?;
                f.g.cross_entropy(y, &[0, 2])
            },
            &GradCheckConfig::piecewise(),
            &mut rng,
        )
        .unwrap();
    }
}
