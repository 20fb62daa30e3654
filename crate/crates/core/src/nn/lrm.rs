use rand::Rng;

use super::{Builder, ConvBnRelu, Fwd, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Side of an ROI patch.
pub const PATCH: usize = 5;
/// Flattened ROI token width (3 channels of 5×5).
pub const TOKEN: usize = 3 * PATCH * PATCH;

/// Local feature extractor: three 3×3 conv → BN → ReLU stages mapping each
/// 3×5×5 ROI to a 3×5×5 feature.
#[derive(Clone, Debug)]
pub struct Lfe {
    stages: Vec<ConvBnRelu>,
}

impl Lfe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(bld: &mut Builder<'_, T, R>, channels: [usize; 2]) -> Result<Self> {
        let widths = [3, channels[0], channels[1], 3];
        let stages = (0..3)
            .map(|i| ConvBnRelu::new(bld, &format!("lfe.{i}"), widths[i], widths[i + 1], 3))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    /// `x: [N, 3, 5, 5] → [N, 3, 5, 5]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let s = f.g.shape(x);
        if s.len() != 4 || s[1..] != [3, PATCH, PATCH] {
            return Err(Error::dim("lfe", format!("expected [N, 3, 5, 5], got {s:?}")));
        }
        self.stages.iter().try_fold(x, |h, st| st.forward(f, h))
    }
}

/// Spatial structure encoder: one transformer encoder block over ROI tokens
/// with learned positional embeddings indexed by landmark.
#[derive(Clone, Debug)]
pub struct Sse {
    tokens: usize,
    heads: usize,
    pos: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

/// Encoder output and its attention weights `[B·heads, T, T]`.
pub struct SseOutput {
    pub z: Var,
    pub attention: Var,
}

impl Sse {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        bld: &mut Builder<'_, T, R>,
        tokens: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        if !TOKEN.is_multiple_of(heads) {
            return Err(Error::config("model.sse_heads", format!("{heads} does not divide {TOKEN}")));
        }
        Ok(Self {
            tokens,
            heads,
            pos: bld.normal("sse.pos", &[tokens, TOKEN], 0.02)?,
            q: Linear::new(bld, "sse.q", TOKEN, TOKEN, true)?,
            k: Linear::new(bld, "sse.k", TOKEN, TOKEN, true)?,
            v: Linear::new(bld, "sse.v", TOKEN, TOKEN, true)?,
            o: Linear::new(bld, "sse.o", TOKEN, TOKEN, true)?,
            ln1: LayerNorm::new(bld, "sse.ln1", TOKEN)?,
            ff1: Linear::new(bld, "sse.ff1", TOKEN, ffn_hidden, true)?,
            ff2: Linear::new(bld, "sse.ff2", ffn_hidden, TOKEN, true)?,
            ln2: LayerNorm::new(bld, "sse.ln2", TOKEN)?,
        })
    }

    pub fn pos_index(&self) -> usize {
        self.pos
    }

    /// `phi: [B, T, 75]` (LFE output, flattened per ROI) → `[B, T, 75]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, phi: Var) -> Result<SseOutput> {
        let s = f.g.shape(phi).to_vec();
        if s.len() != 3 || s[2] != TOKEN {
            return Err(Error::dim("sse", format!("expected [B, T, {TOKEN}], got {s:?}")));
        }
        if s[1] != self.tokens {
            return Err(Error::contract(format!("SSE expects {} tokens, got {}", self.tokens, s[1])));
        }
        let (b, t, h) = (s[0], s[1], self.heads);
        let dh = TOKEN / h;
        let pos = f.p(self.pos);
        let x = f.g.add_broadcast(phi, pos)?;

        let split = |f: &mut Fwd<'_, T>, y: Var, axes: &[usize], shape: &[usize]| -> Result<Var> {
            let y = f.g.reshape(y, &[b, t, h, dh])?;
            let y = f.g.permute(y, axes)?;
            f.g.reshape(y, shape)
        };
        let q = self.q.forward(f, x)?;
        let q = split(f, q, &[0, 2, 1, 3], &[b * h, t, dh])?;
        let k = self.k.forward(f, x)?;
        let kt = split(f, k, &[0, 2, 3, 1], &[b * h, dh, t])?;
        let v = self.v.forward(f, x)?;
        let v = split(f, v, &[0, 2, 1, 3], &[b * h, t, dh])?;

        let scores = f.g.bmm(q, kt)?;
        let scores = f.g.scale(scores, T::cst(1.0 / (dh as f64).sqrt()))?;
        let attention = f.g.softmax(scores)?;
        let ctx = f.g.bmm(attention, v)?;
        let ctx = f.g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = f.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.g.reshape(ctx, &[b, t, TOKEN])?;
        let mha = self.o.forward(f, ctx)?;

        let y = f.g.add(mha, x)?;
        let y = self.ln1.forward(f, y)?;
        let ff = self.ff1.forward(f, y)?;
        let ff = f.g.relu(ff)?;
        let ff = self.ff2.forward(f, ff)?;
        let z = f.g.add(ff, y)?;
        let z = self.ln2.forward(f, z)?;
        Ok(SseOutput { z, attention })
    }
}
