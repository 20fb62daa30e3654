//! Raw loops behind the graph operations. Row-major, no bounds on rank
//! beyond what each kernel states.

use crate::scalar::Scalar;

/// Column block of the output kept hot while streaming `b`.
const BLOCK: usize = 256;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        for i in 0..m {
            let row = &mut out[i * n + j0..i * n + j1];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[p * n + j0..p * n + j1];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n + j0..i * n + j1];
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o_row = &mut out[p * n + j0..p * n + j1];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Dot product with eight independent partial sums.
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let xs = x.chunks_exact(LANES);
    let ys = y.chunks_exact(LANES);
    let (xr, yr) = (xs.remainder(), ys.remainder());
    for (cx, cy) in xs.zip(ys) {
        for l in 0..LANES {
            acc[l] += cx[l] * cy[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a stride-1 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Source row for output row `oy` under kernel row `ky`, if inside.
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy + ky).checked_sub(self.pad).filter(|&y| y < self.height)
    }

    /// Output columns `[lo, hi)` that read inside the image under kernel
    /// column `kx`; source column is `ox + kx - pad`.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.out_w());
        let hi = (self.width + self.pad).saturating_sub(kx).min(self.out_w()).max(lo);
        (lo, hi)
    }
}

/// Unfolds `count` images (each `C×H×W`, contiguous) into a column matrix
/// `[C·kh·kw, count·oh·ow]`.
pub fn im2col<T: Scalar>(input: &[T], count: usize, win: &Window) -> Vec<T> {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = win.height * win.width;
    let img = win.channels * plane;
    let mut cols = Vec::with_capacity(win.col_rows() * count * oh * ow);
    for c in 0..win.channels {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let (lo, hi) = win.valid_x(kx);
                for n in 0..count {
                    let base = n * img + c * plane;
                    for oy in 0..oh {
                        match win.src_y(oy, ky) {
                            Some(y) => {
                                let s = base + y * win.width + lo + kx - win.pad;
                                cols.resize(cols.len() + lo, T::zero());
                                cols.extend_from_slice(&input[s..s + hi - lo]);
                                cols.resize(cols.len() + ow - hi, T::zero());
                            }
                            None => cols.resize(cols.len() + ow, T::zero()),
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto images.
pub fn col2im<T: Scalar>(cols: &[T], count: usize, win: &Window, out: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = win.height * win.width;
    let img = win.channels * plane;
    let row_len = count * oh * ow;
    for c in 0..win.channels {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let (lo, hi) = win.valid_x(kx);
                let r = (c * win.kh + ky) * win.kw + kx;
                let row = &cols[r * row_len..(r + 1) * row_len];
                for n in 0..count {
                    let base = n * img + c * plane;
                    for oy in 0..oh {
                        let Some(y) = win.src_y(oy, ky) else { continue };
                        let s = base + y * win.width + lo + kx - win.pad;
                        let from = (n * oh + oy) * ow;
                        for (o, &v) in out[s..s + hi - lo].iter_mut().zip(&row[from + lo..from + hi]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position of `permute(shape, axes)`, the flat source index.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        idx.push(flat);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            flat += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}
