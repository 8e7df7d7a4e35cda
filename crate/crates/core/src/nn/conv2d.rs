//! 2D convolution via im2col + GEMM, plus spatial resampling helpers.
//!
//! The batch dimension is always processed one sample at a time so
//! results are independent of how callers group samples into batches.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;

use super::param::{init_uniform_fan_in, ParamBuilder, ParamId, ParamStore, Scalar};

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F> {
    x: Array4<F>,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { w: pb.alloc(cout * cin * k * k), b: pb.alloc(cout), cin, cout, k, stride, pad }
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<F>, rng: &mut R) {
        let fan_in = self.cin * self.k * self.k;
        init_uniform_fan_in(ps, self.w, fan_in, rng);
        init_uniform_fan_in(ps, self.b, fan_in, rng);
    }

    pub fn init_zero<F: Scalar>(&self, ps: &mut ParamStore<F>) {
        ps.get_mut(self.w).fill(F::zero());
        ps.get_mut(self.b).fill(F::zero());
    }

    pub fn param_count(&self) -> usize {
        self.w.len + self.b.len
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn w2<'a, F: Scalar>(&self, ps: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), ps.get(self.w)).unwrap()
    }

    pub fn apply<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv2d input channels");
        let (ho, wo) = self.out_hw(h, w);
        let cols = ho * wo;
        let kk = self.cin * self.k * self.k;
        // whole batch in one GEMM; per-column results are independent of
        // the grouping, so callers may batch however they like
        let mut patches = Array2::zeros((kk, n * cols));
        for i in 0..n {
            im2col(&x.index_axis(Axis(0), i), self.k, self.stride, self.pad, &mut patches, i * cols);
        }
        let w2 = self.w2(ps);
        let mut out2 = Array2::zeros((self.cout, n * cols));
        general_mat_mul(F::one(), &w2, &patches.view(), F::zero(), &mut out2);
        let bias = ps.get(self.b);
        let o2 = out2.as_slice().unwrap();
        let mut out = Array4::zeros((n, self.cout, ho, wo));
        let os = out.as_slice_mut().unwrap();
        for i in 0..n {
            for c in 0..self.cout {
                let b = bias[c];
                let src = &o2[c * n * cols + i * cols..c * n * cols + (i + 1) * cols];
                let dst = &mut os[(i * self.cout + c) * cols..(i * self.cout + c + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + b;
                }
            }
        }
        out
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let y = self.apply(ps, &x);
        (y, Conv2dCache { x })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &Conv2dCache<F>,
        dout: &Array4<F>,
        grads: &mut ParamStore<F>,
    ) -> Array4<F> {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (_, _, ho, wo) = dout.dim();
        let cols = ho * wo;
        let kk = self.cin * self.k * self.k;
        let w2 = self.w2(ps);

        let mut patches = Array2::zeros((kk, n * cols));
        for i in 0..n {
            im2col(&x.index_axis(Axis(0), i), self.k, self.stride, self.pad, &mut patches, i * cols);
        }
        // gather dout into (cout, n*cols) matching the patch column order
        let mut dout2 = Array2::<F>::zeros((self.cout, n * cols));
        {
            let d2 = dout2.as_slice_mut().unwrap();
            let ds = dout.as_slice().unwrap();
            for i in 0..n {
                for c in 0..self.cout {
                    let src = &ds[(i * self.cout + c) * cols..(i * self.cout + c + 1) * cols];
                    let dst = &mut d2[c * n * cols + i * cols..c * n * cols + (i + 1) * cols];
                    dst.copy_from_slice(src);
                }
            }
        }
        let mut dw = Array2::<F>::zeros((self.cout, kk));
        general_mat_mul(F::one(), &dout2.view(), &patches.t(), F::zero(), &mut dw);
        super::layers::add_assign_slice(grads.get_mut(self.w), dw.as_slice().unwrap());
        {
            let gb = grads.get_mut(self.b);
            for (c, row) in dout2.rows().into_iter().enumerate() {
                let mut s = F::zero();
                for &v in row {
                    s += v;
                }
                gb[c] += s;
            }
        }
        let mut dpatches = Array2::zeros((kk, n * cols));
        general_mat_mul(F::one(), &w2.t(), &dout2.view(), F::zero(), &mut dpatches);
        let mut dx = Array4::zeros(x.dim());
        for i in 0..n {
            col2im_add(
                &dpatches.slice(ndarray::s![.., i * cols..(i + 1) * cols]),
                self.k,
                self.stride,
                self.pad,
                (h, w),
                &mut dx.index_axis_mut(Axis(0), i),
            );
        }
        dx
    }
}

/// Valid destination index range for a tap of a 3-wide kernel with pad 1:
/// tap 0 cannot write index 0, tap 2 cannot write the last index.
#[inline]
pub(crate) fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len - 1),
    }
}

/// Gathers `k x k` patches of `x` (shape `(c, h, w)`) into rows of
/// `patches` (shape `(c*k*k, ho*wo)`), zero-padding out-of-range taps.
fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    patches: &mut Array2<F>,
    col_offset: usize,
) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let total_cols = patches.dim().1;
    let pslice = patches.as_slice_mut().unwrap();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let base = row * total_cols + col_offset;
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut pslice[base + oy * wo..base + (oy + 1) * wo];
                    if y < 0 || y >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let y = y as usize;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        *d = if xx < 0 || xx >= w as isize {
                            F::zero()
                        } else {
                            x[[ch, y, xx as usize]]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of `im2col`.
fn col2im_add<F: Scalar>(
    dpatches: &ArrayView2<F>,
    k: usize,
    stride: usize,
    pad: usize,
    hw: (usize, usize),
    dx: &mut ArrayViewMut3<F>,
) {
    let (c, h, w) = dx.dim();
    debug_assert_eq!(hw, (h, w));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[[ch, y as usize, xx as usize]] += dpatches[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[i, ch, y, xx]];
                    out[[i, ch, 2 * y, 2 * xx]] = v;
                    out[[i, ch, 2 * y, 2 * xx + 1]] = v;
                    out[[i, ch, 2 * y + 1, 2 * xx]] = v;
                    out[[i, ch, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    out
}

/// Backward of `upsample2x`: sums each 2x2 block.
pub fn upsample2x_backward<F: Scalar>(dout: &Array4<F>) -> Array4<F> {
    let (n, c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dx[[i, ch, y, xx]] = dout[[i, ch, 2 * y, 2 * xx]]
                        + dout[[i, ch, 2 * y, 2 * xx + 1]]
                        + dout[[i, ch, 2 * y + 1, 2 * xx]]
                        + dout[[i, ch, 2 * y + 1, 2 * xx + 1]];
                }
            }
        }
    }
    dx
}

/// Symmetric zero padding of the two spatial dims up to the next multiple
/// of `multiple`. Returns the padded array and `(top, left)` offsets.
pub fn pad_to_multiple<F: Scalar>(x: &Array4<F>, multiple: usize) -> (Array4<F>, (usize, usize)) {
    let (n, c, h, w) = x.dim();
    let ht = h.div_ceil(multiple) * multiple;
    let wt = w.div_ceil(multiple) * multiple;
    if ht == h && wt == w {
        return (x.clone(), (0, 0));
    }
    let top = (ht - h) / 2;
    let left = (wt - w) / 2;
    let mut out = Array4::zeros((n, c, ht, wt));
    out.slice_mut(ndarray::s![.., .., top..top + h, left..left + w]).assign(x);
    (out, (top, left))
}

/// Crops the spatial dims back to `(h, w)` from `(top, left)`.
pub fn crop<F: Scalar>(x: &Array4<F>, offset: (usize, usize), h: usize, w: usize) -> Array4<F> {
    x.slice(ndarray::s![.., .., offset.0..offset.0 + h, offset.1..offset.1 + w]).to_owned()
}

/// Backward of `crop` relative to a padded shape: embeds `dout` at the
/// offset and zero-fills the padding.
pub fn crop_backward<F: Scalar>(
    dout: &Array4<F>,
    offset: (usize, usize),
    padded_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, h, w) = dout.dim();
    let mut dx = Array4::zeros((n, c, padded_hw.0, padded_hw.1));
    dx.slice_mut(ndarray::s![.., .., offset.0..offset.0 + h, offset.1..offset.1 + w]).assign(dout);
    dx
}
