//! 3D convolution, processed one output z-slab at a time so the im2col
//! buffer stays small. Same per-sample determinism contract as conv2d.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayView4, ArrayViewMut4, Axis};
use rand::Rng;

use super::param::{init_uniform_fan_in, ParamBuilder, ParamId, ParamStore, Scalar};

/// 5D tensors are `(n, c, d, h, w)`.
pub type Array5<F> = ndarray::Array<F, ndarray::Ix5>;

pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv3dCache<F> {
    x: Array5<F>,
}

impl Conv3d {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv3d { w: pb.alloc(cout * cin * k * k * k), b: pb.alloc(cout), cin, cout, k, stride, pad }
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<F>, rng: &mut R) {
        let fan_in = self.cin * self.k * self.k * self.k;
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

    pub fn out_dhw(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let f = |v: usize| (v + 2 * self.pad - self.k) / self.stride + 1;
        (f(d), f(h), f(w))
    }

    fn w2<'a, F: Scalar>(&self, ps: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        ArrayView2::from_shape((self.cout, self.cin * self.k * self.k * self.k), ps.get(self.w))
            .unwrap()
    }

    fn is_3x3_s1(&self) -> bool {
        self.k == 3 && self.stride == 1 && self.pad == 1
    }

    pub fn apply<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array5<F>) -> Array5<F> {
        let (n, cin, d, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv3d input channels");
        let (do_, ho, wo) = self.out_dhw(d, h, w);
        let bias = ps.get(self.b);
        if self.is_3x3_s1() {
            let wts = ps.get(self.w);
            let mut out = Array5::zeros((n, self.cout, do_, ho, wo));
            for i in 0..n {
                conv3_direct(&x.index_axis(Axis(0), i), wts, bias, &mut out.index_axis_mut(Axis(0), i));
            }
            return out;
        }
        let w2 = self.w2(ps);
        let mut out = Array5::zeros((n, self.cout, do_, ho, wo));
        let kk = self.cin * self.k * self.k * self.k;
        let mut patches = Array2::zeros((kk, ho * wo));
        let mut slab = Array2::zeros((self.cout, ho * wo));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            for oz in 0..do_ {
                vol2col_slab(&xi, oz, self.k, self.stride, self.pad, &mut patches);
                general_mat_mul(F::one(), &w2, &patches.view(), F::zero(), &mut slab);
                for (mut row, &b) in slab.rows_mut().into_iter().zip(bias) {
                    for v in row.iter_mut() {
                        *v += b;
                    }
                }
                out.slice_mut(ndarray::s![i, .., oz, .., ..])
                    .assign(&slab.view().into_shape_with_order((self.cout, ho, wo)).unwrap());
            }
        }
        out
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: Array5<F>) -> (Array5<F>, Conv3dCache<F>) {
        let y = self.apply(ps, &x);
        (y, Conv3dCache { x })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &Conv3dCache<F>,
        dout: &Array5<F>,
        grads: &mut ParamStore<F>,
    ) -> Array5<F> {
        let x = &cache.x;
        let (n, _, d, h, w) = x.dim();
        let (_, _, do_, ho, wo) = dout.dim();
        if self.is_3x3_s1() {
            let wts = ps.get(self.w);
            let mut dx = Array5::zeros(x.dim());
            let mut dw = vec![F::zero(); self.w.len];
            let mut db = vec![F::zero(); self.cout];
            for i in 0..n {
                conv3_backward_data(
                    &dout.index_axis(Axis(0), i),
                    wts,
                    self.cin,
                    &mut dx.index_axis_mut(Axis(0), i),
                );
                conv3_backward_filter(
                    &x.index_axis(Axis(0), i),
                    &dout.index_axis(Axis(0), i),
                    &mut dw,
                    &mut db,
                );
            }
            super::layers::add_assign_slice(grads.get_mut(self.w), &dw);
            super::layers::add_assign_slice(grads.get_mut(self.b), &db);
            return dx;
        }
        let kk = self.cin * self.k * self.k * self.k;
        let w2 = self.w2(ps);
        let mut dx = Array5::zeros(x.dim());
        let mut dw = Array2::<F>::zeros((self.cout, kk));
        let mut db = vec![F::zero(); self.cout];
        let mut patches = Array2::zeros((kk, ho * wo));
        let mut dpatches = Array2::zeros((kk, ho * wo));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            for oz in 0..do_ {
                let dout2 = dout
                    .slice(ndarray::s![i, .., oz, .., ..])
                    .to_owned()
                    .into_shape_with_order((self.cout, ho * wo))
                    .unwrap();
                let dout2 = dout2.view();
                vol2col_slab(&xi, oz, self.k, self.stride, self.pad, &mut patches);
                general_mat_mul(F::one(), &dout2, &patches.t(), F::one(), &mut dw);
                for (c, row) in dout2.rows().into_iter().enumerate() {
                    let mut s = F::zero();
                    for &v in row {
                        s += v;
                    }
                    db[c] += s;
                }
                general_mat_mul(F::one(), &w2.t(), &dout2, F::zero(), &mut dpatches);
                col2vol_add_slab(
                    &dpatches.view(),
                    oz,
                    self.k,
                    self.stride,
                    self.pad,
                    (d, h, w),
                    &mut dx.index_axis_mut(Axis(0), i),
                );
            }
        }
        super::layers::add_assign_slice(grads.get_mut(self.w), dw.as_slice().unwrap());
        super::layers::add_assign_slice(grads.get_mut(self.b), &db);
        dx
    }
}

use super::conv2d::tap_range;

/// Direct 3x3x3 stride-1 pad-1 convolution of one `(c, d, h, w)` sample.
fn conv3_direct<F: Scalar>(
    x: &ArrayView4<F>,
    wts: &[F],
    bias: &[F],
    out: &mut ArrayViewMut4<F>,
) {
    let (cin, d, h, w) = x.dim();
    let cout = out.dim().0;
    let plane = h * w;
    let vol = d * plane;
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for co in 0..cout {
        let ochan = &mut os[co * vol..(co + 1) * vol];
        ochan.fill(bias[co]);
        for ci in 0..cin {
            let xchan = &xs[ci * vol..(ci + 1) * vol];
            for kz in 0..3 {
                let (z0, z1) = tap_range(kz, d);
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let wv = wts[(((co * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                        let (x0, x1) = tap_range(kx, w);
                        let sx0 = x0 + kx - 1;
                        let len = x1 - x0;
                        for z in z0..z1 {
                            let sz = z + kz - 1;
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let dst = &mut ochan
                                    [(z * h + y) * w + x0..(z * h + y) * w + x0 + len];
                                let src = &xchan
                                    [(sz * h + sy) * w + sx0..(sz * h + sy) * w + sx0 + len];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv += wv * *sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3_backward_data<F: Scalar>(
    dout: &ArrayView4<F>,
    wts: &[F],
    cin: usize,
    dx: &mut ArrayViewMut4<F>,
) {
    let (cout, d, h, w) = dout.dim();
    let plane = h * w;
    let vol = d * plane;
    let gs = dout.as_slice().unwrap();
    let ds = dx.as_slice_mut().unwrap();
    for ci in 0..cin {
        let dchan = &mut ds[ci * vol..(ci + 1) * vol];
        for co in 0..cout {
            let gchan = &gs[co * vol..(co + 1) * vol];
            for kz in 0..3 {
                let (z0, z1) = tap_range(kz, d);
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let wv = wts
                            [(((co * cin + ci) * 3 + (2 - kz)) * 3 + (2 - ky)) * 3 + (2 - kx)];
                        let (x0, x1) = tap_range(kx, w);
                        let sx0 = x0 + kx - 1;
                        let len = x1 - x0;
                        for z in z0..z1 {
                            let sz = z + kz - 1;
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let dst = &mut dchan
                                    [(z * h + y) * w + x0..(z * h + y) * w + x0 + len];
                                let src = &gchan
                                    [(sz * h + sy) * w + sx0..(sz * h + sy) * w + sx0 + len];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv += wv * *sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3_backward_filter<F: Scalar>(
    x: &ArrayView4<F>,
    dout: &ArrayView4<F>,
    dw: &mut [F],
    db: &mut [F],
) {
    let (cin, d, h, w) = x.dim();
    let cout = dout.dim().0;
    let plane = h * w;
    let vol = d * plane;
    let xs = x.as_slice().unwrap();
    let gs = dout.as_slice().unwrap();
    for co in 0..cout {
        let gchan = &gs[co * vol..(co + 1) * vol];
        let mut bsum = F::zero();
        for &g in gchan.iter() {
            bsum += g;
        }
        db[co] += bsum;
        for ci in 0..cin {
            let xchan = &xs[ci * vol..(ci + 1) * vol];
            for kz in 0..3 {
                let (z0, z1) = tap_range(kz, d);
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = tap_range(kx, w);
                        let sx0 = x0 + kx - 1;
                        let len = x1 - x0;
                        let mut acc = F::zero();
                        for z in z0..z1 {
                            let sz = z + kz - 1;
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let a = &gchan
                                    [(z * h + y) * w + x0..(z * h + y) * w + x0 + len];
                                let b = &xchan
                                    [(sz * h + sy) * w + sx0..(sz * h + sy) * w + sx0 + len];
                                for (g, s) in a.iter().zip(b) {
                                    acc += *g * *s;
                                }
                            }
                        }
                        dw[(((co * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// im2col for one output z-slab of a `(c, d, h, w)` sample.
fn vol2col_slab<F: Scalar>(
    x: &ArrayView4<F>,
    oz: usize,
    k: usize,
    stride: usize,
    pad: usize,
    patches: &mut Array2<F>,
) {
    let (c, d, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let pslice = patches.as_slice_mut().unwrap();
    for ch in 0..c {
        for kz in 0..k {
            let z = (oz * stride + kz) as isize - pad as isize;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ch * k + kz) * k + ky) * k + kx;
                    let base = row * ho * wo;
                    if z < 0 || z >= d as isize {
                        pslice[base..base + ho * wo].fill(F::zero());
                        continue;
                    }
                    let z = z as usize;
                    for oy in 0..ho {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let dst = &mut pslice[base + oy * wo..base + (oy + 1) * wo];
                        if y < 0 || y >= h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let y = y as usize;
                        for (ox, dv) in dst.iter_mut().enumerate() {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            *dv = if xx < 0 || xx >= w as isize {
                                F::zero()
                            } else {
                                x[[ch, z, y, xx as usize]]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2vol_add_slab<F: Scalar>(
    dpatches: &ArrayView2<F>,
    oz: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dhw: (usize, usize, usize),
    dx: &mut ArrayViewMut4<F>,
) {
    let (c, d, h, w) = dx.dim();
    debug_assert_eq!(dhw, (d, h, w));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    for ch in 0..c {
        for kz in 0..k {
            let z = (oz * stride + kz) as isize - pad as isize;
            if z < 0 || z >= d as isize {
                continue;
            }
            let z = z as usize;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ch * k + kz) * k + ky) * k + kx;
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
                            dx[[ch, z, y as usize, xx as usize]] +=
                                dpatches[[row, oy * wo + ox]];
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling on all three spatial dims.
pub fn upsample2x_3d<F: Scalar>(x: &Array5<F>) -> Array5<F> {
    let (n, c, d, h, w) = x.dim();
    let mut out = Array5::zeros((n, c, 2 * d, 2 * h, 2 * w));
    for i in 0..n {
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[i, ch, z, y, xx]];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dxx in 0..2 {
                                    out[[i, ch, 2 * z + dz, 2 * y + dy, 2 * xx + dxx]] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2x_3d_backward<F: Scalar>(dout: &Array5<F>) -> Array5<F> {
    let (n, c, d2, h2, w2) = dout.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut dx = Array5::zeros((n, c, d, h, w));
    for i in 0..n {
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = F::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dxx in 0..2 {
                                    s += dout[[i, ch, 2 * z + dz, 2 * y + dy, 2 * xx + dxx]];
                                }
                            }
                        }
                        dx[[i, ch, z, y, xx]] = s;
                    }
                }
            }
        }
    }
    dx
}

/// Symmetric zero padding of the three spatial dims to multiples of
/// `multiple`; returns offsets `(front, top, left)`.
pub fn pad_to_multiple_3d<F: Scalar>(
    x: &Array5<F>,
    multiple: usize,
) -> (Array5<F>, (usize, usize, usize)) {
    let (n, c, d, h, w) = x.dim();
    let dt = d.div_ceil(multiple) * multiple;
    let ht = h.div_ceil(multiple) * multiple;
    let wt = w.div_ceil(multiple) * multiple;
    if (dt, ht, wt) == (d, h, w) {
        return (x.clone(), (0, 0, 0));
    }
    let off = ((dt - d) / 2, (ht - h) / 2, (wt - w) / 2);
    let mut out = Array5::zeros((n, c, dt, ht, wt));
    out.slice_mut(ndarray::s![.., .., off.0..off.0 + d, off.1..off.1 + h, off.2..off.2 + w])
        .assign(x);
    (out, off)
}

pub fn crop_3d<F: Scalar>(
    x: &Array5<F>,
    off: (usize, usize, usize),
    dhw: (usize, usize, usize),
) -> Array5<F> {
    x.slice(ndarray::s![
        ..,
        ..,
        off.0..off.0 + dhw.0,
        off.1..off.1 + dhw.1,
        off.2..off.2 + dhw.2
    ])
    .to_owned()
}

pub fn crop_3d_backward<F: Scalar>(
    dout: &Array5<F>,
    off: (usize, usize, usize),
    padded_dhw: (usize, usize, usize),
) -> Array5<F> {
    let (n, c, d, h, w) = dout.dim();
    let mut dx = Array5::zeros((n, c, padded_dhw.0, padded_dhw.1, padded_dhw.2));
    dx.slice_mut(ndarray::s![.., .., off.0..off.0 + d, off.1..off.1 + h, off.2..off.2 + w])
        .assign(dout);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{mse, mse_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_direct_convolution() {
        let mut pb = ParamBuilder::new();
        let conv = Conv3d::new(&mut pb, 2, 3, 3, 1, 1);
        let mut ps = ParamStore::<f64>::zeros(pb.total());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        conv.init(&mut ps, &mut rng);
        let x = Array5::from_shape_fn((1, 2, 4, 3, 5), |_| f64::sample_standard_normal(&mut rng));
        let y = conv.apply(&ps, &x);
        assert_eq!(y.dim(), (1, 3, 4, 3, 5));

        let w = ps.get(conv.w);
        let b = ps.get(conv.b);
        let (_, cin, d, h, wd) = x.dim();
        for co in 0..3 {
            for oz in 0..4 {
                for oy in 0..3 {
                    for ox in 0..5 {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let z = oz as isize + kz as isize - 1;
                                        let yy = oy as isize + ky as isize - 1;
                                        let xx = ox as isize + kx as isize - 1;
                                        if z >= 0
                                            && (z as usize) < d
                                            && yy >= 0
                                            && (yy as usize) < h
                                            && xx >= 0
                                            && (xx as usize) < wd
                                        {
                                            let widx = (((co * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                                            acc += w[widx]
                                                * x[[0, ci, z as usize, yy as usize, xx as usize]];
                                        }
                                    }
                                }
                            }
                        }
                        let got = y[[0, co, oz, oy, ox]];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_gradcheck() {
        let mut pb = ParamBuilder::new();
        let conv = Conv3d::new(&mut pb, 1, 2, 3, 1, 1);
        let mut ps = ParamStore::<f64>::zeros(pb.total());
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        conv.init(&mut ps, &mut rng);
        let x = Array5::from_shape_fn((1, 1, 3, 3, 3), |_| f64::sample_standard_normal(&mut rng));
        let target = Array5::from_shape_fn((1, 2, 3, 3, 3), |_| f64::sample_standard_normal(&mut rng));

        let (y, cache) = conv.forward(&ps, x.clone());
        let dout = mse_grad(&y, &target);
        let mut grads = ParamStore::<f64>::zeros(ps.len());
        conv.backward(&ps, &cache, &dout, &mut grads);

        let mut p = ps.as_slice().to_vec();
        for i in 0..p.len() {
            let h = 1e-5;
            let orig = p[i];
            p[i] = orig + h;
            let store = ParamStore::from_vec(p.clone());
            let fp = mse(&conv.apply(&store, &x), &target);
            p[i] = orig - h;
            let store = ParamStore::from_vec(p.clone());
            let fm = mse(&conv.apply(&store, &x), &target);
            p[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.as_slice()[i];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "param {i}");
        }
    }

    #[test]
    fn strided_shape_halves() {
        let mut pb = ParamBuilder::new();
        let conv = Conv3d::new(&mut pb, 1, 2, 3, 2, 1);
        let ps = ParamStore::<f32>::zeros(pb.total());
        let x = Array5::zeros((1, 1, 8, 6, 4));
        assert_eq!(conv.apply(&ps, &x).dim(), (1, 2, 4, 3, 2));
    }
}
