//! Dimension-agnostic layers: SiLU, Linear, GroupNorm.
//!
//! Each layer exposes `apply` (pure inference) and `forward`/`backward`
//! (training; `forward` returns the cache `backward` consumes). Backward
//! passes accumulate parameter gradients into a flat gradient buffer and
//! return the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Dimension};
use rand::Rng;

use super::param::{init_uniform_fan_in, ParamBuilder, ParamId, ParamStore, Scalar};

pub fn silu_scalar<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn silu_grad_scalar<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// SiLU activation, `x * sigmoid(x)`.
pub struct Silu;

pub struct SiluCache<F, D: Dimension> {
    x: ndarray::Array<F, D>,
}

impl Silu {
    pub fn apply<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        x.mapv(silu_scalar)
    }

    pub fn forward<F: Scalar, D: Dimension>(
        x: ndarray::Array<F, D>,
    ) -> (ndarray::Array<F, D>, SiluCache<F, D>) {
        let y = Self::apply(&x);
        (y, SiluCache { x })
    }

    pub fn backward<F: Scalar, D: Dimension>(
        cache: &SiluCache<F, D>,
        dout: &ndarray::Array<F, D>,
    ) -> ndarray::Array<F, D> {
        let mut dx = cache.x.mapv(silu_grad_scalar);
        dx.zip_mut_with(dout, |g, &d| *g = *g * d);
        dx
    }
}

/// Fully connected layer, `y = x W^T + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

pub struct LinearCache<F> {
    x: Array2<F>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, din: usize, dout: usize) -> Self {
        Linear { w: pb.alloc(dout * din), b: pb.alloc(dout), din, dout }
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<F>, rng: &mut R) {
        init_uniform_fan_in(ps, self.w, self.din, rng);
        init_uniform_fan_in(ps, self.b, self.din, rng);
    }

    fn w_view<'a, F: Scalar>(&self, ps: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        ArrayView2::from_shape((self.dout, self.din), ps.get(self.w)).unwrap()
    }

    pub fn apply<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let n = x.nrows();
        let w = self.w_view(ps);
        let mut y = Array2::zeros((n, self.dout));
        general_mat_mul(F::one(), x, &w.t(), F::zero(), &mut y);
        let b = ps.get(self.b);
        for mut row in y.rows_mut() {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let y = self.apply(ps, &x);
        (y, LinearCache { x })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &LinearCache<F>,
        dout: &Array2<F>,
        grads: &mut ParamStore<F>,
    ) -> Array2<F> {
        // dW = dout^T x, db = column sums, dx = dout W
        let mut dw = Array2::zeros((self.dout, self.din));
        general_mat_mul(F::one(), &dout.t(), &cache.x.view(), F::zero(), &mut dw);
        let gw = grads.get_mut(self.w);
        for (g, &d) in gw.iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dout.sum_axis(ndarray::Axis(0));
        let gb = grads.get_mut(self.b);
        for (g, &d) in gb.iter_mut().zip(db.iter()) {
            *g += d;
        }
        let w = self.w_view(ps);
        let mut dx = Array2::zeros(cache.x.dim());
        general_mat_mul(F::one(), dout, &w, F::zero(), &mut dx);
        dx
    }

    pub fn param_count(&self) -> usize {
        self.w.len + self.b.len
    }
}

/// Group normalization over `(channels/groups, spatial)` per sample, with
/// per-channel affine.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<F> {
    /// Input reshaped to `(n, c, m)`.
    x: Array3<F>,
    mean: Array2<F>,
    istd: Array2<F>,
}

const GN_EPS: f64 = 1e-5;
const GN_MAX_GROUPS: usize = 8;

/// Largest divisor of `channels` that is at most `GN_MAX_GROUPS`.
pub fn choose_groups(channels: usize) -> usize {
    (1..=GN_MAX_GROUPS.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        GroupNorm {
            gamma: pb.alloc(channels),
            beta: pb.alloc(channels),
            channels,
            groups: choose_groups(channels),
        }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>) {
        for v in ps.get_mut(self.gamma) {
            *v = F::one();
        }
        for v in ps.get_mut(self.beta) {
            *v = F::zero();
        }
    }

    /// Core computation on `(n, c, m)`; returns normalized output and the
    /// per-(sample, group) statistics.
    fn stats<F: Scalar>(&self, x: &Array3<F>) -> (Array2<F>, Array2<F>) {
        let (n, c, m) = x.dim();
        let cg = c / self.groups;
        let group_len = F::from_f64((cg * m) as f64);
        let mut mean = Array2::zeros((n, self.groups));
        let mut istd = Array2::zeros((n, self.groups));
        for i in 0..n {
            for g in 0..self.groups {
                let mut sum = F::zero();
                let mut sq = F::zero();
                for ch in g * cg..(g + 1) * cg {
                    for j in 0..m {
                        let v = x[[i, ch, j]];
                        sum += v;
                        sq += v * v;
                    }
                }
                let mu = sum / group_len;
                let var = sq / group_len - mu * mu;
                mean[[i, g]] = mu;
                istd[[i, g]] = F::one() / (var + F::from_f64(GN_EPS)).sqrt();
            }
        }
        (mean, istd)
    }

    fn normalize<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array3<F>,
        mean: &Array2<F>,
        istd: &Array2<F>,
    ) -> Array3<F> {
        let (n, c, m) = x.dim();
        let cg = c / self.groups;
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut y = Array3::zeros((n, c, m));
        for i in 0..n {
            for ch in 0..c {
                let g = ch / cg;
                let mu = mean[[i, g]];
                let is = istd[[i, g]];
                let ga = gamma[ch];
                let be = beta[ch];
                for j in 0..m {
                    y[[i, ch, j]] = ga * (x[[i, ch, j]] - mu) * is + be;
                }
            }
        }
        y
    }

    pub fn apply<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array3<F>) -> Array3<F> {
        let (mean, istd) = self.stats(x);
        self.normalize(ps, x, &mean, &istd)
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: Array3<F>,
    ) -> (Array3<F>, GroupNormCache<F>) {
        let (mean, istd) = self.stats(&x);
        let y = self.normalize(ps, &x, &mean, &istd);
        (y, GroupNormCache { x, mean, istd })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &GroupNormCache<F>,
        dout: &Array3<F>,
        grads: &mut ParamStore<F>,
    ) -> Array3<F> {
        let (n, c, m) = cache.x.dim();
        let cg = c / self.groups;
        let group_len = F::from_f64((cg * m) as f64);
        let gamma = ps.get(self.gamma).to_vec();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        let mut dx = Array3::zeros((n, c, m));
        for i in 0..n {
            for g in 0..self.groups {
                let mu = cache.mean[[i, g]];
                let is = cache.istd[[i, g]];
                // first pass: affine grads and the two group means
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for ch in g * cg..(g + 1) * cg {
                    for j in 0..m {
                        let xhat = (cache.x[[i, ch, j]] - mu) * is;
                        let d = dout[[i, ch, j]];
                        dgamma[ch] += d * xhat;
                        dbeta[ch] += d;
                        let dxhat = d * gamma[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                let mean_dxhat = sum_dxhat / group_len;
                let mean_dxhat_xhat = sum_dxhat_xhat / group_len;
                for ch in g * cg..(g + 1) * cg {
                    for j in 0..m {
                        let xhat = (cache.x[[i, ch, j]] - mu) * is;
                        let dxhat = dout[[i, ch, j]] * gamma[ch];
                        dx[[i, ch, j]] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
        for (gslot, d) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *gslot += *d;
        }
        for (gslot, d) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *gslot += *d;
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Sinusoidal embedding of integer timesteps: `dim/2` sine and `dim/2`
/// cosine channels with log-spaced frequencies.
pub fn sinusoidal_embedding<F: Scalar>(t: &[usize], dim: usize) -> Array2<F> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let mut out = Array2::zeros((t.len(), dim));
    for (n, &tn) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
            let arg = tn as f64 * freq;
            out[[n, i]] = F::from_f64(arg.sin());
            out[[n, half + i]] = F::from_f64(arg.cos());
        }
    }
    out
}

/// Mean of squared elements; the shared L2 training objective.
pub fn mse<F: Scalar, D: Dimension>(a: &ndarray::Array<F, D>, b: &ndarray::Array<F, D>) -> F {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc += d * d;
    }
    acc / F::from_f64(a.len() as f64)
}

/// Gradient of `mse` with respect to `a`.
pub fn mse_grad<F: Scalar, D: Dimension>(
    a: &ndarray::Array<F, D>,
    b: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let scale = F::from_f64(2.0 / a.len() as f64);
    let mut g = a.clone();
    g.zip_mut_with(b, |x, &y| *x = (*x - y) * scale);
    g
}

/// Sums a vector of gradients in index order (helper for deterministic
/// reductions).
pub fn add_assign_slice<F: Scalar>(acc: &mut [F], part: &[F]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += *p;
    }
}

/// Per-sample column sums used for broadcast biases: returns `[n, c]`
/// sums of `dout[n, c, ...]` over spatial positions.
pub fn spatial_sums<F: Scalar>(dout3: &Array3<F>) -> Array2<F> {
    let (n, c, m) = dout3.dim();
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut s = F::zero();
            for j in 0..m {
                s += dout3[[i, ch, j]];
            }
            out[[i, ch]] = s;
        }
    }
    out
}

pub fn bias_vec<F: Scalar>(ps: &ParamStore<F>, id: ParamId) -> Array1<F> {
    Array1::from_vec(ps.get(id).to_vec())
}
