//! Encoder-decoder 2D network with skip connections, group normalization,
//! SiLU activations, and sinusoidal timestep conditioning added to each
//! residual block. The minimal standard denoiser backbone.

use ndarray::{Array2, Array3, Array4, Ix2, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv2d::{
    crop, crop_backward, pad_to_multiple, upsample2x, upsample2x_backward, Conv2d, Conv2dCache,
};
use super::layers::{
    sinusoidal_embedding, spatial_sums, GroupNorm, GroupNormCache, Linear, LinearCache, Silu,
    SiluCache,
};
use super::param::{ParamBuilder, ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unet2dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Number of down/up levels; channels double per level.
    pub depth: usize,
    /// Timestep embedding width; `None` builds an unconditioned network.
    pub temb_dim: Option<usize>,
}

fn to3<F: Scalar>(x: Array4<F>) -> Array3<F> {
    let (n, c, h, w) = x.dim();
    x.into_shape_with_order((n, c, h * w)).unwrap()
}

fn to4<F: Scalar>(x: Array3<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c, _) = x.dim();
    x.into_shape_with_order((n, c, h, w)).unwrap()
}

fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

fn add_channel_bias<F: Scalar>(x: &mut Array4<F>, bias: &Array2<F>) {
    let (n, c, _, _) = x.dim();
    for i in 0..n {
        for ch in 0..c {
            let b = bias[[i, ch]];
            for v in x.slice_mut(ndarray::s![i, ch, .., ..]).iter_mut() {
                *v += b;
            }
        }
    }
}

/// GroupNorm -> SiLU -> conv -> (+ timestep bias) -> GroupNorm -> SiLU ->
/// conv, with an identity or 1x1-conv shortcut.
pub struct ResBlock2d {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Option<Linear>,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub struct ResBlock2dCache<F> {
    hw: (usize, usize),
    gn1: GroupNormCache<F>,
    silu1: SiluCache<F, Ix3>,
    conv1: Conv2dCache<F>,
    temb: Option<LinearCache<F>>,
    gn2: GroupNormCache<F>,
    silu2: SiluCache<F, Ix3>,
    conv2: Conv2dCache<F>,
    skip: Option<Conv2dCache<F>>,
}

impl ResBlock2d {
    fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, temb_dim: Option<usize>) -> Self {
        ResBlock2d {
            gn1: GroupNorm::new(pb, cin),
            conv1: Conv2d::new(pb, cin, cout, 3, 1, 1),
            temb_proj: temb_dim.map(|d| Linear::new(pb, d, cout)),
            gn2: GroupNorm::new(pb, cout),
            conv2: Conv2d::new(pb, cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(pb, cin, cout, 1, 1, 0)),
        }
    }

    fn init<F: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<F>, rng: &mut R) {
        self.gn1.init(ps);
        self.conv1.init(ps, rng);
        if let Some(p) = &self.temb_proj {
            p.init(ps, rng);
        }
        self.gn2.init(ps);
        self.conv2.init(ps, rng);
        if let Some(s) = &self.skip {
            s.init(ps, rng);
        }
    }

    fn apply<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        temb_act: Option<&Array2<F>>,
    ) -> Array4<F> {
        let (_, _, h, w) = x.dim();
        let a = Silu::apply(&self.gn1.apply(ps, &to3(x.clone())));
        let mut c = self.conv1.apply(ps, &to4(a, h, w));
        if let (Some(proj), Some(e)) = (&self.temb_proj, temb_act) {
            add_channel_bias(&mut c, &proj.apply(ps, e));
        }
        let e2 = Silu::apply(&self.gn2.apply(ps, &to3(c)));
        let mut y = self.conv2.apply(ps, &to4(e2, h, w));
        match &self.skip {
            Some(s) => y += &s.apply(ps, x),
            None => y += x,
        }
        y
    }

    fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: Array4<F>,
        temb_act: Option<&Array2<F>>,
    ) -> (Array4<F>, ResBlock2dCache<F>) {
        let (_, _, h, w) = x.dim();
        let skip_in = x.clone();
        let (a, gn1) = self.gn1.forward(ps, to3(x));
        let (b, silu1) = Silu::forward(a);
        let (mut c, conv1) = self.conv1.forward(ps, to4(b, h, w));
        let temb = match (&self.temb_proj, temb_act) {
            (Some(proj), Some(e)) => {
                let (bias, lc) = proj.forward(ps, e.clone());
                add_channel_bias(&mut c, &bias);
                Some(lc)
            }
            _ => None,
        };
        let (d, gn2) = self.gn2.forward(ps, to3(c));
        let (e2, silu2) = Silu::forward(d);
        let (f, conv2) = self.conv2.forward(ps, to4(e2, h, w));
        let (y, skip) = match &self.skip {
            Some(s) => {
                let (sy, sc) = s.forward(ps, skip_in);
                (f + &sy, Some(sc))
            }
            None => (f + &skip_in, None),
        };
        (
            y,
            ResBlock2dCache { hw: (h, w), gn1, silu1, conv1, temb, gn2, silu2, conv2, skip },
        )
    }

    /// Returns `(dx, d_temb_act)`.
    fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &ResBlock2dCache<F>,
        dout: &Array4<F>,
        grads: &mut ParamStore<F>,
    ) -> (Array4<F>, Option<Array2<F>>) {
        let (h, w) = cache.hw;
        let de2 = self.conv2.backward(ps, &cache.conv2, dout, grads);
        let dd = Silu::backward(&cache.silu2, &to3(de2));
        let dc3 = self.gn2.backward(ps, &cache.gn2, &dd, grads);
        let mut dtemb = None;
        if let (Some(proj), Some(lc)) = (&self.temb_proj, &cache.temb) {
            let dbias = spatial_sums(&dc3);
            dtemb = Some(proj.backward(ps, lc, &dbias, grads));
        }
        let db = self.conv1.backward(ps, &cache.conv1, &to4(dc3, h, w), grads);
        let da = Silu::backward(&cache.silu1, &to3(db));
        let mut dx = to4(self.gn1.backward(ps, &cache.gn1, &da, grads), h, w);
        match (&self.skip, &cache.skip) {
            (Some(s), Some(sc)) => {
                dx += &s.backward(ps, sc, dout, grads);
            }
            _ => dx += dout,
        }
        (dx, dtemb)
    }

    fn param_count(&self) -> usize {
        self.gn1.param_count()
            + self.conv1.param_count()
            + self.temb_proj.as_ref().map_or(0, |p| p.param_count())
            + self.gn2.param_count()
            + self.conv2.param_count()
            + self.skip.as_ref().map_or(0, |s| s.param_count())
    }
}

pub struct Unet2d {
    pub cfg: Unet2dConfig,
    temb_mlp: Option<(Linear, Linear)>,
    stem: Conv2d,
    enc: Vec<(ResBlock2d, Conv2d)>,
    mid: ResBlock2d,
    /// Stored deepest level first.
    dec: Vec<(Conv2d, ResBlock2d)>,
    head_gn: GroupNorm,
    head_conv: Conv2d,
    param_len: usize,
}

type TembCache<F> = (LinearCache<F>, SiluCache<F, Ix2>, LinearCache<F>, SiluCache<F, Ix2>);

pub struct Unet2dCache<F> {
    padded_hw: (usize, usize),
    pad_off: (usize, usize),
    temb: Option<TembCache<F>>,
    temb_act: Option<Array2<F>>,
    stem: Conv2dCache<F>,
    enc: Vec<(ResBlock2dCache<F>, Conv2dCache<F>)>,
    mid: ResBlock2dCache<F>,
    dec: Vec<(Conv2dCache<F>, ResBlock2dCache<F>)>,
    head_gn: GroupNormCache<F>,
    head_silu: SiluCache<F, Ix3>,
    head_conv: Conv2dCache<F>,
}

impl Unet2d {
    pub fn build(cfg: Unet2dConfig) -> Self {
        assert!(cfg.depth >= 1 && cfg.base_channels >= 1);
        let mut pb = ParamBuilder::new();
        let temb_mlp = cfg
            .temb_dim
            .map(|d| (Linear::new(&mut pb, d, d), Linear::new(&mut pb, d, d)));
        let base = cfg.base_channels;
        let stem = Conv2d::new(&mut pb, cfg.in_channels, base, 3, 1, 1);
        let mut enc = Vec::new();
        for l in 0..cfg.depth {
            let c = base << l;
            let rb = ResBlock2d::new(&mut pb, c, c, cfg.temb_dim);
            let down = Conv2d::new(&mut pb, c, c * 2, 3, 2, 1);
            enc.push((rb, down));
        }
        let cmid = base << cfg.depth;
        let mid = ResBlock2d::new(&mut pb, cmid, cmid, cfg.temb_dim);
        let mut dec = Vec::new();
        for l in (0..cfg.depth).rev() {
            let c = base << l;
            let up = Conv2d::new(&mut pb, c * 2, c, 3, 1, 1);
            let rb = ResBlock2d::new(&mut pb, 2 * c, c, cfg.temb_dim);
            dec.push((up, rb));
        }
        let head_gn = GroupNorm::new(&mut pb, base);
        let head_conv = Conv2d::new(&mut pb, base, cfg.out_channels, 3, 1, 1);
        let param_len = pb.total();
        Unet2d { cfg, temb_mlp, stem, enc, mid, dec, head_gn, head_conv, param_len }
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    /// Exact parameter count derived from layer shapes; equals `param_len`.
    pub fn param_count(&self) -> usize {
        let temb = self.temb_mlp.as_ref().map_or(0, |(a, b)| a.param_count() + b.param_count());
        let enc: usize = self.enc.iter().map(|(rb, d)| rb.param_count() + d.param_count()).sum();
        let dec: usize = self.dec.iter().map(|(u, rb)| u.param_count() + rb.param_count()).sum();
        temb + self.stem.param_count()
            + enc
            + self.mid.param_count()
            + dec
            + self.head_gn.param_count()
            + self.head_conv.param_count()
    }

    /// Initializes parameters in construction order. `zero_head` zeroes the
    /// output convolution so a fresh model predicts zero noise.
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        &self,
        ps: &mut ParamStore<F>,
        rng: &mut R,
        zero_head: bool,
    ) {
        assert_eq!(ps.len(), self.param_len);
        if let Some((l1, l2)) = &self.temb_mlp {
            l1.init(ps, rng);
            l2.init(ps, rng);
        }
        self.stem.init(ps, rng);
        for (rb, down) in &self.enc {
            rb.init(ps, rng);
            down.init(ps, rng);
        }
        self.mid.init(ps, rng);
        for (up, rb) in &self.dec {
            up.init(ps, rng);
            rb.init(ps, rng);
        }
        self.head_gn.init(ps);
        if zero_head {
            self.head_conv.init_zero(ps);
        } else {
            self.head_conv.init(ps, rng);
        }
    }

    fn temb_act<F: Scalar>(&self, ps: &ParamStore<F>, t: &[usize]) -> Option<Array2<F>> {
        self.temb_mlp.as_ref().map(|(l1, l2)| {
            let dim = self.cfg.temb_dim.unwrap();
            let sin = sinusoidal_embedding::<F>(t, dim);
            Silu::apply(&l2.apply(ps, &Silu::apply(&l1.apply(ps, &sin))))
        })
    }

    /// Inference pass. `t` must have one entry per batch element (ignored
    /// by unconditioned networks).
    pub fn infer<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array4<F>, t: &[usize]) -> Array4<F> {
        let e_act = self.temb_act(ps, t);
        self.infer_inner(ps, x, e_act.as_ref())
    }

    /// Inference with the timestep embedding replaced by a fixed
    /// activation (ablation hook; `None` removes conditioning entirely).
    pub fn infer_with_temb_override<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        e_act: Option<&Array2<F>>,
    ) -> Array4<F> {
        self.infer_inner(ps, x, e_act)
    }

    fn infer_inner<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        e_act: Option<&Array2<F>>,
    ) -> Array4<F> {
        let (_, _, h0, w0) = x.dim();
        let (xp, off) = pad_to_multiple(x, 1 << self.cfg.depth);
        let mut h = self.stem.apply(ps, &xp);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (rb, down) in &self.enc {
            h = rb.apply(ps, &h, e_act);
            skips.push(h.clone());
            h = down.apply(ps, &h);
        }
        h = self.mid.apply(ps, &h, e_act);
        for (i, (up, rb)) in self.dec.iter().enumerate() {
            let l = self.cfg.depth - 1 - i;
            h = up.apply(ps, &upsample2x(&h));
            let cat = concat_channels(&h, &skips[l]);
            h = rb.apply(ps, &cat, e_act);
        }
        let (_, _, hh, ww) = h.dim();
        let y = Silu::apply(&self.head_gn.apply(ps, &to3(h)));
        let y = self.head_conv.apply(ps, &to4(y, hh, ww));
        crop(&y, off, h0, w0)
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: Array4<F>,
        t: &[usize],
    ) -> (Array4<F>, Unet2dCache<F>) {
        let (_, _, h0, w0) = x.dim();
        let (xp, pad_off) = pad_to_multiple(&x, 1 << self.cfg.depth);
        let padded_hw = (xp.dim().2, xp.dim().3);

        let (temb, temb_act) = match &self.temb_mlp {
            Some((l1, l2)) => {
                let dim = self.cfg.temb_dim.unwrap();
                let sin = sinusoidal_embedding::<F>(t, dim);
                let (h1, l1c) = l1.forward(ps, sin);
                let (a1, s1c) = Silu::forward(h1);
                let (h2, l2c) = l2.forward(ps, a1);
                let (e, s2c) = Silu::forward(h2);
                (Some((l1c, s1c, l2c, s2c)), Some(e))
            }
            None => (None, None),
        };

        let (mut h, stem) = self.stem.forward(ps, xp);
        let mut enc_caches = Vec::with_capacity(self.cfg.depth);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (rb, down) in &self.enc {
            let (hr, rbc) = rb.forward(ps, h, temb_act.as_ref());
            skips.push(hr.clone());
            let (hd, dc) = down.forward(ps, hr);
            h = hd;
            enc_caches.push((rbc, dc));
        }
        let (mut h, mid) = self.mid.forward(ps, h, temb_act.as_ref());
        let mut dec_caches = Vec::with_capacity(self.cfg.depth);
        for (i, (up, rb)) in self.dec.iter().enumerate() {
            let l = self.cfg.depth - 1 - i;
            let (hu, upc) = up.forward(ps, upsample2x(&h));
            let cat = concat_channels(&hu, &skips[l]);
            let (hr, rbc) = rb.forward(ps, cat, temb_act.as_ref());
            h = hr;
            dec_caches.push((upc, rbc));
        }
        let (_, _, hh, ww) = h.dim();
        let (g, head_gn) = self.head_gn.forward(ps, to3(h));
        let (a, head_silu) = Silu::forward(g);
        let (y, head_conv) = self.head_conv.forward(ps, to4(a, hh, ww));
        let out = crop(&y, pad_off, h0, w0);
        (
            out,
            Unet2dCache {
                padded_hw,
                pad_off,
                temb,
                temb_act,
                stem,
                enc: enc_caches,
                mid,
                dec: dec_caches,
                head_gn,
                head_silu,
                head_conv,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &Unet2dCache<F>,
        dout: &Array4<F>,
        grads: &mut ParamStore<F>,
    ) {
        let dpad = crop_backward(dout, cache.pad_off, cache.padded_hw);
        let dy = self.head_conv.backward(ps, &cache.head_conv, &dpad, grads);
        let (_, _, hh, ww) = dy.dim();
        let da = Silu::backward(&cache.head_silu, &to3(dy));
        let mut dh = to4(self.head_gn.backward(ps, &cache.head_gn, &da, grads), hh, ww);

        let mut dtemb_act: Option<Array2<F>> = None;
        let add_temb = |acc: &mut Option<Array2<F>>, d: Option<Array2<F>>| {
            if let Some(d) = d {
                match acc {
                    Some(a) => *a += &d,
                    None => *acc = Some(d),
                }
            }
        };

        // skip gradients surface in decoder order, consumed by the encoder
        let mut dskips: Vec<Option<Array4<F>>> = (0..self.cfg.depth).map(|_| None).collect();
        for (i, (up, rb)) in self.dec.iter().enumerate().rev() {
            let l = self.cfg.depth - 1 - i;
            let (upc, rbc) = &cache.dec[i];
            let (dcat, dt) = rb.backward(ps, rbc, &dh, grads);
            add_temb(&mut dtemb_act, dt);
            let c = self.cfg.base_channels << l;
            let dup = dcat.slice(ndarray::s![.., ..c, .., ..]).to_owned();
            dskips[l] = Some(dcat.slice(ndarray::s![.., c.., .., ..]).to_owned());
            let dupin = up.backward(ps, upc, &dup, grads);
            dh = upsample2x_backward(&dupin);
        }

        let (dmid, dt) = self.mid.backward(ps, &cache.mid, &dh, grads);
        add_temb(&mut dtemb_act, dt);
        dh = dmid;

        for (l, (rb, down)) in self.enc.iter().enumerate().rev() {
            let (rbc, dc) = &cache.enc[l];
            let mut dhr = down.backward(ps, dc, &dh, grads);
            dhr += dskips[l].as_ref().expect("skip grad present");
            let (dx, dt) = rb.backward(ps, rbc, &dhr, grads);
            add_temb(&mut dtemb_act, dt);
            dh = dx;
        }
        self.stem.backward(ps, &cache.stem, &dh, grads);

        if let (Some((l1, l2)), Some((l1c, s1c, l2c, s2c)), Some(de)) =
            (&self.temb_mlp, &cache.temb, dtemb_act)
        {
            let _ = &cache.temb_act;
            let dh2 = Silu::backward(s2c, &de);
            let da1 = l2.backward(ps, l2c, &dh2, grads);
            let dsin = Silu::backward(s1c, &da1);
            l1.backward(ps, l1c, &dsin, grads);
        }
    }
}
