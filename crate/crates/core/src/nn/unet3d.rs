//! 3D encoder-decoder network for one-step volume-to-volume inference.
//! Same block structure as the 2D network, without timestep conditioning.

use ndarray::{Array3, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv3d::{
    crop_3d, crop_3d_backward, pad_to_multiple_3d, upsample2x_3d, upsample2x_3d_backward, Array5,
    Conv3d, Conv3dCache,
};
use super::layers::{GroupNorm, GroupNormCache, Silu, SiluCache};
use super::param::{ParamBuilder, ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unet3dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

fn to3<F: Scalar>(x: Array5<F>) -> Array3<F> {
    let (n, c, d, h, w) = x.dim();
    x.into_shape_with_order((n, c, d * h * w)).unwrap()
}

fn to5<F: Scalar>(x: Array3<F>, d: usize, h: usize, w: usize) -> Array5<F> {
    let (n, c, _) = x.dim();
    x.into_shape_with_order((n, c, d, h, w)).unwrap()
}

fn concat_channels<F: Scalar>(a: &Array5<F>, b: &Array5<F>) -> Array5<F> {
    let (n, ca, d, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array5::zeros((n, ca + cb, d, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., .., ..]).assign(b);
    out
}

struct ResBlock3d {
    gn1: GroupNorm,
    conv1: Conv3d,
    gn2: GroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}

pub struct ResBlock3dCache<F> {
    dhw: (usize, usize, usize),
    gn1: GroupNormCache<F>,
    silu1: SiluCache<F, Ix3>,
    conv1: Conv3dCache<F>,
    gn2: GroupNormCache<F>,
    silu2: SiluCache<F, Ix3>,
    conv2: Conv3dCache<F>,
    skip: Option<Conv3dCache<F>>,
}

impl ResBlock3d {
    fn new(pb: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        ResBlock3d {
            gn1: GroupNorm::new(pb, cin),
            conv1: Conv3d::new(pb, cin, cout, 3, 1, 1),
            gn2: GroupNorm::new(pb, cout),
            conv2: Conv3d::new(pb, cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv3d::new(pb, cin, cout, 1, 1, 0)),
        }
    }

    fn init<F: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<F>, rng: &mut R) {
        self.gn1.init(ps);
        self.conv1.init(ps, rng);
        self.gn2.init(ps);
        self.conv2.init(ps, rng);
        if let Some(s) = &self.skip {
            s.init(ps, rng);
        }
    }

    fn apply<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array5<F>) -> Array5<F> {
        let (_, _, d, h, w) = x.dim();
        let a = Silu::apply(&self.gn1.apply(ps, &to3(x.clone())));
        let c = self.conv1.apply(ps, &to5(a, d, h, w));
        let e = Silu::apply(&self.gn2.apply(ps, &to3(c)));
        let mut y = self.conv2.apply(ps, &to5(e, d, h, w));
        match &self.skip {
            Some(s) => y += &s.apply(ps, x),
            None => y += x,
        }
        y
    }

    fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: Array5<F>) -> (Array5<F>, ResBlock3dCache<F>) {
        let (_, _, d, h, w) = x.dim();
        let skip_in = x.clone();
        let (a, gn1) = self.gn1.forward(ps, to3(x));
        let (b, silu1) = Silu::forward(a);
        let (c, conv1) = self.conv1.forward(ps, to5(b, d, h, w));
        let (g, gn2) = self.gn2.forward(ps, to3(c));
        let (e, silu2) = Silu::forward(g);
        let (f, conv2) = self.conv2.forward(ps, to5(e, d, h, w));
        let (y, skip) = match &self.skip {
            Some(s) => {
                let (sy, sc) = s.forward(ps, skip_in);
                (f + &sy, Some(sc))
            }
            None => (f + &skip_in, None),
        };
        (y, ResBlock3dCache { dhw: (d, h, w), gn1, silu1, conv1, gn2, silu2, conv2, skip })
    }

    fn backward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        cache: &ResBlock3dCache<F>,
        dout: &Array5<F>,
        grads: &mut ParamStore<F>,
    ) -> Array5<F> {
        let (d, h, w) = cache.dhw;
        let de = self.conv2.backward(ps, &cache.conv2, dout, grads);
        let dg = Silu::backward(&cache.silu2, &to3(de));
        let dc = self.gn2.backward(ps, &cache.gn2, &dg, grads);
        let db = self.conv1.backward(ps, &cache.conv1, &to5(dc, d, h, w), grads);
        let da = Silu::backward(&cache.silu1, &to3(db));
        let mut dx = to5(self.gn1.backward(ps, &cache.gn1, &da, grads), d, h, w);
        match (&self.skip, &cache.skip) {
            (Some(s), Some(sc)) => dx += &s.backward(ps, sc, dout, grads),
            _ => dx += dout,
        }
        dx
    }

    fn param_count(&self) -> usize {
        self.gn1.param_count()
            + self.conv1.param_count()
            + self.gn2.param_count()
            + self.conv2.param_count()
            + self.skip.as_ref().map_or(0, |s| s.param_count())
    }
}

pub struct Unet3d {
    pub cfg: Unet3dConfig,
    stem: Conv3d,
    enc: Vec<(ResBlock3d, Conv3d)>,
    mid: ResBlock3d,
    dec: Vec<(Conv3d, ResBlock3d)>,
    head_gn: GroupNorm,
    head_conv: Conv3d,
    param_len: usize,
}

pub struct Unet3dCache<F> {
    padded_dhw: (usize, usize, usize),
    pad_off: (usize, usize, usize),
    stem: Conv3dCache<F>,
    enc: Vec<(ResBlock3dCache<F>, Conv3dCache<F>)>,
    mid: ResBlock3dCache<F>,
    dec: Vec<(Conv3dCache<F>, ResBlock3dCache<F>)>,
    head_gn: GroupNormCache<F>,
    head_silu: SiluCache<F, Ix3>,
    head_conv: Conv3dCache<F>,
}

impl Unet3d {
    pub fn build(cfg: Unet3dConfig) -> Self {
        assert!(cfg.depth >= 1 && cfg.base_channels >= 1);
        let mut pb = ParamBuilder::new();
        let base = cfg.base_channels;
        let stem = Conv3d::new(&mut pb, cfg.in_channels, base, 3, 1, 1);
        let mut enc = Vec::new();
        for l in 0..cfg.depth {
            let c = base << l;
            enc.push((ResBlock3d::new(&mut pb, c, c), Conv3d::new(&mut pb, c, c * 2, 3, 2, 1)));
        }
        let cmid = base << cfg.depth;
        let mid = ResBlock3d::new(&mut pb, cmid, cmid);
        let mut dec = Vec::new();
        for l in (0..cfg.depth).rev() {
            let c = base << l;
            dec.push((Conv3d::new(&mut pb, c * 2, c, 3, 1, 1), ResBlock3d::new(&mut pb, 2 * c, c)));
        }
        let head_gn = GroupNorm::new(&mut pb, base);
        let head_conv = Conv3d::new(&mut pb, base, cfg.out_channels, 3, 1, 1);
        let param_len = pb.total();
        Unet3d { cfg, stem, enc, mid, dec, head_gn, head_conv, param_len }
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn param_count(&self) -> usize {
        let enc: usize = self.enc.iter().map(|(rb, d)| rb.param_count() + d.param_count()).sum();
        let dec: usize = self.dec.iter().map(|(u, rb)| u.param_count() + rb.param_count()).sum();
        self.stem.param_count()
            + enc
            + self.mid.param_count()
            + dec
            + self.head_gn.param_count()
            + self.head_conv.param_count()
    }

    pub fn init<F: Scalar, R: Rng + ?Sized>(
        &self,
        ps: &mut ParamStore<F>,
        rng: &mut R,
        zero_head: bool,
    ) {
        assert_eq!(ps.len(), self.param_len);
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

    pub fn infer<F: Scalar>(&self, ps: &ParamStore<F>, x: &Array5<F>) -> Array5<F> {
        let (_, _, d0, h0, w0) = x.dim();
        let (xp, off) = pad_to_multiple_3d(x, 1 << self.cfg.depth);
        let mut h = self.stem.apply(ps, &xp);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (rb, down) in &self.enc {
            h = rb.apply(ps, &h);
            skips.push(h.clone());
            h = down.apply(ps, &h);
        }
        h = self.mid.apply(ps, &h);
        for (i, (up, rb)) in self.dec.iter().enumerate() {
            let l = self.cfg.depth - 1 - i;
            h = up.apply(ps, &upsample2x_3d(&h));
            let cat = concat_channels(&h, &skips[l]);
            h = rb.apply(ps, &cat);
        }
        let (_, _, dd, hh, ww) = h.dim();
        let y = Silu::apply(&self.head_gn.apply(ps, &to3(h)));
        let y = self.head_conv.apply(ps, &to5(y, dd, hh, ww));
        crop_3d(&y, off, (d0, h0, w0))
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: Array5<F>) -> (Array5<F>, Unet3dCache<F>) {
        let (_, _, d0, h0, w0) = x.dim();
        let (xp, pad_off) = pad_to_multiple_3d(&x, 1 << self.cfg.depth);
        let padded_dhw = (xp.dim().2, xp.dim().3, xp.dim().4);
        let (mut h, stem) = self.stem.forward(ps, xp);
        let mut enc_caches = Vec::with_capacity(self.cfg.depth);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (rb, down) in &self.enc {
            let (hr, rbc) = rb.forward(ps, h);
            skips.push(hr.clone());
            let (hd, dc) = down.forward(ps, hr);
            h = hd;
            enc_caches.push((rbc, dc));
        }
        let (mut h, mid) = self.mid.forward(ps, h);
        let mut dec_caches = Vec::with_capacity(self.cfg.depth);
        for (i, (up, rb)) in self.dec.iter().enumerate() {
            let l = self.cfg.depth - 1 - i;
            let (hu, upc) = up.forward(ps, upsample2x_3d(&h));
            let cat = concat_channels(&hu, &skips[l]);
            let (hr, rbc) = rb.forward(ps, cat);
            h = hr;
            dec_caches.push((upc, rbc));
        }
        let (_, _, dd, hh, ww) = h.dim();
        let (g, head_gn) = self.head_gn.forward(ps, to3(h));
        let (a, head_silu) = Silu::forward(g);
        let (y, head_conv) = self.head_conv.forward(ps, to5(a, dd, hh, ww));
        let out = crop_3d(&y, pad_off, (d0, h0, w0));
        (
            out,
            Unet3dCache {
                padded_dhw,
                pad_off,
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
        cache: &Unet3dCache<F>,
        dout: &Array5<F>,
        grads: &mut ParamStore<F>,
    ) {
        let dpad = crop_3d_backward(dout, cache.pad_off, cache.padded_dhw);
        let dy = self.head_conv.backward(ps, &cache.head_conv, &dpad, grads);
        let (_, _, dd, hh, ww) = dy.dim();
        let da = Silu::backward(&cache.head_silu, &to3(dy));
        let mut dh = to5(self.head_gn.backward(ps, &cache.head_gn, &da, grads), dd, hh, ww);

        let mut dskips: Vec<Option<Array5<F>>> = (0..self.cfg.depth).map(|_| None).collect();
        for (i, (up, rb)) in self.dec.iter().enumerate().rev() {
            let l = self.cfg.depth - 1 - i;
            let (upc, rbc) = &cache.dec[i];
            let dcat = rb.backward(ps, rbc, &dh, grads);
            let c = self.cfg.base_channels << l;
            let dup = dcat.slice(ndarray::s![.., ..c, .., .., ..]).to_owned();
            dskips[l] = Some(dcat.slice(ndarray::s![.., c.., .., .., ..]).to_owned());
            let dupin = up.backward(ps, upc, &dup, grads);
            dh = upsample2x_3d_backward(&dupin);
        }

        dh = self.mid.backward(ps, &cache.mid, &dh, grads);

        for (l, (rb, down)) in self.enc.iter().enumerate().rev() {
            let (rbc, dc) = &cache.enc[l];
            let mut dhr = down.backward(ps, dc, &dh, grads);
            dhr += dskips[l].as_ref().expect("skip grad present");
            dh = rb.backward(ps, rbc, &dhr, grads);
        }
        self.stem.backward(ps, &cache.stem, &dh, grads);
    }
}
