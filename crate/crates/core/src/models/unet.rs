//! Small class- and timestep-conditioned U-Net for epsilon prediction.
//!
//! Two downsampling levels with skip connections, group-normalized residual
//! blocks, sinusoidal timestep embedding plus a learned class table with a
//! reserved null token for classifier-free guidance.

use unlearn_nn::layers::*;
use unlearn_nn::params::{GradSet, ParamSet};
use unlearn_nn::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct UnetConfig {
    pub in_c: usize,
    pub hw: usize,
    pub base: usize,
    pub emb_dim: usize,
    /// Real classes; the embedding table reserves one extra null slot.
    pub num_classes: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_c: 1,
            hw: 16,
            base: 16,
            emb_dim: 64,
            num_classes: 10,
        }
    }
}

/// Residual block with an additive (sample, channel) conditioning bias.
#[derive(Clone)]
struct ResBlockT {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
}

struct ResBlockTCtx {
    g1: GroupNormCtx,
    s1: SiluCtx<ndarray::Ix4>,
    c1: Conv2dCtx,
    ep: LinearCtx,
    g2: GroupNormCtx,
    s2: SiluCtx<ndarray::Ix4>,
    c2: Conv2dCtx,
}

impl ResBlockT {
    fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, c: usize, emb_dim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), groups_for(c), c),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), c, c, 3, 1, 1),
            emb_proj: Linear::new(ps, rng, &format!("{name}.emb"), emb_dim, c),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), groups_for(c), c),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), c, c, 3, 1, 1),
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Image, emb: &Feat) -> (Image, ResBlockTCtx) {
        let (h, g1) = self.gn1.forward(ps, x);
        let (h, s1) = silu(&h);
        let (mut h, c1) = self.conv1.forward(ps, &h);
        let (bias, ep) = self.emb_proj.forward(ps, emb);
        add_channel_bias(&mut h, &bias);
        let (h2, g2) = self.gn2.forward(ps, &h);
        let (h2, s2) = silu(&h2);
        let (h2, c2) = self.conv2.forward(ps, &h2);
        let y = &h2 + x;
        (
            y,
            ResBlockTCtx {
                g1,
                s1,
                c1,
                ep,
                g2,
                s2,
                c2,
            },
        )
    }

    /// Returns (dx, demb).
    fn backward(
        &self,
        ps: &ParamSet,
        gs: &mut GradSet,
        ctx: &ResBlockTCtx,
        dy: &Image,
    ) -> (Image, Feat) {
        let dh2 = self.conv2.backward(ps, gs, &ctx.c2, dy);
        let dh2 = silu_backward(&ctx.s2, &dh2);
        let dh = self.gn2.backward(ps, gs, &ctx.g2, &dh2);
        let dbias = channel_bias_backward(&dh);
        let demb = self.emb_proj.backward(ps, gs, &ctx.ep, &dbias);
        let dpre = self.conv1.backward(ps, gs, &ctx.c1, &dh);
        let dpre = silu_backward(&ctx.s1, &dpre);
        let dx_main = self.gn1.backward(ps, gs, &ctx.g1, &dpre);
        (dx_main + dy, demb)
    }
}

fn groups_for(c: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if c % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Clone)]
pub struct CondUnet {
    pub cfg: UnetConfig,
    class_emb: Embedding,
    t_lin: Linear,
    stem: Conv2d,
    rb_down1: ResBlockT,
    down1: Conv2d,
    rb_down2: ResBlockT,
    down2: Conv2d,
    rb_mid: ResBlockT,
    up1: Conv2d,
    fuse1: Conv2d,
    rb_up1: ResBlockT,
    up2: Conv2d,
    fuse2: Conv2d,
    rb_up2: ResBlockT,
    out_gn: GroupNorm,
    out_conv: Conv2d,
}

pub struct CondUnetCtx {
    temb_raw: Feat,
    tl: LinearCtx,
    ts: SiluCtx<ndarray::Ix2>,
    ce: EmbeddingCtx,
    stem: Conv2dCtx,
    rb_d1: ResBlockTCtx,
    d1: Conv2dCtx,
    rb_d2: ResBlockTCtx,
    d2: Conv2dCtx,
    rb_m: ResBlockTCtx,
    u1: Conv2dCtx,
    f1: Conv2dCtx,
    rb_u1: ResBlockTCtx,
    u2: Conv2dCtx,
    f2: Conv2dCtx,
    rb_u2: ResBlockTCtx,
    og: GroupNormCtx,
    os: SiluCtx<ndarray::Ix4>,
    oc: Conv2dCtx,
    c0: usize,
    c1w: usize,
}

impl CondUnet {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, cfg: UnetConfig) -> Self {
        assert!(cfg.hw % 4 == 0, "spatial size must divide by 4");
        let (c0, c1, c2) = (cfg.base, cfg.base * 2, cfg.base * 4);
        let e = cfg.emb_dim;
        Self {
            class_emb: Embedding::new(ps, rng, "cls", cfg.num_classes + 1, e),
            t_lin: Linear::new(ps, rng, "temb", e, e),
            stem: Conv2d::new(ps, rng, "stem", cfg.in_c, c0, 3, 1, 1),
            rb_down1: ResBlockT::new(ps, rng, "rbd1", c0, e),
            down1: Conv2d::new(ps, rng, "down1", c0, c1, 3, 2, 1),
            rb_down2: ResBlockT::new(ps, rng, "rbd2", c1, e),
            down2: Conv2d::new(ps, rng, "down2", c1, c2, 3, 2, 1),
            rb_mid: ResBlockT::new(ps, rng, "rbm", c2, e),
            up1: Conv2d::new(ps, rng, "up1", c2, c1, 3, 1, 1),
            fuse1: Conv2d::new(ps, rng, "fuse1", 2 * c1, c1, 3, 1, 1),
            rb_up1: ResBlockT::new(ps, rng, "rbu1", c1, e),
            up2: Conv2d::new(ps, rng, "up2", c1, c0, 3, 1, 1),
            fuse2: Conv2d::new(ps, rng, "fuse2", 2 * c0, c0, 3, 1, 1),
            rb_up2: ResBlockT::new(ps, rng, "rbu2", c0, e),
            out_gn: GroupNorm::new(ps, "out.gn", groups_for(c0), c0),
            out_conv: Conv2d::new(ps, rng, "out.conv", c0, cfg.in_c, 3, 1, 1),
            cfg,
        }
    }

    pub fn null_token(&self) -> usize {
        self.cfg.num_classes
    }

    /// Conditioning embedding: silu(W·sinusoidal(t)) + class_table[y].
    fn embed(&self, ps: &ParamSet, ts: &[f32], ys: &[usize]) -> (Feat, Feat, LinearCtx, SiluCtx<ndarray::Ix2>, EmbeddingCtx) {
        let temb_raw = timestep_embedding(ts, self.cfg.emb_dim);
        let (tl_out, tl) = self.t_lin.forward(ps, &temb_raw);
        let (tact, tsx) = silu(&tl_out);
        let (cvec, ce) = self.class_emb.forward(ps, ys);
        let emb = &tact + &cvec;
        (emb, temb_raw, tl, tsx, ce)
    }

    /// Epsilon prediction for x_t under condition y at timestep t.
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Image,
        ts: &[f32],
        ys: &[usize],
    ) -> (Image, CondUnetCtx) {
        let (emb, temb_raw, tl, tsx, ce) = self.embed(ps, ts, ys);
        let (s, stem) = self.stem.forward(ps, x);
        let (a, rb_d1) = self.rb_down1.forward(ps, &s, &emb);
        let (d1o, d1) = self.down1.forward(ps, &a);
        let (b, rb_d2) = self.rb_down2.forward(ps, &d1o, &emb);
        let (d2o, d2) = self.down2.forward(ps, &b);
        let (m, rb_m) = self.rb_mid.forward(ps, &d2o, &emb);
        let (u1o, u1) = self.up1.forward(ps, &upsample2(&m));
        let (f1o, f1) = self.fuse1.forward(ps, &concat_channels(&u1o, &b));
        let (g1, rb_u1) = self.rb_up1.forward(ps, &f1o, &emb);
        let (u2o, u2) = self.up2.forward(ps, &upsample2(&g1));
        let (f2o, f2) = self.fuse2.forward(ps, &concat_channels(&u2o, &a));
        let (g2, rb_u2) = self.rb_up2.forward(ps, &f2o, &emb);
        let (o, og) = self.out_gn.forward(ps, &g2);
        let (o, os) = silu(&o);
        let (eps, oc) = self.out_conv.forward(ps, &o);
        (
            eps,
            CondUnetCtx {
                temb_raw,
                tl,
                ts: tsx,
                ce,
                stem,
                rb_d1,
                d1,
                rb_d2,
                d2,
                rb_m,
                u1,
                f1,
                rb_u1,
                u2,
                f2,
                rb_u2,
                og,
                os,
                oc,
                c0: self.cfg.base,
                c1w: self.cfg.base * 2,
            },
        )
    }

    /// Forward without keeping the context.
    pub fn infer(&self, ps: &ParamSet, x: &Image, ts: &[f32], ys: &[usize]) -> Image {
        self.forward(ps, x, ts, ys).0
    }

    pub fn backward(&self, ps: &ParamSet, gs: &mut GradSet, ctx: &CondUnetCtx, deps: &Image) {
        let mut demb: Option<Feat> = None;
        let add_demb = |d: Feat, acc: &mut Option<Feat>| match acc {
            Some(a) => *a += &d,
            None => *acc = Some(d),
        };

        let do_ = self.out_conv.backward(ps, gs, &ctx.oc, deps);
        let do_ = silu_backward(&ctx.os, &do_);
        let dg2 = self.out_gn.backward(ps, gs, &ctx.og, &do_);
        let (df2o, de) = self.rb_up2.backward(ps, gs, &ctx.rb_u2, &dg2);
        add_demb(de, &mut demb);
        let dcat2 = self.fuse2.backward(ps, gs, &ctx.f2, &df2o);
        let (du2o, da_skip) = split_channels(&dcat2, ctx.c0);
        let dg1_up = self.up2.backward(ps, gs, &ctx.u2, &du2o);
        let dg1 = upsample2_backward(&dg1_up);
        let (df1o, de) = self.rb_up1.backward(ps, gs, &ctx.rb_u1, &dg1);
        add_demb(de, &mut demb);
        let dcat1 = self.fuse1.backward(ps, gs, &ctx.f1, &df1o);
        let (du1o, db_skip) = split_channels(&dcat1, ctx.c1w);
        let dm_up = self.up1.backward(ps, gs, &ctx.u1, &du1o);
        let dm = upsample2_backward(&dm_up);
        let (dd2o, de) = self.rb_mid.backward(ps, gs, &ctx.rb_m, &dm);
        add_demb(de, &mut demb);
        let db_main = self.down2.backward(ps, gs, &ctx.d2, &dd2o);
        let db = &db_main + &db_skip;
        let (dd1o, de) = self.rb_down2.backward(ps, gs, &ctx.rb_d2, &db);
        add_demb(de, &mut demb);
        let da_main = self.down1.backward(ps, gs, &ctx.d1, &dd1o);
        let da = &da_main + &da_skip;
        let (ds, de) = self.rb_down1.backward(ps, gs, &ctx.rb_d1, &da);
        add_demb(de, &mut demb);
        let _dx = self.stem.backward(ps, gs, &ctx.stem, &ds);

        // conditioning path
        let demb = demb.expect("at least one block");
        self.class_emb.backward(gs, &ctx.ce, &demb);
        let dtact = silu_backward(&ctx.ts, &demb);
        let _dtemb_raw = self.t_lin.backward(ps, gs, &ctx.tl, &dtact);
        let _ = &ctx.temb_raw; // fixed embedding, no gradient beyond this point
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_nn::rng::rng_from_seed;

    #[test]
    fn unet_shapes_and_conditioning_sensitivity() {
        let mut rng = rng_from_seed(0);
        let mut ps = ParamSet::new();
        let unet = CondUnet::new(&mut ps, &mut rng, UnetConfig::default());
        let x = Image::from_elem((2, 1, 16, 16), 0.1);
        let eps_a = unet.infer(&ps, &x, &[10.0, 10.0], &[3, 3]);
        assert_eq!(eps_a.dim(), (2, 1, 16, 16));
        assert!(eps_a.iter().all(|v| v.is_finite()));
        let eps_b = unet.infer(&ps, &x, &[10.0, 10.0], &[4, 4]);
        let diff: f32 = (&eps_a - &eps_b).iter().map(|v| v.abs()).sum();
        assert!(diff > 0.0, "class conditioning must affect the output");
        let eps_c = unet.infer(&ps, &x, &[90.0, 90.0], &[3, 3]);
        let diff_t: f32 = (&eps_a - &eps_c).iter().map(|v| v.abs()).sum();
        assert!(diff_t > 0.0, "timestep must affect the output");
    }

    #[test]
    fn unet_gradient_spot_check() {
        let mut rng = rng_from_seed(1);
        let mut ps = ParamSet::new();
        let cfg = UnetConfig {
            in_c: 1,
            hw: 8,
            base: 4,
            emb_dim: 8,
            num_classes: 3,
        };
        let unet = CondUnet::new(&mut ps, &mut rng, cfg);
        let mut x = Image::zeros((2, 1, 8, 8));
        use rand::Rng as _;
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let ts = [3.0f32, 7.0];
        let ys = [1usize, 3]; // one real class, one null token
        let (y, ctx) = unet.forward(&ps, &x, &ts, &ys);
        let probe: Vec<f32> = (0..y.len()).map(|i| ((i % 5) as f32 - 2.0) * 0.3).collect();
        let dy = Image::from_shape_vec(y.raw_dim(), probe.clone()).unwrap();
        let mut gs = GradSet::zeros_like(&ps);
        unet.backward(&ps, &mut gs, &ctx, &dy);

        let loss = |ps: &ParamSet| -> f64 {
            let y = unet.infer(ps, &x, &ts, &ys);
            y.iter()
                .zip(probe.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let eps = 1e-2f32;
        // probe a few scalars in every parameter tensor
        for idx in 0..ps.len() {
            let id = unlearn_nn::ParamId(idx);
            let n = ps.get(id).len();
            for flat in (0..n).step_by((n / 3).max(1)) {
                let orig = ps.get(id).as_slice().unwrap()[flat];
                ps.get_mut(id).as_slice_mut().unwrap()[flat] = orig + eps;
                let lp = loss(&ps);
                ps.get_mut(id).as_slice_mut().unwrap()[flat] = orig - eps;
                let lm = loss(&ps);
                ps.get_mut(id).as_slice_mut().unwrap()[flat] = orig;
                let numeric = (lp - lm) / (2.0 * eps as f64);
                let analytic = gs.get(id).as_slice().unwrap()[flat] as f64;
                let rel =
                    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(5e-2);
                assert!(
                    rel < 6e-2,
                    "param {} [{flat}]: {analytic} vs {numeric}",
                    ps.names()[idx]
                );
            }
        }
    }
}
