//! Classifier architectures.
//!
//! `SmallCnn` is the desk-scale default: three conv/pool blocks plus a
//! linear head, minutes to train on CPU. `ResNetLite` is a deeper
//! residual network (2-2-2-2 basic blocks, group-normalized) behind the
//! same interface for paper-scale runs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use unlearn_nn::layers::*;
use unlearn_nn::params::{GradSet, ParamSet};
use unlearn_nn::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierArch {
    SmallCnn,
    ResNetLite,
}

impl ClassifierArch {
    pub fn id(&self) -> &'static str {
        match self {
            ClassifierArch::SmallCnn => "small_cnn",
            ClassifierArch::ResNetLite => "resnet_lite",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s {
            "small_cnn" => Some(ClassifierArch::SmallCnn),
            "resnet_lite" => Some(ClassifierArch::ResNetLite),
            _ => None,
        }
    }
}

/// A classifier network plus its parameters.
#[derive(Clone)]
pub struct ClassifierModel {
    pub arch: ClassifierArch,
    pub num_classes: usize,
    pub in_shape: (usize, usize, usize),
    pub params: ParamSet,
    net: Net,
}

#[derive(Clone)]
enum Net {
    Small(SmallCnnNet),
    Res(ResNetLiteNet),
}

pub enum NetCtx {
    Small(SmallCnnCtx),
    Res(ResNetLiteCtx),
}

impl std::fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("arch", &self.arch)
            .field("num_classes", &self.num_classes)
            .field("in_shape", &self.in_shape)
            .field("num_params", &self.params.num_scalars())
            .finish()
    }
}

impl ClassifierModel {
    pub fn new(
        arch: ClassifierArch,
        num_classes: usize,
        in_shape: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let net = match arch {
            ClassifierArch::SmallCnn => Net::Small(SmallCnnNet::new(
                &mut params,
                rng,
                in_shape,
                num_classes,
            )),
            ClassifierArch::ResNetLite => Net::Res(ResNetLiteNet::new(
                &mut params,
                rng,
                in_shape,
                num_classes,
            )),
        };
        Self {
            arch,
            num_classes,
            in_shape,
            params,
            net,
        }
    }

    pub fn forward(&self, x: &Image) -> (Array2<f32>, NetCtx) {
        match &self.net {
            Net::Small(n) => {
                let (y, c) = n.forward(&self.params, x);
                (y, NetCtx::Small(c))
            }
            Net::Res(n) => {
                let (y, c) = n.forward(&self.params, x);
                (y, NetCtx::Res(c))
            }
        }
    }

    /// Forward pass when gradients are not needed.
    pub fn logits(&self, x: &Image) -> Array2<f32> {
        self.forward(x).0
    }

    pub fn backward(&self, gs: &mut GradSet, ctx: &NetCtx, dlogits: &Array2<f32>) {
        match (&self.net, ctx) {
            (Net::Small(n), NetCtx::Small(c)) => n.backward(&self.params, gs, c, dlogits),
            (Net::Res(n), NetCtx::Res(c)) => n.backward(&self.params, gs, c, dlogits),
            _ => panic!("context does not match architecture"),
        }
    }
}

// ---------------------------------------------------------------------------
// SmallCnn
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct SmallCnnNet {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fc: Linear,
    flat_dim: usize,
}

pub struct SmallCnnCtx {
    c1: Conv2dCtx,
    r1: ReluCtx,
    c2: Conv2dCtx,
    r2: ReluCtx,
    c3: Conv2dCtx,
    r3: ReluCtx,
    fc: LinearCtx,
    pooled_shape: (usize, usize, usize, usize),
}

impl SmallCnnNet {
    fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        in_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Self {
        let (c, h, w) = in_shape;
        assert!(h % 8 == 0 && w % 8 == 0, "input dims must divide by 8");
        let conv1 = Conv2d::new(ps, rng, "conv1", c, 16, 3, 1, 1);
        let conv2 = Conv2d::new(ps, rng, "conv2", 16, 32, 3, 1, 1);
        let conv3 = Conv2d::new(ps, rng, "conv3", 32, 64, 3, 1, 1);
        let flat_dim = 64 * (h / 8) * (w / 8);
        let fc = Linear::new(ps, rng, "fc", flat_dim, num_classes);
        Self {
            conv1,
            conv2,
            conv3,
            fc,
            flat_dim,
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Image) -> (Array2<f32>, SmallCnnCtx) {
        let (y, c1) = self.conv1.forward(ps, x);
        let (y, r1) = relu(&y);
        let y = avg_pool2(&y);
        let (y, c2) = self.conv2.forward(ps, &y);
        let (y, r2) = relu(&y);
        let y = avg_pool2(&y);
        let (y, c3) = self.conv3.forward(ps, &y);
        let (y, r3) = relu(&y);
        let y = avg_pool2(&y);
        let pooled_shape = y.dim();
        let n = pooled_shape.0;
        let flat = y
            .into_shape_with_order((n, self.flat_dim))
            .expect("flatten");
        let (logits, fcx) = self.fc.forward(ps, &flat);
        (
            logits,
            SmallCnnCtx {
                c1,
                r1,
                c2,
                r2,
                c3,
                r3,
                fc: fcx,
                pooled_shape,
            },
        )
    }

    fn backward(&self, ps: &ParamSet, gs: &mut GradSet, ctx: &SmallCnnCtx, dlogits: &Array2<f32>) {
        let dflat = self.fc.backward(ps, gs, &ctx.fc, dlogits);
        let dpool = dflat
            .into_shape_with_order(ctx.pooled_shape)
            .expect("unflatten");
        let dy = avg_pool2_backward(&dpool);
        let dy = relu_backward(&ctx.r3, &dy);
        let dy = self.conv3.backward(ps, gs, &ctx.c3, &dy);
        let dy = avg_pool2_backward(&dy);
        let dy = relu_backward(&ctx.r2, &dy);
        let dy = self.conv2.backward(ps, gs, &ctx.c2, &dy);
        let dy = avg_pool2_backward(&dy);
        let dy = relu_backward(&ctx.r1, &dy);
        let _ = self.conv1.backward(ps, gs, &ctx.c1, &dy);
    }
}

// ---------------------------------------------------------------------------
// ResNetLite
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct BasicBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    down: Option<Conv2d>, // 1x1 stride-matching projection for the skip
}

struct BasicBlockCtx {
    g1: GroupNormCtx,
    s1: ReluCtx,
    c1: Conv2dCtx,
    g2: GroupNormCtx,
    s2: ReluCtx,
    c2: Conv2dCtx,
    d: Option<Conv2dCtx>,
}

impl BasicBlock {
    fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Self {
        let gn1 = GroupNorm::new(ps, &format!("{name}.gn1"), groups_for(in_c), in_c);
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1);
        let gn2 = GroupNorm::new(ps, &format!("{name}.gn2"), groups_for(out_c), out_c);
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1);
        let down = if stride != 1 || in_c != out_c {
            Some(Conv2d::new(
                ps,
                rng,
                &format!("{name}.down"),
                in_c,
                out_c,
                1,
                stride,
                0,
            ))
        } else {
            None
        };
        Self {
            gn1,
            conv1,
            gn2,
            conv2,
            down,
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Image) -> (Image, BasicBlockCtx) {
        // pre-activation residual block
        let (h, g1) = self.gn1.forward(ps, x);
        let (h, s1) = relu(&h);
        let (skip, d) = match &self.down {
            Some(dc) => {
                let (s, c) = dc.forward(ps, &h);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let (h, c1) = self.conv1.forward(ps, &h);
        let (h, g2) = self.gn2.forward(ps, &h);
        let (h, s2) = relu(&h);
        let (h, c2) = self.conv2.forward(ps, &h);
        let y = &h + &skip;
        (
            y,
            BasicBlockCtx {
                g1,
                s1,
                c1,
                g2,
                s2,
                c2,
                d,
            },
        )
    }

    fn backward(&self, ps: &ParamSet, gs: &mut GradSet, ctx: &BasicBlockCtx, dy: &Image) -> Image {
        let dh = self.conv2.backward(ps, gs, &ctx.c2, dy);
        let dh = relu_backward(&ctx.s2, &dh);
        let dh = self.gn2.backward(ps, gs, &ctx.g2, &dh);
        let dh = self.conv1.backward(ps, gs, &ctx.c1, &dh);
        match (&self.down, &ctx.d) {
            (Some(dc), Some(dctx)) => {
                // skip branch consumed the post-activation h, so both paths
                // flow back through gn1/relu together
                let dskip = dc.backward(ps, gs, dctx, dy);
                let dsum = &dh + &dskip;
                let dsum = relu_backward(&ctx.s1, &dsum);
                self.gn1.backward(ps, gs, &ctx.g1, &dsum)
            }
            _ => {
                let dpre = relu_backward(&ctx.s1, &dh);
                let dx = self.gn1.backward(ps, gs, &ctx.g1, &dpre);
                dx + dy
            }
        }
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
struct ResNetLiteNet {
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    head_gn: GroupNorm,
    fc: Linear,
    final_c: usize,
}

pub struct ResNetLiteCtx {
    stem: Conv2dCtx,
    blocks: Vec<BasicBlockCtx>,
    head_g: GroupNormCtx,
    head_r: ReluCtx,
    fc: LinearCtx,
    spatial: (usize, usize),
}

impl ResNetLiteNet {
    fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        in_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Self {
        let (c, _h, _w) = in_shape;
        let widths = [32usize, 64, 128, 256];
        let stem = Conv2d::new(ps, rng, "stem", c, widths[0], 3, 1, 1);
        let mut blocks = Vec::new();
        let mut prev = widths[0];
        for (stage, &wd) in widths.iter().enumerate() {
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    ps,
                    rng,
                    &format!("s{stage}b{b}"),
                    prev,
                    wd,
                    stride,
                ));
                prev = wd;
            }
        }
        let head_gn = GroupNorm::new(ps, "head.gn", groups_for(prev), prev);
        let fc = Linear::new(ps, rng, "head.fc", prev, num_classes);
        Self {
            stem,
            blocks,
            head_gn,
            fc,
            final_c: prev,
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Image) -> (Array2<f32>, ResNetLiteCtx) {
        let (mut h, stem) = self.stem.forward(ps, x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (nh, c) = b.forward(ps, &h);
            h = nh;
            blocks.push(c);
        }
        let (h, head_g) = self.head_gn.forward(ps, &h);
        let (h, head_r) = relu(&h);
        let (n, cdim, hh, ww) = h.dim();
        // global average pool
        let mut feat = Array2::<f32>::zeros((n, cdim));
        let scale = 1.0 / (hh * ww) as f32;
        for ni in 0..n {
            for ci in 0..cdim {
                let mut acc = 0.0;
                for i in 0..hh {
                    for j in 0..ww {
                        acc += h[[ni, ci, i, j]];
                    }
                }
                feat[[ni, ci]] = acc * scale;
            }
        }
        let (logits, fcx) = self.fc.forward(ps, &feat);
        (
            logits,
            ResNetLiteCtx {
                stem,
                blocks,
                head_g,
                head_r,
                fc: fcx,
                spatial: (hh, ww),
            },
        )
    }

    fn backward(
        &self,
        ps: &ParamSet,
        gs: &mut GradSet,
        ctx: &ResNetLiteCtx,
        dlogits: &Array2<f32>,
    ) {
        let dfeat = self.fc.backward(ps, gs, &ctx.fc, dlogits);
        let (hh, ww) = ctx.spatial;
        let n = dfeat.dim().0;
        let scale = 1.0 / (hh * ww) as f32;
        let mut dh = Image::zeros((n, self.final_c, hh, ww));
        for ni in 0..n {
            for ci in 0..self.final_c {
                let g = dfeat[[ni, ci]] * scale;
                for i in 0..hh {
                    for j in 0..ww {
                        dh[[ni, ci, i, j]] = g;
                    }
                }
            }
        }
        let dh = relu_backward(&ctx.head_r, &dh);
        let mut dh = self.head_gn.backward(ps, gs, &ctx.head_g, &dh);
        for (b, c) in self.blocks.iter().zip(ctx.blocks.iter()).rev() {
            dh = b.backward(ps, gs, c, &dh);
        }
        let _ = self.stem.backward(ps, gs, &ctx.stem, &dh);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_nn::rng::rng_from_seed;

    #[test]
    fn small_cnn_shapes_and_determinism() {
        let mut rng = rng_from_seed(0);
        let m = ClassifierModel::new(ClassifierArch::SmallCnn, 10, (3, 32, 32), &mut rng);
        let x = Image::from_elem((4, 3, 32, 32), 0.5);
        let y = m.logits(&x);
        assert_eq!(y.dim(), (4, 10));
        assert!(y.iter().all(|v| v.is_finite()));
        let y2 = m.logits(&x);
        assert_eq!(y, y2);
    }

    #[test]
    fn resnet_lite_forward_backward_runs() {
        let mut rng = rng_from_seed(1);
        let m = ClassifierModel::new(ClassifierArch::ResNetLite, 10, (3, 32, 32), &mut rng);
        let x = Image::from_elem((2, 3, 32, 32), 0.25);
        let (y, ctx) = m.forward(&x);
        assert_eq!(y.dim(), (2, 10));
        assert!(y.iter().all(|v| v.is_finite()));
        let mut gs = GradSet::zeros_like(&m.params);
        let dl = Array2::<f32>::from_elem((2, 10), 0.1);
        m.backward(&mut gs, &ctx, &dl);
    }

    #[test]
    fn resnet_block_gradient_spot_check() {
        // finite differences through one strided residual block
        let mut rng = rng_from_seed(2);
        let mut ps = ParamSet::new();
        let blk = BasicBlock::new(&mut ps, &mut rng, "b", 4, 8, 2);
        let mut x = Image::zeros((1, 4, 6, 6));
        use rand::Rng as _;
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (y, ctx) = blk.forward(&ps, &x);
        let probe: Vec<f32> = (0..y.len()).map(|i| ((i % 7) as f32 - 3.0) * 0.2).collect();
        let dy = Image::from_shape_vec(y.raw_dim(), probe.clone()).unwrap();
        let mut gs = GradSet::zeros_like(&ps);
        let dx = blk.backward(&ps, &mut gs, &ctx, &dy);

        let loss = |xx: &Image| {
            let (y, _) = blk.forward(&ps, xx);
            y.iter()
                .zip(probe.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
        };
        let eps = 1e-2f32;
        for flat in (0..x.len()).step_by(17) {
            let orig = x.as_slice().unwrap()[flat];
            x.as_slice_mut().unwrap()[flat] = orig + eps;
            let lp = loss(&x);
            x.as_slice_mut().unwrap()[flat] = orig - eps;
            let lm = loss(&x);
            x.as_slice_mut().unwrap()[flat] = orig;
            let numeric = (lp - lm) / (2.0 * eps as f64);
            let analytic = dx.as_slice().unwrap()[flat] as f64;
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(rel < 3e-2, "flat {flat}: {analytic} vs {numeric}");
        }
    }
}
