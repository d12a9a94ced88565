//! Layers with explicit forward/backward passes.
//!
//! Each layer's `forward` returns the output together with a context struct
//! holding whatever the backward pass needs. Models thread these contexts
//! through manually; there is no tape or graph. Backward passes accumulate
//! parameter gradients into a [`GradSet`] and return the gradient with
//! respect to the layer input.

use crate::init;
use crate::params::{GradSet, ParamId, ParamSet};
use crate::rng::Rng;
use ndarray::{Array2, Array4, ArrayView2, Axis};

pub type Image = Array4<f32>; // (N, C, H, W)
pub type Feat = Array2<f32>; // (N, F)

fn as2(ps: &ParamSet, id: ParamId, rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ps.get(id)
        .view()
        .into_shape_with_order((rows, cols))
        .expect("param reshape")
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution, NCHW layout, square kernel, implemented as im2col + gemm.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCtx {
    cols: Array2<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.register(
            &format!("{name}.w"),
            init::kaiming_uniform(rng, &[out_c, in_c, k, k], fan_in),
        );
        let b = ps.register(&format!("{name}.b"), init::zeros(&[out_c]));
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, ps: &ParamSet, x: &Image) -> (Image, Conv2dCtx) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let w2 = as2(ps, self.w, self.out_c, self.in_c * self.k * self.k);
        let mut y2 = w2.dot(&cols); // (out_c, n*oh*ow)
        let bias = ps.get(self.b);
        for (oc, mut row) in y2.axis_iter_mut(Axis(0)).enumerate() {
            let b = bias[[oc]];
            row.mapv_inplace(|v| v + b);
        }
        let y = rows_to_nchw(&y2, n, self.out_c, oh, ow);
        (
            y,
            Conv2dCtx {
                cols,
                in_shape: (n, c, h, w),
            },
        )
    }

    pub fn backward(&self, ps: &ParamSet, gs: &mut GradSet, ctx: &Conv2dCtx, dy: &Image) -> Image {
        let (n, _c, h, w) = ctx.in_shape;
        let (_, oc, oh, ow) = dy.dim();
        assert_eq!(oc, self.out_c);
        let dy2 = nchw_to_rows(dy); // (out_c, n*oh*ow)

        // dW = dY2 · colsᵀ, reshaped back to (out_c, in_c, k, k)
        let dw2 = dy2.dot(&ctx.cols.t());
        {
            let g = gs.get_mut(self.w);
            let mut g2 = g
                .view_mut()
                .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
                .expect("grad reshape");
            g2 += &dw2;
        }
        {
            let g = gs.get_mut(self.b);
            for (ocx, row) in dy2.axis_iter(Axis(0)).enumerate() {
                g[[ocx]] += row.sum();
            }
        }

        let w2 = as2(ps, self.w, self.out_c, self.in_c * self.k * self.k);
        let dcols = w2.t().dot(&dy2); // (in_c*k*k, n*oh*ow)
        col2im(
            &dcols,
            (n, self.in_c, h, w),
            self.k,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }
}

/// Unfold x into a (C*k*k, N*OH*OW) matrix. Zero padding is implicit: padded
/// positions stay zero.
fn im2col(x: &Image, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let col_w = n * oh * ow;
    let mut cols = Array2::<f32>::zeros((c * k * k, col_w));
    let xs = x.as_slice().expect("x contiguous");
    let cs = cols.as_slice_mut().expect("cols contiguous");

    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_off = row * col_w;
                for ni in 0..n {
                    for ohi in 0..oh {
                        let hi = (ohi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let dst = row_off + (ni * oh + ohi) * ow;
                        let src = ((ni * c + ci) * h + hi as usize) * w;
                        if stride == 1 {
                            let wj0 = kj as isize - pad as isize;
                            let start = (-wj0).max(0) as usize;
                            let end = ((w as isize - wj0).min(ow as isize)).max(0) as usize;
                            if start < end {
                                let s0 = (src as isize + wj0 + start as isize) as usize;
                                cs[dst + start..dst + end]
                                    .copy_from_slice(&xs[s0..s0 + (end - start)]);
                            }
                        } else {
                            for owi in 0..ow {
                                let wi = (owi * stride + kj) as isize - pad as isize;
                                if wi >= 0 && wi < w as isize {
                                    cs[dst + owi] = xs[src + wi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C*k*k, N*OH*OW) gradient matrix back onto the input, accumulating
/// overlapping contributions.
fn col2im(
    dcols: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Image {
    let (n, c, h, w) = in_shape;
    let col_w = n * oh * ow;
    let mut dx = Image::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("dcols contiguous");
    let xs = dx.as_slice_mut().expect("dx contiguous");

    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_off = row * col_w;
                for ni in 0..n {
                    for ohi in 0..oh {
                        let hi = (ohi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let src = row_off + (ni * oh + ohi) * ow;
                        let dst = ((ni * c + ci) * h + hi as usize) * w;
                        for owi in 0..ow {
                            let wi = (owi * stride + kj) as isize - pad as isize;
                            if wi >= 0 && wi < w as isize {
                                xs[dst + wi as usize] += ds[src + owi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn rows_to_nchw(y2: &Array2<f32>, n: usize, c: usize, h: usize, w: usize) -> Image {
    let hw = h * w;
    let mut y = Image::zeros((n, c, h, w));
    let ys = y.as_slice_mut().unwrap();
    let rs = y2.as_slice().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let src = ci * n * hw + ni * hw;
            let dst = (ni * c + ci) * hw;
            ys[dst..dst + hw].copy_from_slice(&rs[src..src + hw]);
        }
    }
    y
}

fn nchw_to_rows(y: &Image) -> Array2<f32> {
    let (n, c, h, w) = y.dim();
    let hw = h * w;
    let mut y2 = Array2::<f32>::zeros((c, n * hw));
    let rs = y2.as_slice_mut().unwrap();
    let ys = y.as_slice().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let dst = ci * n * hw + ni * hw;
            let src = (ni * c + ci) * hw;
            rs[dst..dst + hw].copy_from_slice(&ys[src..src + hw]);
        }
    }
    y2
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId, // (out, in)
    pub b: ParamId, // (out,)
    pub in_f: usize,
    pub out_f: usize,
}

pub struct LinearCtx {
    x: Feat,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, in_f: usize, out_f: usize) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            init::kaiming_uniform(rng, &[out_f, in_f], in_f),
        );
        let b = ps.register(&format!("{name}.b"), init::zeros(&[out_f]));
        Self { w, b, in_f, out_f }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Feat) -> (Feat, LinearCtx) {
        let w = as2(ps, self.w, self.out_f, self.in_f);
        let mut y = x.dot(&w.t());
        let bias = ps.get(self.b);
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += bias[[j]];
            }
        }
        (y, LinearCtx { x: x.clone() })
    }

    pub fn backward(&self, ps: &ParamSet, gs: &mut GradSet, ctx: &LinearCtx, dy: &Feat) -> Feat {
        let dw = dy.t().dot(&ctx.x); // (out, in)
        {
            let g = gs.get_mut(self.w);
            let mut g2 = g
                .view_mut()
                .into_shape_with_order((self.out_f, self.in_f))
                .unwrap();
            g2 += &dw;
        }
        {
            let g = gs.get_mut(self.b);
            for row in dy.axis_iter(Axis(0)) {
                for (j, v) in row.iter().enumerate() {
                    g[[j]] += v;
                }
            }
        }
        let w = as2(ps, self.w, self.out_f, self.in_f);
        dy.dot(&w)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub struct ReluCtx {
    y_pos: Vec<bool>,
}

pub fn relu<D: ndarray::Dimension>(
    x: &ndarray::Array<f32, D>,
) -> (ndarray::Array<f32, D>, ReluCtx) {
    let y = x.mapv(|v| v.max(0.0));
    let y_pos = y.iter().map(|&v| v > 0.0).collect();
    (y, ReluCtx { y_pos })
}

pub fn relu_backward<D: ndarray::Dimension>(
    ctx: &ReluCtx,
    dy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut dx = dy.clone();
    for (v, &p) in dx.iter_mut().zip(ctx.y_pos.iter()) {
        if !p {
            *v = 0.0;
        }
    }
    dx
}

pub struct SiluCtx<D: ndarray::Dimension> {
    x: ndarray::Array<f32, D>,
}

pub fn silu<D: ndarray::Dimension>(
    x: &ndarray::Array<f32, D>,
) -> (ndarray::Array<f32, D>, SiluCtx<D>) {
    let y = x.mapv(|v| v * sigmoid(v));
    (y, SiluCtx { x: x.clone() })
}

pub fn silu_backward<D: ndarray::Dimension>(
    ctx: &SiluCtx<D>,
    dy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut dx = dy.clone();
    for (v, &x) in dx.iter_mut().zip(ctx.x.iter()) {
        let s = sigmoid(x);
        *v *= s * (1.0 + x * (1.0 - s));
    }
    dx
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2. Spatial dims must be even.
pub fn avg_pool2(x: &Image) -> Image {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let mut y = Image::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let s = x[[ni, ci, 2 * i, 2 * j]]
                        + x[[ni, ci, 2 * i, 2 * j + 1]]
                        + x[[ni, ci, 2 * i + 1, 2 * j]]
                        + x[[ni, ci, 2 * i + 1, 2 * j + 1]];
                    y[[ni, ci, i, j]] = s * 0.25;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Image) -> Image {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Image::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dy[[ni, ci, i, j]] * 0.25;
                    dx[[ni, ci, 2 * i, 2 * j]] = g;
                    dx[[ni, ci, 2 * i, 2 * j + 1]] = g;
                    dx[[ni, ci, 2 * i + 1, 2 * j]] = g;
                    dx[[ni, ci, 2 * i + 1, 2 * j + 1]] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Image) -> Image {
    let (n, c, h, w) = x.dim();
    let mut y = Image::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ni, ci, i, j]];
                    y[[ni, ci, 2 * i, 2 * j]] = v;
                    y[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Image) -> Image {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Image::zeros((n, c, h2 / 2, w2 / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h2 / 2 {
                for j in 0..w2 / 2 {
                    dx[[ni, ci, i, j]] = dy[[ni, ci, 2 * i, 2 * j]]
                        + dy[[ni, ci, 2 * i, 2 * j + 1]]
                        + dy[[ni, ci, 2 * i + 1, 2 * j]]
                        + dy[[ni, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

/// Group normalization over (channel-group, H, W) per sample. Statistics are
/// per-sample, so outputs never depend on batch composition.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
}

pub struct GroupNormCtx {
    xhat: Image,
    inv_std: Array2<f32>, // (N, groups)
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0);
        let gamma = ps.register(&format!("{name}.gamma"), init::ones(&[channels]));
        let beta = ps.register(&format!("{name}.beta"), init::zeros(&[channels]));
        Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Image) -> (Image, GroupNormCtx) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f32;
        let mut xhat = Image::zeros((n, c, h, w));
        let mut inv_std = Array2::<f32>::zeros((n, self.groups));
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut y = Image::zeros((n, c, h, w));
        for ni in 0..n {
            for g in 0..self.groups {
                let c0 = g * cg;
                let mut mean = 0.0f32;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            mean += x[[ni, ci, i, j]];
                        }
                    }
                }
                mean /= m;
                let mut var = 0.0f32;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x[[ni, ci, i, j]] - mean;
                            var += d * d;
                        }
                    }
                }
                var /= m;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[ni, g]] = istd;
                for ci in c0..c0 + cg {
                    let ga = gamma[[ci]];
                    let be = beta[[ci]];
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (x[[ni, ci, i, j]] - mean) * istd;
                            xhat[[ni, ci, i, j]] = xh;
                            y[[ni, ci, i, j]] = ga * xh + be;
                        }
                    }
                }
            }
        }
        (y, GroupNormCtx { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        gs: &mut GradSet,
        ctx: &GroupNormCtx,
        dy: &Image,
    ) -> Image {
        let (n, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let m = (cg * h * w) as f32;
        let gamma = ps.get(self.gamma);
        let mut dx = Image::zeros((n, c, h, w));

        {
            let dg = gs.get_mut(self.gamma);
            for ci in 0..c {
                let mut acc = 0.0f32;
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            acc += dy[[ni, ci, i, j]] * ctx.xhat[[ni, ci, i, j]];
                        }
                    }
                }
                dg[[ci]] += acc;
            }
        }
        {
            let db = gs.get_mut(self.beta);
            for ci in 0..c {
                let mut acc = 0.0f32;
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            acc += dy[[ni, ci, i, j]];
                        }
                    }
                }
                db[[ci]] += acc;
            }
        }

        for ni in 0..n {
            for g in 0..self.groups {
                let c0 = g * cg;
                // Upstream gradient in normalized space and its group moments.
                let mut sum_gh = 0.0f32;
                let mut sum_gh_xhat = 0.0f32;
                for ci in c0..c0 + cg {
                    let ga = gamma[[ci]];
                    for i in 0..h {
                        for j in 0..w {
                            let gh = dy[[ni, ci, i, j]] * ga;
                            sum_gh += gh;
                            sum_gh_xhat += gh * ctx.xhat[[ni, ci, i, j]];
                        }
                    }
                }
                let mean_gh = sum_gh / m;
                let mean_gh_xhat = sum_gh_xhat / m;
                let istd = ctx.inv_std[[ni, g]];
                for ci in c0..c0 + cg {
                    let ga = gamma[[ci]];
                    for i in 0..h {
                        for j in 0..w {
                            let gh = dy[[ni, ci, i, j]] * ga;
                            dx[[ni, ci, i, j]] =
                                istd * (gh - mean_gh - ctx.xhat[[ni, ci, i, j]] * mean_gh_xhat);
                        }
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

/// Learned lookup table, used for class conditioning.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId, // (vocab, dim)
    pub vocab: usize,
    pub dim: usize,
}

pub struct EmbeddingCtx {
    ids: Vec<usize>,
}

impl Embedding {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, vocab: usize, dim: usize) -> Self {
        let table = ps.register(
            &format!("{name}.table"),
            init::uniform(rng, &[vocab, dim], 0.05),
        );
        Self { table, vocab, dim }
    }

    pub fn forward(&self, ps: &ParamSet, ids: &[usize]) -> (Feat, EmbeddingCtx) {
        let t = as2(ps, self.table, self.vocab, self.dim);
        let mut y = Feat::zeros((ids.len(), self.dim));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < self.vocab, "embedding id out of range");
            y.row_mut(r).assign(&t.row(id));
        }
        (y, EmbeddingCtx { ids: ids.to_vec() })
    }

    pub fn backward(&self, gs: &mut GradSet, ctx: &EmbeddingCtx, dy: &Feat) {
        let g = gs.get_mut(self.table);
        let mut g2 = g
            .view_mut()
            .into_shape_with_order((self.vocab, self.dim))
            .unwrap();
        for (r, &id) in ctx.ids.iter().enumerate() {
            let mut dst = g2.row_mut(id);
            dst += &dy.row(r);
        }
    }
}

/// Fixed sinusoidal embedding of (integer) timesteps, shape (N, dim).
pub fn timestep_embedding(ts: &[f32], dim: usize) -> Feat {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut y = Feat::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f32.ln()) * i as f32 / half as f32).exp();
            y[[r, 2 * i]] = (t * freq).sin();
            y[[r, 2 * i + 1]] = (t * freq).cos();
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Structural helpers
// ---------------------------------------------------------------------------

pub fn concat_channels(a: &Image, b: &Image) -> Image {
    let (n, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut y = Image::zeros((n, ca + cb, h, w));
    y.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    y.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    y
}

pub fn split_channels(d: &Image, ca: usize) -> (Image, Image) {
    (
        d.slice(ndarray::s![.., ..ca, .., ..]).to_owned(),
        d.slice(ndarray::s![.., ca.., .., ..]).to_owned(),
    )
}

/// Add a per-(sample, channel) bias across spatial positions.
pub fn add_channel_bias(x: &mut Image, bias: &Feat) {
    let (n, c, h, w) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[[ni, ci]];
            for i in 0..h {
                for j in 0..w {
                    x[[ni, ci, i, j]] += b;
                }
            }
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_backward(dy: &Image) -> Feat {
    let (n, c, h, w) = dy.dim();
    let mut db = Feat::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0f32;
            for i in 0..h {
                for j in 0..w {
                    acc += dy[[ni, ci, i, j]];
                }
            }
            db[[ni, ci]] = acc;
        }
    }
    db
}
