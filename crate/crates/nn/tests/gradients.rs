//! Central-difference checks for every hand-written backward pass.
//!
//! The loss is `sum(probe .* output)` for a fixed random probe, so the exact
//! input/parameter gradient is known from the returned backward values and
//! can be compared against numerical differentiation of the forward pass.

use ndarray::{Array2, Array4};
use unlearn_nn::layers::*;
use unlearn_nn::params::{GradSet, ParamSet};
use unlearn_nn::rng::{rng_from_seed, Rng};

const EPS: f32 = 1e-2;
const TOL: f64 = 2e-2;

fn fill_random(rng: &mut Rng, buf: &mut [f32], scale: f32) {
    use rand::Rng as _;
    for x in buf.iter_mut() {
        *x = rng.gen_range(-scale..scale);
    }
}

fn probe_loss(y: &[f32], probe: &[f32]) -> f64 {
    y.iter()
        .zip(probe.iter())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn check_close(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    let rel = (analytic - numeric).abs() / denom;
    assert!(
        rel < TOL,
        "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})"
    );
}

/// Generic parameter grad check: perturb a few scalars of each parameter.
fn check_param_grads<F>(ps: &mut ParamSet, gs: &GradSet, forward_loss: F, n_probe: usize)
where
    F: Fn(&ParamSet) -> f64,
{
    for idx in 0..ps.len() {
        let id = unlearn_nn::ParamId(idx);
        let n = ps.get(id).len();
        let step = (n / n_probe.min(n)).max(1);
        for flat in (0..n).step_by(step) {
            let orig = ps.get(id).as_slice().unwrap()[flat];
            ps.get_mut(id).as_slice_mut().unwrap()[flat] = orig + EPS;
            let lp = forward_loss(ps);
            ps.get_mut(id).as_slice_mut().unwrap()[flat] = orig - EPS;
            let lm = forward_loss(ps);
            ps.get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (lp - lm) / (2.0 * EPS as f64);
            let analytic = gs.get(id).as_slice().unwrap()[flat] as f64;
            check_close(analytic, numeric, &format!("param {idx}[{flat}]"));
        }
    }
}

fn check_input_grads<F>(x: &mut Array4<f32>, dx: &Array4<f32>, forward_loss: F)
where
    F: Fn(&Array4<f32>) -> f64,
{
    let n = x.len();
    let step = (n / 24).max(1);
    for flat in (0..n).step_by(step) {
        let orig = x.as_slice().unwrap()[flat];
        x.as_slice_mut().unwrap()[flat] = orig + EPS;
        let lp = forward_loss(x);
        x.as_slice_mut().unwrap()[flat] = orig - EPS;
        let lm = forward_loss(x);
        x.as_slice_mut().unwrap()[flat] = orig;
        let numeric = (lp - lm) / (2.0 * EPS as f64);
        let analytic = dx.as_slice().unwrap()[flat] as f64;
        check_close(analytic, numeric, &format!("input[{flat}]"));
    }
}

#[test]
fn conv2d_gradients() {
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        let mut rng = rng_from_seed(10);
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 3, 4, 3, stride, pad);
        let mut x = Array4::<f32>::zeros((2, 3, 6, 6));
        fill_random(&mut rng, x.as_slice_mut().unwrap(), 1.0);
        let (y, ctx) = conv.forward(&ps, &x);
        let mut probe = vec![0.0f32; y.len()];
        fill_random(&mut rng, &mut probe, 1.0);
        let dy = Array4::from_shape_vec(y.raw_dim(), probe.clone()).unwrap();

        let mut gs = GradSet::zeros_like(&ps);
        let dx = conv.backward(&ps, &mut gs, &ctx, &dy);

        let loss = |ps: &ParamSet| {
            let (y, _) = conv.forward(ps, &x);
            probe_loss(y.as_slice().unwrap(), &probe)
        };
        check_param_grads(&mut ps, &gs, loss, 12);
        let x_loss = |xx: &Array4<f32>| {
            let (y, _) = conv.forward(&ps, xx);
            probe_loss(y.as_slice().unwrap(), &probe)
        };
        check_input_grads(&mut x, &dx, x_loss);
    }
}

#[test]
fn linear_gradients() {
    let mut rng = rng_from_seed(11);
    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, &mut rng, "l", 5, 3);
    let mut x = Array2::<f32>::zeros((4, 5));
    fill_random(&mut rng, x.as_slice_mut().unwrap(), 1.0);
    let (y, ctx) = lin.forward(&ps, &x);
    let mut probe = vec![0.0f32; y.len()];
    fill_random(&mut rng, &mut probe, 1.0);
    let dy = Array2::from_shape_vec(y.raw_dim(), probe.clone()).unwrap();

    let mut gs = GradSet::zeros_like(&ps);
    let dx = lin.backward(&ps, &mut gs, &ctx, &dy);

    {
        let loss = |ps: &ParamSet| {
            let (y, _) = lin.forward(ps, &x);
            probe_loss(y.as_slice().unwrap(), &probe)
        };
        check_param_grads(&mut ps, &gs, loss, 15);
    }

    // input grads
    for flat in 0..x.len() {
        let orig = x.as_slice().unwrap()[flat];
        x.as_slice_mut().unwrap()[flat] = orig + EPS;
        let (yp, _) = lin.forward(&ps, &x);
        let lp = probe_loss(yp.as_slice().unwrap(), &probe);
        x.as_slice_mut().unwrap()[flat] = orig - EPS;
        let (ym, _) = lin.forward(&ps, &x);
        let lm = probe_loss(ym.as_slice().unwrap(), &probe);
        x.as_slice_mut().unwrap()[flat] = orig;
        check_close(
            dx.as_slice().unwrap()[flat] as f64,
            (lp - lm) / (2.0 * EPS as f64),
            "linear input",
        );
    }
}

#[test]
fn groupnorm_gradients() {
    let mut rng = rng_from_seed(12);
    let mut ps = ParamSet::new();
    let gn = GroupNorm::new(&mut ps, "g", 2, 4);
    let mut x = Array4::<f32>::zeros((2, 4, 3, 3));
    fill_random(&mut rng, x.as_slice_mut().unwrap(), 1.5);
    let (y, ctx) = gn.forward(&ps, &x);
    let mut probe = vec![0.0f32; y.len()];
    fill_random(&mut rng, &mut probe, 1.0);
    let dy = Array4::from_shape_vec(y.raw_dim(), probe.clone()).unwrap();

    let mut gs = GradSet::zeros_like(&ps);
    let dx = gn.backward(&ps, &mut gs, &ctx, &dy);

    let loss = |ps: &ParamSet| {
        let (y, _) = gn.forward(ps, &x);
        probe_loss(y.as_slice().unwrap(), &probe)
    };
    check_param_grads(&mut ps, &gs, loss, 8);
    let x_loss = |xx: &Array4<f32>| {
        let (y, _) = gn.forward(&ps, xx);
        probe_loss(y.as_slice().unwrap(), &probe)
    };
    check_input_grads(&mut x, &dx, x_loss);
}

#[test]
fn activation_and_pool_gradients() {
    let mut rng = rng_from_seed(13);
    let mut x = Array4::<f32>::zeros((2, 3, 4, 4));
    fill_random(&mut rng, x.as_slice_mut().unwrap(), 1.0);
    let mut probe_small = vec![0.0f32; 2 * 3 * 2 * 2];
    fill_random(&mut rng, &mut probe_small, 1.0);
    let mut probe_full = vec![0.0f32; x.len()];
    fill_random(&mut rng, &mut probe_full, 1.0);

    // silu
    {
        let (_, ctx) = silu(&x);
        let dy = Array4::from_shape_vec(x.raw_dim(), probe_full.clone()).unwrap();
        let dx = silu_backward(&ctx, &dy);
        let loss = |xx: &Array4<f32>| {
            let (y, _) = silu(xx);
            probe_loss(y.as_slice().unwrap(), &probe_full)
        };
        check_input_grads(&mut x, &dx, loss);
    }
    // relu (skip points near the kink)
    {
        let (_, ctx) = relu(&x);
        let dy = Array4::from_shape_vec(x.raw_dim(), probe_full.clone()).unwrap();
        let dx = relu_backward(&ctx, &dy);
        for flat in 0..x.len() {
            let v = x.as_slice().unwrap()[flat];
            if v.abs() < 5.0 * EPS {
                continue;
            }
            let orig = v;
            x.as_slice_mut().unwrap()[flat] = orig + EPS;
            let (yp, _) = relu(&x);
            let lp = probe_loss(yp.as_slice().unwrap(), &probe_full);
            x.as_slice_mut().unwrap()[flat] = orig - EPS;
            let (ym, _) = relu(&x);
            let lm = probe_loss(ym.as_slice().unwrap(), &probe_full);
            x.as_slice_mut().unwrap()[flat] = orig;
            check_close(
                dx.as_slice().unwrap()[flat] as f64,
                (lp - lm) / (2.0 * EPS as f64),
                "relu input",
            );
        }
    }
    // avg pool and upsample are linear; exact adjoint identity check:
    // <pool(x), p> == <x, pool_backward(p)>
    {
        let y = avg_pool2(&x);
        let p = Array4::from_shape_vec(y.raw_dim(), probe_small.clone()).unwrap();
        let lhs = probe_loss(y.as_slice().unwrap(), &probe_small);
        let adj = avg_pool2_backward(&p);
        let rhs = probe_loss(x.as_slice().unwrap(), adj.as_slice().unwrap());
        assert!((lhs - rhs).abs() < 1e-6);
    }
    {
        let small = avg_pool2(&x);
        let y = upsample2(&small);
        let p = Array4::from_shape_vec(y.raw_dim(), probe_full.clone()).unwrap();
        let lhs = probe_loss(y.as_slice().unwrap(), &probe_full);
        let adj = upsample2_backward(&p);
        let rhs = probe_loss(small.as_slice().unwrap(), adj.as_slice().unwrap());
        assert!((lhs - rhs).abs() < 1e-6);
    }
}

#[test]
fn embedding_gradients() {
    let mut rng = rng_from_seed(14);
    let mut ps = ParamSet::new();
    let emb = Embedding::new(&mut ps, &mut rng, "e", 6, 4);
    let ids = vec![1usize, 5, 1, 0];
    let (y, ctx) = emb.forward(&ps, &ids);
    let mut probe = vec![0.0f32; y.len()];
    fill_random(&mut rng, &mut probe, 1.0);
    let dy = Array2::from_shape_vec(y.raw_dim(), probe.clone()).unwrap();
    let mut gs = GradSet::zeros_like(&ps);
    emb.backward(&mut gs, &ctx, &dy);
    let loss = |ps: &ParamSet| {
        let (y, _) = emb.forward(ps, &ids);
        probe_loss(y.as_slice().unwrap(), &probe)
    };
    check_param_grads(&mut ps, &gs, loss, 24);
}
