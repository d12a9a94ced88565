//! SGD (optional momentum) and Adam, both with parameter masking.

use crate::params::{GradSet, ParamMask, ParamSet};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Option<Vec<ArrayD<f32>>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// One update step. With a mask, the update (not the gradient buffer) is
    /// multiplied elementwise, so masked-out scalars stay bit-identical.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, mask: Option<&ParamMask>) {
        if self.momentum != 0.0 && self.velocity.is_none() {
            self.velocity = Some(
                params
                    .values()
                    .iter()
                    .map(|v| ArrayD::zeros(v.raw_dim()))
                    .collect(),
            );
        }
        let n = params.len();
        for idx in 0..n {
            let g = &grads.grads()[idx];
            let update: ArrayD<f32> = if self.momentum != 0.0 {
                let vel = &mut self.velocity.as_mut().unwrap()[idx];
                vel.zip_mut_with(g, |v, &gi| *v = self.momentum * *v + gi);
                vel.clone()
            } else {
                g.clone()
            };
            let p = &mut params.values_mut()[idx];
            match mask {
                Some(m) => {
                    let mk = m.get(idx);
                    ndarray::Zip::from(&mut *p)
                        .and(&update)
                        .and(mk)
                        .for_each(|pv, &u, &mv| *pv -= self.lr * u * mv);
                }
                None => {
                    p.zip_mut_with(&update, |pv, &u| *pv -= self.lr * u);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Option<Vec<ArrayD<f32>>>,
    v: Option<Vec<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, mask: Option<&ParamMask>) {
        if self.m.is_none() {
            let zeros: Vec<ArrayD<f32>> = params
                .values()
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect();
            self.m = Some(zeros.clone());
            self.v = Some(zeros);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let n = params.len();
        for idx in 0..n {
            let g = &grads.grads()[idx];
            let m = &mut self.m.as_mut().unwrap()[idx];
            let v = &mut self.v.as_mut().unwrap()[idx];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = &mut params.values_mut()[idx];
            let lr = self.lr;
            let eps = self.eps;
            match mask {
                Some(msk) => {
                    let mk = msk.get(idx);
                    ndarray::Zip::from(&mut *p)
                        .and(&*m)
                        .and(&*v)
                        .and(mk)
                        .for_each(|pv, &mv, &vv, &kv| {
                            let mhat = mv / bc1;
                            let vhat = vv / bc2;
                            *pv -= lr * mhat / (vhat.sqrt() + eps) * kv;
                        });
                }
                None => {
                    ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(
                        |pv, &mv, &vv| {
                            let mhat = mv / bc1;
                            let vhat = vv / bc2;
                            *pv -= lr * mhat / (vhat.sqrt() + eps);
                        },
                    );
                }
            }
        }
    }
}

/// Optimizer selection shared by training loops and the unlearning engine.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, mask: Option<&ParamMask>) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, mask),
            Optimizer::Adam(o) => o.step(params, grads, mask),
        }
    }
}
