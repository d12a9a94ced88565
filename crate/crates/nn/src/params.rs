//! Named parameter storage shared by all models.
//!
//! Layers register their tensors in a [`ParamSet`] at construction time and
//! keep only [`ParamId`] handles. Gradients live in a parallel [`GradSet`]
//! so a model can be borrowed immutably during the forward/backward pass
//! while gradients accumulate separately.

use ndarray::{ArrayD, IxDyn};

/// Handle to one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// An ordered, named collection of f32 tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Register a tensor under `name`. Names must be unique; they are the
    /// stable identity used by the checkpoint format.
    pub fn register(&mut self, name: &str, value: ArrayD<f32>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Concatenate every tensor into one flat vector, in registration order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Overwrite all tensors from a flat vector produced by [`flatten`].
    ///
    /// [`flatten`]: ParamSet::flatten
    pub fn assign_flat(&mut self, flat: &[f32]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat length mismatch");
        let mut off = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = flat[off];
                off += 1;
            }
        }
    }

    /// Replace values from another set with identical layout.
    pub fn copy_from(&mut self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            dst.assign(src);
        }
    }

    pub(crate) fn values(&self) -> &[ArrayD<f32>] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [ArrayD<f32>] {
        &mut self.values
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned index-for-index with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet {
    grads: Vec<ArrayD<f32>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .values()
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.grads[id.0]
    }

    /// Accumulate `delta` into the gradient for `id`.
    pub fn accumulate(&mut self, id: ParamId, delta: &ArrayD<f32>) {
        let g = &mut self.grads[id.0];
        assert_eq!(g.shape(), delta.shape(), "gradient shape mismatch");
        *g += delta;
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for g in &self.grads {
            out.extend(g.iter().copied());
        }
        out
    }

    pub(crate) fn grads(&self) -> &[ArrayD<f32>] {
        &self.grads
    }
}

/// Binary per-parameter mask aligned with a [`ParamSet`].
///
/// Entries are 0.0 or 1.0 and multiply parameter updates elementwise, so a
/// zero entry freezes that scalar exactly.
#[derive(Debug, Clone)]
pub struct ParamMask {
    masks: Vec<ArrayD<f32>>,
}

impl ParamMask {
    pub fn ones_like(params: &ParamSet) -> Self {
        Self {
            masks: params
                .values()
                .iter()
                .map(|v| ArrayD::from_elem(v.raw_dim(), 1.0))
                .collect(),
        }
    }

    /// Build a mask from a flat 0/1 vector in [`ParamSet::flatten`] order.
    pub fn from_flat(params: &ParamSet, flat: &[f32]) -> Self {
        assert_eq!(flat.len(), params.num_scalars());
        let mut masks = Vec::with_capacity(params.len());
        let mut off = 0;
        for v in params.values() {
            let n = v.len();
            let arr = ArrayD::from_shape_vec(v.raw_dim(), flat[off..off + n].to_vec())
                .expect("mask shape");
            masks.push(arr);
            off += n;
        }
        Self { masks }
    }

    pub fn get(&self, idx: usize) -> &ArrayD<f32> {
        &self.masks[idx]
    }

    /// Fraction of entries equal to 1.
    pub fn fraction_kept(&self) -> f64 {
        let total: usize = self.masks.iter().map(|m| m.len()).sum();
        let ones: f64 = self
            .masks
            .iter()
            .map(|m| m.iter().filter(|&&x| x != 0.0).count() as f64)
            .sum();
        ones / total as f64
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for m in &self.masks {
            out.extend(m.iter().copied());
        }
        out
    }
}

/// Relative L2 distance ||a - b|| / max(||a||, eps) between two flat
/// parameter vectors.
pub fn rel_l2_distance(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = (x as f64) - (y as f64);
        num += d * d;
        den += (x as f64) * (x as f64);
    }
    (num.sqrt()) / den.sqrt().max(1e-12)
}

/// Convenience constructor for a zero tensor with the given shape.
pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}
