//! Minimal differentiable-computation core: dense tensors, affine and
//! activation layers with exact backward passes, an SGD optimizer, and a
//! finite-difference gradient oracle.
//!
//! Everything is 64-bit IEEE-754 and deterministic given identical inputs.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Sigmoid pre-activations are clamped to this magnitude before `exp`;
/// the value change this introduces is below 1e-17.
pub const SIGMOID_CLAMP: f64 = 40.0;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if expected != values.len() {
            return Err(Error::shape("Tensor::new", expected, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new values".into()));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            values: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

/// Affine map `y = W x + b` with `W` of shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape().len() != 1 {
            return Err(Error::InvalidArgument(
                "affine layer needs a 2-D weight and a 1-D bias".into(),
            ));
        }
        if weight.shape()[0] != bias.shape()[0] {
            return Err(Error::shape(
                "AffineLayer::new bias",
                weight.shape()[0],
                bias.shape()[0],
            ));
        }
        Ok(AffineLayer { weight, bias })
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let values: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        AffineLayer {
            weight: Tensor {
                shape: vec![out_dim, in_dim],
                values,
            },
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

// ---------------------------------------------------------------------------
// Slice-level kernels. The training loop spends nearly all of its time here,
// so dot products are unrolled into independent accumulators.
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let a4 = a.chunks_exact(4);
    let b4 = b.chunks_exact(4);
    let (ra, rb) = (a4.remainder(), b4.remainder());
    for (ca, cb) in a4.zip(b4) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    for (&x, &y) in ra.iter().zip(rb) {
        acc[0] += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `out = W x + b`, `W` row-major `(out.len(), x.len())`.
#[inline]
pub(crate) fn gemv(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = bias[o] + dot(&weight[o * in_dim..(o + 1) * in_dim], x);
    }
}

/// `out = Wᵀ u`, accumulating into `out`.
#[inline]
pub(crate) fn gemv_transpose_acc(weight: &[f64], u: &[f64], out: &mut [f64]) {
    let in_dim = out.len();
    for (o, &uo) in u.iter().enumerate() {
        if uo == 0.0 {
            continue;
        }
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        for (dst, &w) in out.iter_mut().zip(row) {
            *dst += w * uo;
        }
    }
}

/// Rank-1 update `grad_w += u xᵀ`, `grad_b += u`.
#[inline]
pub(crate) fn outer_acc(grad_w: &mut [f64], grad_b: &mut [f64], u: &[f64], x: &[f64]) {
    vec_acc(grad_b, u);
    outer_only(grad_w, u, x);
}

/// Rank-1 update `grad_w += u xᵀ`.
#[inline]
pub(crate) fn outer_only(grad_w: &mut [f64], u: &[f64], x: &[f64]) {
    let in_dim = x.len();
    for (o, &uo) in u.iter().enumerate() {
        if uo == 0.0 {
            continue;
        }
        let row = &mut grad_w[o * in_dim..(o + 1) * in_dim];
        for (dst, &xv) in row.iter_mut().zip(x) {
            *dst += uo * xv;
        }
    }
}

/// `dst += src` elementwise.
#[inline]
pub(crate) fn vec_acc(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    let z = z.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Layer operations
// ---------------------------------------------------------------------------

/// `weight · x + bias` for a 1-D input.
pub fn affine_forward(layer: &AffineLayer, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 || x.len() != layer.in_dim() {
        return Err(Error::shape("affine_forward input", layer.in_dim(), x.len()));
    }
    let mut out = Tensor::zeros(vec![layer.out_dim()]);
    gemv(
        layer.weight.values(),
        layer.bias.values(),
        x.values(),
        out.values_mut(),
    );
    Ok(out)
}

/// Gradients of an affine layer given the forward input and the upstream
/// gradient: `(upstream ⊗ x, upstream, Wᵀ upstream)`.
pub fn affine_backward(
    layer: &AffineLayer,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if x.len() != layer.in_dim() {
        return Err(Error::shape("affine_backward input", layer.in_dim(), x.len()));
    }
    if upstream.len() != layer.out_dim() {
        return Err(Error::shape(
            "affine_backward upstream",
            layer.out_dim(),
            upstream.len(),
        ));
    }
    let mut grad_w = Tensor::zeros(layer.weight.shape().to_vec());
    let mut grad_b = Tensor::zeros(vec![layer.out_dim()]);
    let mut grad_x = Tensor::zeros(vec![layer.in_dim()]);
    outer_acc(
        grad_w.values_mut(),
        grad_b.values_mut(),
        upstream.values(),
        x.values(),
    );
    gemv_transpose_acc(layer.weight.values(), upstream.values(), grad_x.values_mut());
    Ok((grad_w, grad_b, grad_x))
}

/// Elementwise `1/(1+exp(-x))`, pre-activation clamped to ±40.
pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let values = x.values().iter().map(|&z| sigmoid_scalar(z)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        values,
    }
}

/// Backward through a sigmoid given its output `y`: `upstream · y · (1-y)`.
pub fn sigmoid_backward(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if y.shape() != upstream.shape() {
        return Err(Error::shape(
            "sigmoid_backward",
            format!("{:?}", y.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let values = y
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(&yv, &u)| u * yv * (1.0 - yv))
        .collect();
    Ok(Tensor {
        shape: y.shape().to_vec(),
        values,
    })
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Tensor) -> Tensor {
    let values = x.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        values,
    }
}

/// Backward through a ReLU given its input `x`: upstream masked where `x ≤ 0`.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", x.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let values = x
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(&xv, &u)| if xv > 0.0 { u } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: x.shape().to_vec(),
        values,
    })
}

// ---------------------------------------------------------------------------
// Parameter sets
// ---------------------------------------------------------------------------

/// Named parameter tensors with parallel gradient accumulators.
///
/// Iteration order is lexicographic in the parameter name, which also fixes
/// the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.grads
            .insert(name.clone(), Tensor::zeros(tensor.shape().to_vec()));
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar parameters across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `scale * delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor, scale: f64) -> Result<()> {
        let grad = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if grad.shape() != delta.shape() {
            return Err(Error::shape(
                format!("gradient of `{name}`"),
                format!("{:?}", grad.shape()),
                format!("{:?}", delta.shape()),
            ));
        }
        for (g, &d) in grad.values_mut().iter_mut().zip(delta.values()) {
            *g += scale * d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    /// Overwrites the tensor stored under `name`, keeping its shape.
    pub fn copy_values_from(&mut self, name: &str, src: &Tensor) -> Result<()> {
        let dst = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if dst.shape() != src.shape() {
            return Err(Error::shape(
                format!("copy into `{name}`"),
                format!("{:?}", dst.shape()),
                format!("{:?}", src.shape()),
            ));
        }
        dst.values_mut().copy_from_slice(src.values());
        Ok(())
    }
}

/// One SGD step: `param -= learning_rate * grad` for every parameter, then
/// gradients are cleared. Rejects non-finite gradients, naming the parameter.
pub fn sgd_step(params: &mut ParameterSet, learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and ≥ 0, got {learning_rate}"
        )));
    }
    for (name, grad) in &params.grads {
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
        }
        let tensor = params
            .params
            .get_mut(name)
            .expect("grads and params share keys");
        for (p, &g) in tensor.values_mut().iter_mut().zip(grad.values()) {
            *p -= learning_rate * g;
        }
    }
    params.zero_grads();
    Ok(())
}

/// Central-difference gradient estimate `(L(θ+ε) - L(θ-ε)) / 2ε` per scalar
/// parameter. `loss_fn` must be deterministic; this is checked by evaluating
/// it twice at the base point.
pub fn finite_difference_gradient<F>(
    mut loss_fn: F,
    params: &ParameterSet,
    epsilon: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParameterSet) -> f64,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    let base_a = loss_fn(params);
    let base_b = loss_fn(params);
    if base_a != base_b {
        return Err(Error::InvalidArgument(format!(
            "loss function is not deterministic: {base_a} vs {base_b} at the same point"
        )));
    }

    let mut scratch = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.params.keys().cloned().collect();
    for name in names {
        let n = params.get(&name).len();
        let mut grad = Tensor::zeros(params.get(&name).shape().to_vec());
        for idx in 0..n {
            let original = params.get(&name).values()[idx];
            scratch.get_mut(&name).values_mut()[idx] = original + epsilon;
            let plus = loss_fn(&scratch);
            scratch.get_mut(&name).values_mut()[idx] = original - epsilon;
            let minus = loss_fn(&scratch);
            scratch.get_mut(&name).values_mut()[idx] = original;
            grad.values_mut()[idx] = (plus - minus) / (2.0 * epsilon);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Relative error used by the gradient checks:
/// `|a-b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
