//! Dense tensors, feed-forward networks with hand-written backward passes,
//! and an Adam optimizer. Every learned component of the agent is built from
//! these pieces.
//!
//! Networks operate on row batches: an input tensor of shape `[n, in]` (or a
//! plain vector `[in]`) maps to `[n, out]` (or `[out]`). Hidden layers use the
//! configured activation, the output layer is always linear.

use rand::Rng;

use crate::error::{dim_err, Error, Result};

/// Row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!("invalid tensor shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stacks equal-length rows into an `[n, cols]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dim_err(
                    "Tensor::from_rows",
                    format!("row of length {} in a {cols}-column batch", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows when viewed as `[rows, cols]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(
                "Tensor::add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Named, insertion-ordered collection of tensors. Used both for network
/// parameters and for their gradients. Equality ignores the optimizer step
/// count, which is not a parameter.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    name: String,
    entries: Vec<(String, Tensor)>,
    step_count: u64,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.entries == other.entries
    }
}

impl ParameterSet {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) -> Result<()> {
        let key = key.into();
        if self.entries.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!(
                "duplicate parameter '{key}' in set '{}'",
                self.name
            )));
        }
        self.entries.push((key, value));
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, t)| (k.as_str(), t))
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same keys and shapes, all values zero, step count reset.
    pub fn zeros_like(&self) -> Self {
        Self {
            name: self.name.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
            step_count: 0,
        }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    pub fn add_assign(&mut self, other: &ParameterSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Config(format!(
                "parameter sets '{}' and '{}' are keyed differently",
                self.name, other.name
            )));
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            t.scale(factor);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Flattened copy of all values in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

/// Rescales a group of gradient sets so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut ParameterSet], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(f);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Multi-layer perceptron. Layer `i` owns entries `l{i}.weight` (shape
/// `[in, out]`) and `l{i}.bias` (shape `[out]`), stored at indices `2i` and
/// `2i + 1` of the parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: ParameterSet,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Tensor,
    /// Output of every layer (post-activation for hidden layers).
    layer_outputs: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.layer_outputs.last().expect("at least one layer")
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

impl Mlp {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        layer_sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(name, layer_sizes, activation)?;
        for layer in 0..net.num_layers() {
            let bound = 1.0 / (layer_sizes[layer] as f64).sqrt();
            for idx in [2 * layer, 2 * layer + 1] {
                for v in net.params.tensor_at_mut(idx).data_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(
        name: impl Into<String>,
        layer_sizes: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let name = name.into();
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network '{name}' needs at least 2 layer sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "network '{name}' has an empty layer: {layer_sizes:?}"
            )));
        }
        let mut params = ParameterSet::new(name);
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            params.insert(format!("l{i}.weight"), Tensor::zeros(&[pair[0], pair[1]]))?;
            params.insert(format!("l{i}.bias"), Tensor::zeros(&[pair[1]]))?;
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Multiplies the last layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.num_layers() - 1;
        for idx in [2 * last, 2 * last + 1] {
            self.params.tensor_at_mut(idx).scale(factor);
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Replaces the parameters; the new set must have the same layout.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::Config(format!(
                "parameter layout mismatch for network '{}'",
                self.params.name()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, op: &'static str, input: &Tensor) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(dim_err(
                op,
                format!(
                    "network '{}' expects last dimension {}, input shape {:?}",
                    self.params.name(),
                    self.input_dim(),
                    input.shape()
                ),
            ));
        }
        Ok(())
    }

    fn output_shape(&self, input: &Tensor) -> Vec<usize> {
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = self.output_dim();
        shape
    }

    fn layer_forward(&self, layer: usize, x: &[f64], rows: usize, hidden: bool) -> Vec<f64> {
        let (n_in, n_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let w = self.params.tensor_at(2 * layer).data();
        let b = self.params.tensor_at(2 * layer + 1).data();
        let mut y = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let yr = &mut y[r * n_out..(r + 1) * n_out];
            yr.copy_from_slice(b);
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wi = &w[i * n_out..(i + 1) * n_out];
                for (yj, wj) in yr.iter_mut().zip(wi) {
                    *yj += xi * wj;
                }
            }
            if hidden {
                for v in yr.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
        }
        y
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input("Mlp::forward", input)?;
        let rows = input.rows();
        let mut x = self.layer_forward(0, input.data(), rows, self.num_layers() > 1);
        for layer in 1..self.num_layers() {
            x = self.layer_forward(layer, &x, rows, layer + 1 < self.num_layers());
        }
        Tensor::new(self.output_shape(input), x)
    }

    /// Forward pass on a single vector.
    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Tensor::vector(input.to_vec()))?.into_data())
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<ForwardCache> {
        self.check_input("Mlp::forward_cached", input)?;
        let rows = input.rows();
        let mut layer_outputs = Vec::with_capacity(self.num_layers());
        let mut current = input.data().to_vec();
        for layer in 0..self.num_layers() {
            let hidden = layer + 1 < self.num_layers();
            current = self.layer_forward(layer, &current, rows, hidden);
            let n_out = self.layer_sizes[layer + 1];
            layer_outputs.push(Tensor::new(vec![rows, n_out], current.clone())?);
        }
        Ok(ForwardCache {
            input: input.clone(),
            layer_outputs,
        })
    }

    /// Gradient of `sum(upstream * output)` with respect to every parameter.
    pub fn backward(&self, input: &Tensor, upstream_grad: &Tensor) -> Result<ParameterSet> {
        let cache = self.forward_cached(input)?;
        let mut grads = self.params.zeros_like();
        self.backward_into(&cache, upstream_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input (shape `[rows, in]`).
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream_grad: &Tensor,
        grads: &mut ParameterSet,
    ) -> Result<Tensor> {
        let rows = cache.input.rows();
        if upstream_grad.len() != rows * self.output_dim() {
            return Err(dim_err(
                "Mlp::backward",
                format!(
                    "upstream gradient shape {:?} does not match output [{rows}, {}]",
                    upstream_grad.shape(),
                    self.output_dim()
                ),
            ));
        }
        if !grads.same_layout(&self.params) {
            return Err(Error::Config(format!(
                "gradient set does not match network '{}'",
                self.params.name()
            )));
        }
        let mut delta = upstream_grad.data().to_vec();
        for layer in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            if layer + 1 < self.num_layers() {
                let y = cache.layer_outputs[layer].data();
                for (d, &yv) in delta.iter_mut().zip(y) {
                    *d *= self.activation.derivative_from_output(yv);
                }
            }
            let x = if layer == 0 {
                cache.input.data()
            } else {
                cache.layer_outputs[layer - 1].data()
            };
            {
                let gw = grads.tensor_at_mut(2 * layer).data_mut();
                for r in 0..rows {
                    let dr = &delta[r * n_out..(r + 1) * n_out];
                    for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let gwi = &mut gw[i * n_out..(i + 1) * n_out];
                        for (g, d) in gwi.iter_mut().zip(dr) {
                            *g += xi * d;
                        }
                    }
                }
            }
            {
                let gb = grads.tensor_at_mut(2 * layer + 1).data_mut();
                for r in 0..rows {
                    for (g, d) in gb.iter_mut().zip(&delta[r * n_out..(r + 1) * n_out]) {
                        *g += d;
                    }
                }
            }
            let w = self.params.tensor_at(2 * layer).data();
            let mut next = vec![0.0; rows * n_in];
            for r in 0..rows {
                let dr = &delta[r * n_out..(r + 1) * n_out];
                let nr = &mut next[r * n_in..(r + 1) * n_in];
                for (i, v) in nr.iter_mut().enumerate() {
                    let wi = &w[i * n_out..(i + 1) * n_out];
                    *v = wi.iter().zip(dr).map(|(a, b)| a * b).sum();
                }
            }
            delta = next;
        }
        let mut shape = cache.input.shape().to_vec();
        *shape.last_mut().unwrap() = self.input_dim();
        Tensor::new(shape, delta)
    }
}

/// Adam with bias correction. The step counter lives on the parameter set.
///
/// A gradient entry that is identically zero leaves the matching parameter
/// tensor and its moment estimates untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet) -> Self {
        Self::with_hyper(params, (0.9, 0.999), 1e-8)
    }

    pub fn with_hyper(params: &ParameterSet, betas: (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || self.first.len() != params.len() {
            return Err(Error::Config(format!(
                "gradients are not keyed like parameter set '{}'",
                params.name()
            )));
        }
        params.step_count += 1;
        let t = params.step_count as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (idx, ((_, p), (_, g))) in params.entries.iter_mut().zip(&grads.entries).enumerate() {
            let g = g.data();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of a single Adam step with fresh moments.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    Adam::with_hyper(params, betas, eps).step(params, grads, lr)
}

pub const FD_STEP: f64 = 1e-5;
const REL_ERR_FLOOR: f64 = 1e-6;

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `set/entry[index]` of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `loss` for any model
/// exposing its parameter sets through `access`. `analytic[i]` must be keyed
/// like `access(model)[i]`. When `max_coords_per_entry` is set, an evenly
/// strided subset of each tensor's coordinates is probed.
pub fn check_model_gradients<M>(
    model: &mut M,
    analytic: &[ParameterSet],
    access: impl Fn(&mut M) -> Vec<&mut ParameterSet>,
    loss: impl Fn(&M) -> f64,
    max_coords_per_entry: Option<usize>,
) -> Result<GradCheckReport> {
    {
        let sets = access(model);
        if sets.len() != analytic.len()
            || sets.iter().zip(analytic).any(|(s, a)| !s.same_layout(a))
        {
            return Err(Error::Config(
                "analytic gradients are keyed differently from the model".into(),
            ));
        }
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    for (si, grads) in analytic.iter().enumerate() {
        for (ei, (key, g)) in grads.entries().iter().enumerate() {
            let len = g.len();
            let stride = match max_coords_per_entry {
                Some(k) if k > 0 && len > k => len.div_ceil(k),
                _ => 1,
            };
            for k in (0..len).step_by(stride) {
                let original = access(model)[si].tensor_at(ei).data()[k];
                access(model)[si].tensor_at_mut(ei).data_mut()[k] = original + FD_STEP;
                let plus = loss(model);
                access(model)[si].tensor_at_mut(ei).data_mut()[k] = original - FD_STEP;
                let minus = loss(model);
                access(model)[si].tensor_at_mut(ei).data_mut()[k] = original;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let err = rel_error(g.data()[k], numeric);
                report.coords_checked += 1;
                if !(err <= report.max_rel_error) {
                    report.max_rel_error = err;
                    report.worst = format!("{}/{key}[{k}]", grads.name());
                }
            }
        }
    }
    Ok(report)
}

/// Loss over a network output: returns the scalar loss and its gradient with
/// respect to the output.
pub type OutputLoss<'a> = &'a dyn Fn(&Tensor) -> (f64, Tensor);

/// True iff the backward pass matches central differences (step 1e-5) within
/// relative tolerance `tol` on every parameter.
pub fn grad_check(net: &Mlp, loss: OutputLoss<'_>, input: &Tensor, tol: f64) -> Result<bool> {
    if tol <= 0.0 {
        return Err(Error::Config(format!("grad_check tolerance must be positive, got {tol}")));
    }
    let analytic = {
        let out = net.forward(input)?;
        let (_, upstream) = loss(&out);
        net.backward(input, &upstream)?
    };
    Ok(mlp_gradient_report(net, loss, input, &analytic)?.passes(tol))
}

/// Report form of [`grad_check`] for externally supplied analytic gradients.
pub fn mlp_gradient_report(
    net: &Mlp,
    loss: OutputLoss<'_>,
    input: &Tensor,
    analytic: &ParameterSet,
) -> Result<GradCheckReport> {
    let mut probe = net.clone();
    check_model_gradients(
        &mut probe,
        std::slice::from_ref(analytic),
        |n: &mut Mlp| vec![n.params_mut()],
        |n: &Mlp| loss(&n.forward(input).expect("shape checked")).0,
        None,
    )
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

/// Numerically stable softmax over a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn half_sum_squares(out: &Tensor) -> (f64, Tensor) {
        let loss = 0.5 * out.sum_squares();
        (loss, out.clone())
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = Mlp::zeros("id", &[3, 3], Activation::Identity).unwrap();
        let w = net.params_mut().tensor_at_mut(0).data_mut();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let out = net.forward_vec(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros("z", &[4, 5, 2], Activation::Tanh).unwrap();
        let out = net.forward_vec(&[0.3, -1.0, 7.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let net = Mlp::new("n", &[3, 4, 2], Activation::Tanh, &mut rng(11)).unwrap();
        let x = [0.5, -1.25, 2.0];
        let p = net.params();
        let (w0, b0, w1, b1) = (
            p.get("l0.weight").unwrap().data(),
            p.get("l0.bias").unwrap().data(),
            p.get("l1.weight").unwrap().data(),
            p.get("l1.bias").unwrap().data(),
        );
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut acc = b0[j];
            for i in 0..3 {
                acc += x[i] * w0[i * 4 + j];
            }
            h[j] = acc.tanh();
        }
        let mut expected = [0.0; 2];
        for k in 0..2 {
            let mut acc = b1[k];
            for j in 0..4 {
                acc += h[j] * w1[j * 2 + k];
            }
            expected[k] = acc;
        }
        let out = net.forward_vec(&x).unwrap();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::zeros("n", &[3, 2], Activation::Tanh).unwrap();
        let err = net.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Mlp::forward") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn batched_forward_equals_rowwise() {
        let net = Mlp::new("n", &[3, 5, 2], Activation::Tanh, &mut rng(3)).unwrap();
        let rows = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 4.0]];
        let batch = net.forward(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(batch.shape(), &[2, 2]);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(batch.row(i), net.forward_vec(r).unwrap().as_slice());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new("n", &[3, 4, 2], Activation::Tanh, &mut rng(1)).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = net.backward(&x, &Tensor::zeros(&[2])).unwrap();
        assert!(g.is_zero());
        assert!(g.same_layout(net.params()));
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let net = Mlp::new("n", &[3, 2], Activation::Tanh, &mut rng(1)).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        assert!(matches!(
            net.backward(&x, &Tensor::zeros(&[3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_squared_error_gradient_is_closed_form() {
        let net = Mlp::new("lin", &[2, 2], Activation::Identity, &mut rng(5)).unwrap();
        let x = [0.7, -1.3];
        let y = [0.25, 1.5];
        let out = net.forward_vec(&x).unwrap();
        let upstream: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect();
        let g = net
            .backward(&Tensor::vector(x.to_vec()), &Tensor::vector(upstream.clone()))
            .unwrap();
        // weight layout is [in, out]: dW[i][j] = 2 (Wx + b - y)_j x_i
        let gw = g.get("l0.weight").unwrap().data();
        for i in 0..2 {
            for j in 0..2 {
                assert!((gw[i * 2 + j] - upstream[j] * x[i]).abs() < 1e-12);
            }
        }
        assert_eq!(g.get("l0.bias").unwrap().data(), upstream.as_slice());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, act) in [(1, Activation::Tanh), (2, Activation::Identity)] {
            let net = Mlp::new("n", &[3, 4, 2], act, &mut rng(seed)).unwrap();
            let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.9], vec![1.1, 0.4, -0.6]]).unwrap();
            let loss = |out: &Tensor| half_sum_squares(out);
            let analytic = net.backward(&x, &net.forward(&x).unwrap()).unwrap();
            let report = mlp_gradient_report(&net, &loss, &x, &analytic).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{report:?}");
            assert!(grad_check(&net, &loss, &x, 1e-3).unwrap());
        }
    }

    #[test]
    fn doubled_gradient_fails_check() {
        let net = Mlp::new("n", &[3, 4, 1], Activation::Tanh, &mut rng(9)).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2, 0.9]);
        let loss = |out: &Tensor| half_sum_squares(out);
        let mut analytic = net.backward(&x, &net.forward(&x).unwrap()).unwrap();
        analytic.scale(2.0);
        let report = mlp_gradient_report(&net, &loss, &x, &analytic).unwrap();
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn grad_check_rejects_nonpositive_tolerance() {
        let net = Mlp::new("n", &[2, 1], Activation::Tanh, &mut rng(9)).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2]);
        assert!(matches!(
            grad_check(&net, &half_sum_squares, &x, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_layers_are_rejected() {
        assert!(matches!(
            Mlp::zeros("e", &[3, 0, 2], Activation::Tanh),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Mlp::zeros("e", &[3], Activation::Tanh),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = Mlp::new("n", &[16, 8, 4], Activation::Tanh, &mut rng(4)).unwrap();
        for (key, t) in net.params().entries() {
            let fan_in = if key.starts_with("l0") { 16.0 } else { 8.0 };
            let bound = 1.0 / f64::sqrt(fan_in);
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{key}");
        }
        assert_eq!(net.params().parameter_count(), 16 * 8 + 8 + 8 * 4 + 4);
    }

    #[test]
    fn adam_zero_gradient_only_counts_step() {
        let net = Mlp::new("n", &[3, 2], Activation::Tanh, &mut rng(2)).unwrap();
        let mut params = net.params().clone();
        let grads = params.zeros_like();
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.flat_values(), net.params().flat_values());
        assert_eq!(params.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParameterSet::new("p");
        params.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let mut grads = params.zeros_like();
        grads.tensor_at_mut(0).data_mut()[0] = 1.0;
        adam_step(&mut params, &grads, 0.1, (0.9, 0.999), 1e-8).unwrap();
        let x = params.tensor_at(0).data()[0];
        assert!((x - 0.9).abs() < 1e-6, "{x}");
    }

    #[test]
    fn adam_rejects_mismatched_keys() {
        let mut params = ParameterSet::new("p");
        params.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let mut other = ParameterSet::new("p");
        other.insert("y", Tensor::vector(vec![1.0])).unwrap();
        let mut adam = Adam::new(&params);
        assert!(matches!(adam.step(&mut params, &other, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(p) = sum (p_i - c_i)^2
        let target = [3.0, -2.0, 0.5];
        let mut params = ParameterSet::new("q");
        params.insert("p", Tensor::vector(vec![0.0; 3])).unwrap();
        let loss = |p: &ParameterSet| {
            p.tensor_at(0)
                .data()
                .iter()
                .zip(target)
                .map(|(a, c)| (a - c).powi(2))
                .sum::<f64>()
        };
        let initial = loss(&params);
        let mut adam = Adam::new(&params);
        for _ in 0..100 {
            let mut g = params.zeros_like();
            for (i, gv) in g.tensor_at_mut(0).data_mut().iter_mut().enumerate() {
                *gv = 2.0 * (params.tensor_at(0).data()[i] - target[i]);
            }
            adam.step(&mut params, &g, 0.05).unwrap();
        }
        assert!(loss(&params) < initial);
        assert!(params.is_finite());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = ParameterSet::new("g");
        g.insert("a", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let norm = clip_global_norm(&mut [&mut g], 1.0);
        assert_eq!(norm, 5.0);
        assert!((g.sum_squares().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_normalized() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
        let lp = log_softmax(&[0.0, 0.0]);
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn forward_is_pure(seed in 0u64..1000, xs in proptest::collection::vec(-3.0f64..3.0, 4)) {
                let net = Mlp::new("p", &[4, 6, 3], Activation::Tanh, &mut rng(seed)).unwrap();
                let a = net.forward_vec(&xs).unwrap();
                let b = net.forward_vec(&xs).unwrap();
                prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                prop_assert!(a.iter().all(|v| v.is_finite()));
            }

            #[test]
            fn adam_zero_gradient_is_noop(seed in 0u64..1000, steps in 1usize..5) {
                let net = Mlp::new("p", &[3, 3], Activation::Tanh, &mut rng(seed)).unwrap();
                let mut params = net.params().clone();
                let mut adam = Adam::new(&params);
                for _ in 0..steps {
                    let z = params.zeros_like();
                    adam.step(&mut params, &z, 0.3).unwrap();
                }
                prop_assert_eq!(params.flat_values(), net.params().flat_values());
            }
        }
    }
}
