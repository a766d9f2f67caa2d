//! Small differentiable models with analytic loss, gradient, Hessian-vector
//! products and smoothness constants.
//!
//! Every model is a stack of dense layers over a flat weight vector. Layer `l`
//! stores its `outputs x inputs` weight matrix row-major followed by its bias
//! (when enabled). Hidden layers apply the activation; the output layer is
//! linear and feeds either a squared loss (regression, one output) or a
//! softmax cross-entropy (classification).

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domains::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// Squared loss on a single linear output.
    LinearRegression,
    /// Multiclass softmax cross-entropy on a linear map.
    LogisticClassifier,
    /// Hidden layers of the given widths, then a linear softmax head.
    Mlp { hidden: Vec<usize>, activation: Activation },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub bias: bool,
    /// Weights `[0, split_index)` form the feature extractor, the rest the head.
    pub split_index: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
    bias: bool,
}

impl Layer {
    fn len(&self) -> usize {
        self.outputs * self.inputs + if self.bias { self.outputs } else { 0 }
    }

    fn apply(&self, w: &[f64], a: &[f64]) -> Vec<f64> {
        let mat = &w[self.offset..self.offset + self.outputs * self.inputs];
        (0..self.outputs)
            .map(|o| {
                let z = linalg::dot(&mat[o * self.inputs..(o + 1) * self.inputs], a);
                if self.bias {
                    z + w[self.offset + self.outputs * self.inputs + o]
                } else {
                    z
                }
            })
            .collect()
    }

    /// Accumulates `scale * delta (x) [a; 1]` into the layer's block of `out`.
    fn accumulate_outer(&self, out: &mut [f64], delta: &[f64], a: &[f64], scale: f64) {
        let mat = self.offset;
        for (o, d) in delta.iter().enumerate() {
            let s = scale * d;
            if s == 0.0 {
                continue;
            }
            let row = &mut out[mat + o * self.inputs..mat + (o + 1) * self.inputs];
            for (r, x) in row.iter_mut().zip(a) {
                *r += s * x;
            }
            if self.bias {
                out[mat + self.outputs * self.inputs + o] += s;
            }
        }
    }

    fn backprop_input(&self, w: &[f64], delta: &[f64]) -> Vec<f64> {
        let mat = &w[self.offset..self.offset + self.outputs * self.inputs];
        let mut back = vec![0.0; self.inputs];
        for (o, d) in delta.iter().enumerate() {
            linalg::axpy(*d, &mat[o * self.inputs..(o + 1) * self.inputs], &mut back);
        }
        back
    }
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            num_classes: 1,
            bias: true,
            split_index: 0,
        }
    }

    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticClassifier,
            input_dim,
            num_classes,
            bias: true,
            split_index: 0,
        }
    }

    /// The split defaults to the start of the output layer, so `f` is every
    /// hidden layer and `g` is the softmax head.
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize, activation: Activation) -> Self {
        let mut spec = Self {
            kind: ModelKind::Mlp { hidden, activation },
            input_dim,
            num_classes,
            bias: true,
            split_index: 0,
        };
        spec.split_index = spec.layers().last().map_or(0, |l| l.offset);
        spec
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        if let ModelKind::Mlp { .. } = self.kind {
            self.split_index = self.layers().last().map_or(0, |l| l.offset);
        }
        self
    }

    pub fn with_split(mut self, split_index: usize) -> Self {
        self.split_index = split_index;
        self
    }

    fn layers(&self) -> Vec<Layer> {
        let mut widths = vec![self.input_dim];
        if let ModelKind::Mlp { hidden, .. } = &self.kind {
            widths.extend_from_slice(hidden);
        }
        widths.push(self.outputs());
        let mut offset = 0;
        widths
            .windows(2)
            .map(|p| {
                let l = Layer {
                    inputs: p[0],
                    outputs: p[1],
                    offset,
                    bias: self.bias,
                };
                offset += l.len();
                l
            })
            .collect()
    }

    fn outputs(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression => 1,
            _ => self.num_classes,
        }
    }

    fn activation(&self) -> Activation {
        match &self.kind {
            ModelKind::Mlp { activation, .. } => *activation,
            _ => Activation::Identity,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.layers().iter().map(Layer::len).sum()
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::LinearRegression)
    }

    /// Loss convex in all weights (the theory's setting).
    pub fn is_convex(&self) -> bool {
        !matches!(self.kind, ModelKind::Mlp { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        match &self.kind {
            ModelKind::LinearRegression if self.num_classes != 1 => {
                return Err(Error::invalid("linear regression requires num_classes = 1"));
            }
            ModelKind::Mlp { hidden, .. } if hidden.contains(&0) => {
                return Err(Error::invalid("hidden widths must be positive"));
            }
            _ if self.num_classes == 0 => {
                return Err(Error::invalid("num_classes must be positive"));
            }
            _ => {}
        }
        if self.split_index > self.total_dim() {
            return Err(Error::invalid(format!(
                "split index {} exceeds total dimension {}",
                self.split_index,
                self.total_dim()
            )));
        }
        Ok(())
    }

    fn check(&self, w: &[f64], data: &Dataset) -> Result<()> {
        if w.len() != self.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.total_dim(),
                actual: w.len(),
                context: "weight vector",
            });
        }
        if data.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: data.dim(),
                context: "feature dimension",
            });
        }
        if self.is_classifier() && data.num_classes() > self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                actual: data.num_classes(),
                context: "number of classes",
            });
        }
        Ok(())
    }
}

/// Flat model parameters `w_h = [w_f ; w_g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn feature_block(&self, spec: &ModelSpec) -> &[f64] {
        &self.0[..spec.split_index]
    }

    pub fn head_block(&self, spec: &ModelSpec) -> &[f64] {
        &self.0[spec.split_index..]
    }
}

impl Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Entries i.i.d. uniform in `[-scale, scale]`.
pub fn init_weights(spec: &ModelSpec, seed: u64, scale: f64) -> WeightVector {
    let n = spec.total_dim();
    let scale = scale.abs();
    if scale == 0.0 {
        return WeightVector::zeros(n);
    }
    let mut rng = seed::rng(seed);
    WeightVector((0..n).map(|_| rng.random_range(-scale..=scale)).collect())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

struct Forward {
    /// Layer inputs: `inputs[0]` is the sample, `inputs[l]` the activation
    /// feeding layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward(layers: &[Layer], act: Activation, w: &[f64], x: &[f64]) -> Forward {
    let mut inputs = vec![x.to_vec()];
    let mut hidden_pre = Vec::with_capacity(layers.len().saturating_sub(1));
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let z = layer.apply(w, &inputs[l]);
        if l == last {
            return Forward {
                inputs,
                hidden_pre,
                output: z,
            };
        }
        inputs.push(z.iter().map(|&v| act.apply(v)).collect());
        hidden_pre.push(z);
    }
    unreachable!("model has at least one layer")
}

/// Per-sample loss and, optionally, gradient accumulated with weight `scale`.
fn sample_loss_grad(
    spec: &ModelSpec,
    layers: &[Layer],
    w: &[f64],
    x: &[f64],
    label: usize,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let act = spec.activation();
    let fwd = forward(layers, act, w, x);
    let (loss, mut delta) = if spec.is_classifier() {
        let lse = log_sum_exp(&fwd.output);
        let mut p = softmax(&fwd.output);
        p[label] -= 1.0;
        (lse - fwd.output[label], p)
    } else {
        let r = fwd.output[0] - label as f64;
        (r * r, vec![2.0 * r])
    };
    if let Some((g, scale)) = grad {
        for l in (0..layers.len()).rev() {
            layers[l].accumulate_outer(g, &delta, &fwd.inputs[l], scale);
            if l > 0 {
                let back = layers[l].backprop_input(w, &delta);
                delta = back
                    .iter()
                    .zip(&fwd.hidden_pre[l - 1])
                    .map(|(b, z)| b * act.derivative(*z))
                    .collect();
            }
        }
    }
    loss
}

/// Mean per-sample loss over the batch.
pub fn loss(spec: &ModelSpec, w: &[f64], batch: &Dataset) -> Result<f64> {
    spec.check(w, batch)?;
    let layers = spec.layers();
    let total: f64 = (0..batch.len())
        .map(|i| sample_loss_grad(spec, &layers, w, batch.row(i), batch.label(i), None))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and its exact gradient in one pass.
pub fn loss_and_gradient(spec: &ModelSpec, w: &[f64], batch: &Dataset) -> Result<(f64, WeightVector)> {
    spec.check(w, batch)?;
    let layers = spec.layers();
    let n = batch.len() as f64;
    let mut g = vec![0.0; w.len()];
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += sample_loss_grad(spec, &layers, w, batch.row(i), batch.label(i), Some((&mut g, 1.0 / n)));
    }
    Ok((total / n, WeightVector(g)))
}

/// The Jacobian `J(w)` of the mean loss.
pub fn gradient(spec: &ModelSpec, w: &[f64], batch: &Dataset) -> Result<WeightVector> {
    loss_and_gradient(spec, w, batch).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HvpMode {
    Analytic,
    FiniteDifference,
}

impl HvpMode {
    /// Analytic where available, finite differences otherwise.
    pub fn preferred(spec: &ModelSpec) -> Self {
        if spec.is_convex() {
            HvpMode::Analytic
        } else {
            HvpMode::FiniteDifference
        }
    }
}

/// Hessian-vector product `H(w) v` of the mean loss.
///
/// The finite-difference mode differences the analytic gradient along the unit
/// direction `v / |v|` with step `1e-5 * max(1, |w|)` and rescales by `|v|`.
pub fn hvp(spec: &ModelSpec, w: &[f64], batch: &Dataset, v: &[f64], mode: HvpMode) -> Result<WeightVector> {
    spec.check(w, batch)?;
    if v.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            actual: v.len(),
            context: "hvp direction",
        });
    }
    match mode {
        HvpMode::Analytic => analytic_hvp(spec, w, batch, v),
        HvpMode::FiniteDifference => {
            let vn = linalg::norm(v);
            if vn == 0.0 {
                return Ok(WeightVector::zeros(w.len()));
            }
            let eps = 1e-5 * linalg::norm(w).max(1.0);
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            linalg::axpy(eps / vn, v, &mut plus);
            linalg::axpy(-eps / vn, v, &mut minus);
            let gp = gradient(spec, &plus, batch)?;
            let gm = gradient(spec, &minus, batch)?;
            let s = vn / (2.0 * eps);
            Ok(WeightVector(
                gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) * s).collect(),
            ))
        }
    }
}

fn analytic_hvp(spec: &ModelSpec, w: &[f64], batch: &Dataset, v: &[f64]) -> Result<WeightVector> {
    let layers = spec.layers();
    let layer = match (&spec.kind, layers.as_slice()) {
        (ModelKind::Mlp { .. }, _) => return Err(Error::Unsupported("analytic Hessian-vector product")),
        (_, [only]) => *only,
        _ => unreachable!("linear models have a single layer"),
    };
    let n = batch.len() as f64;
    let mut out = vec![0.0; w.len()];
    for i in 0..batch.len() {
        let x = batch.row(i);
        // Directional change of the logits.
        let zv = layer.apply(v, x);
        let r = if spec.is_classifier() {
            let p = softmax(&layer.apply(w, x));
            let pz = linalg::dot(&p, &zv);
            p.iter().zip(&zv).map(|(pi, zi)| pi * (zi - pz)).collect()
        } else {
            vec![2.0 * zv[0]]
        };
        layer.accumulate_outer(&mut out, &r, x, 1.0 / n);
    }
    Ok(WeightVector(out))
}

/// A smoothness constant `alpha` with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub alpha: f64,
    /// `true` when `alpha` is a proven upper bound on the gradient Lipschitz
    /// constant; `false` for empirical (lower-bound) estimates.
    pub certified: bool,
}

/// Number of weight pairs sampled for the empirical MLP estimate.
pub const MLP_SMOOTHNESS_PAIRS: usize = 64;

/// Gradient Lipschitz constant of the mean loss over `dataset`.
///
/// * linear regression: `2 * lambda_max(X'X / n)`
/// * softmax classifier: `1/2 * lambda_max(X'X / n)`, since the softmax
///   Hessian block `diag(p) - p p'` never exceeds `1/2` in spectral norm
/// * mlp: the largest `|J(w) - J(w')| / |w - w'|` over sampled nearby pairs, a
///   non-certified lower estimate
///
/// `X` carries a column of ones when the model has a bias.
pub fn smoothness_constant(spec: &ModelSpec, dataset: &Dataset) -> Result<Smoothness> {
    spec.validate()?;
    spec.check(&vec![0.0; spec.total_dim()], dataset)?;
    let curvature = match spec.kind {
        ModelKind::LinearRegression => 2.0,
        ModelKind::LogisticClassifier => 0.5,
        ModelKind::Mlp { .. } => {
            return Ok(Smoothness {
                alpha: empirical_smoothness(spec, dataset)?,
                certified: false,
            })
        }
    };
    let d = dataset.dim() + usize::from(spec.bias);
    let mut gram = vec![0.0; d * d];
    let mut xt = vec![1.0; d];
    for i in 0..dataset.len() {
        xt[..dataset.dim()].copy_from_slice(dataset.row(i));
        for a in 0..d {
            for b in 0..d {
                gram[a * d + b] += xt[a] * xt[b];
            }
        }
    }
    let n = dataset.len() as f64;
    gram.iter_mut().for_each(|g| *g /= n);
    let lambda = linalg::power_iteration_psd(&gram, d, 1e-12, 100_000);
    Ok(Smoothness {
        alpha: curvature * lambda,
        certified: true,
    })
}

fn empirical_smoothness(spec: &ModelSpec, dataset: &Dataset) -> Result<f64> {
    let n = spec.total_dim();
    let mut best: f64 = 0.0;
    for k in 0..MLP_SMOOTHNESS_PAIRS as u64 {
        let w = init_weights(spec, seed::derive(0x5eed, seed::Stream::Estimator, k), 1.0);
        let mut rng = seed::rng(seed::derive(0x5eed, seed::Stream::Estimator, 1_000 + k));
        let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let un = linalg::norm(&u);
        u.iter_mut().for_each(|x| *x *= 1e-3 / un);
        let w2: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a + b).collect();
        let g1 = gradient(spec, &w, dataset)?;
        let g2 = gradient(spec, &w2, dataset)?;
        best = best.max(linalg::norm(&linalg::sub(&g1, &g2)) / 1e-3);
    }
    Ok(best)
}

/// Output-layer scores for one sample.
pub fn predict(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    forward(&spec.layers(), spec.activation(), w, x).output
}

/// Fraction of argmax-correct predictions; ties go to the smaller class index.
pub fn accuracy(spec: &ModelSpec, w: &[f64], batch: &Dataset) -> Result<f64> {
    if !spec.is_classifier() {
        return Err(Error::Unsupported("accuracy on a regression model"));
    }
    spec.check(w, batch)?;
    let layers = spec.layers();
    let act = spec.activation();
    let correct = (0..batch.len())
        .filter(|&i| {
            let z = forward(&layers, act, w, batch.row(i)).output;
            let mut arg = 0;
            for (c, &v) in z.iter().enumerate().skip(1) {
                if v > z[arg] {
                    arg = c;
                }
            }
            arg == batch.label(i)
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}
