//! Dense layers with analytic reverse-mode gradients, the two losses used
//! for training, SGD/Adam, and a central-difference gradient checker.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{IGNORE, INLIER, OUTLIER};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let t = (c * (x + a * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
            }
        }
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Fully-connected layer `y = act(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Real> DenseLayer<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights =
            Array2::from_shape_fn((out_dim, in_dim), |_| T::lit(rng.random_range(-limit..=limit)));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn from_parts(weights: Array2<T>, bias: Array1<T>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() || weights.is_empty() {
            return Err(Error::DimMismatch(format!(
                "weights {:?} with bias of length {}",
                weights.dim(),
                bias.len()
            )));
        }
        if let Some(position) = weights.iter().chain(bias.iter()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Pre-activations `x W^T + b` for a batch `N x in`.
    pub fn pre_activation(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimMismatch(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let act = self.activation;
        Ok(self.pre_activation(x)?.mapv_into(|v| act.apply(v)))
    }

    /// Gradients given the layer input, its pre-activations, and `dL/dy`.
    pub fn backward(
        &self,
        input: &Array2<T>,
        pre: &Array2<T>,
        d_out: &Array2<T>,
    ) -> (LayerGrads<T>, Array2<T>) {
        let act = self.activation;
        let mut d_pre = d_out.clone();
        if act != Activation::Identity {
            d_pre.zip_mut_with(pre, |g, &z| *g *= act.derivative(z));
        }
        let weights = d_pre.t().dot(input);
        let bias = d_pre.sum_axis(Axis(0));
        let dx = d_pre.dot(&self.weights);
        (LayerGrads { weights, bias }, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> MlpGrads<T> {
    /// Gradients flattened in parameter order (`w0, b0, w1, b1, ...`).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    generation: u64,
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

/// Pixel-wise multi-layer perceptron.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
    generation: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl<T: Real> Mlp<T> {
    /// Layer widths `dims[0] -> dims[1] -> ...`, `hidden` activation between
    /// layers and `output` after the last one.
    pub fn new<R: Rng>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::DimMismatch(format!("invalid mlp dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::xavier(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Ok(Self {
            layers,
            generation: fresh_generation(),
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::DimMismatch("mlp needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimMismatch(format!(
                    "layer output {} feeds layer input {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            generation: fresh_generation(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }

    /// Output without recording a tape.
    pub fn infer(&self, x: &Array2<T>) -> Result<Array2<T>> {
        check_finite(x)?;
        let mut h = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, Tape<T>)> {
        check_finite(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let z = l.pre_activation(&h)?;
            let act = l.activation;
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok((
            h,
            Tape {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    /// Reverse-mode gradients of the computation recorded in `tape`.
    pub fn backward(&self, tape: &Tape<T>, d_out: &Array2<T>) -> Result<(MlpGrads<T>, Array2<T>)> {
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        let last = tape.pre.last().expect("non-empty");
        if d_out.dim() != last.dim() {
            return Err(Error::DimMismatch(format!(
                "output gradient {:?} for output {:?}",
                d_out.dim(),
                last.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = d_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (lg, dx) = l.backward(&tape.inputs[i], &tape.pre[i], &g);
            grads.push(lg);
            g = dx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }

    /// Parameter tensors in order `w0, b0, w1, b1, ...`. Outstanding tapes
    /// become stale.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.generation = fresh_generation();
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Tensor names matching [`Mlp::params_mut`] order.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }
}

fn check_finite<T: Real>(x: &Array2<T>) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(position) => Err(Error::NonFinite { position }),
        None => Ok(()),
    }
}

/// Loss value, its gradient, and how many rows contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T, G> {
    pub loss: T,
    pub grad: G,
    pub valid: usize,
    pub ignored: usize,
}

/// Mean softmax cross-entropy over rows whose label is not [`IGNORE`].
pub fn softmax_cross_entropy<T: Real>(
    logits: &Array2<T>,
    labels: &[u8],
) -> Result<LossOutput<T, Array2<T>>> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::DimMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(position) = labels
        .iter()
        .position(|&l| l != IGNORE && (l as usize) >= k)
    {
        return Err(Error::IllegalLabel {
            value: labels[position],
            position,
        });
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    let scale = T::one() / T::lit(valid as f64);
    let mut grad = Array2::zeros((n, k));
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label as usize];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            let target = if j == label as usize { T::one() } else { T::zero() };
            grad[[i, j]] = (p - target) * scale;
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
        valid,
        ignored: n - valid,
    })
}

/// Mean binary cross-entropy treating `z` as logits, in the stable form
/// `max(z, 0) - z t + log(1 + exp(-|z|))`.
pub fn sigmoid_bce_with_logits<T: Real>(z: &[T], targets: &[u8]) -> Result<LossOutput<T, Vec<T>>> {
    if z.len() != targets.len() {
        return Err(Error::DimMismatch(format!(
            "{} targets for {} logits",
            targets.len(),
            z.len()
        )));
    }
    if let Some(position) = targets
        .iter()
        .position(|&t| t != INLIER && t != OUTLIER && t != IGNORE)
    {
        return Err(Error::IllegalLabel {
            value: targets[position],
            position,
        });
    }
    let valid = targets.iter().filter(|&&t| t != IGNORE).count();
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    let scale = T::one() / T::lit(valid as f64);
    let mut grad = vec![T::zero(); z.len()];
    let mut total = T::zero();
    for (i, (&zi, &ti)) in z.iter().zip(targets).enumerate() {
        if ti == IGNORE {
            continue;
        }
        let t = if ti == OUTLIER { T::one() } else { T::zero() };
        total += zi.max(T::zero()) - zi * t + (-zi.abs()).exp().ln_1p();
        grad[i] = (sigmoid(zi) - t) * scale;
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
        valid,
        ignored: z.len() - valid,
    })
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Optimizer selection and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// One named parameter tensor and its gradient.
pub struct ParamUpdate<'a, T> {
    pub name: String,
    pub values: &'a mut [T],
    pub grad: &'a [T],
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor. Nothing is modified if any
    /// gradient is non-finite or mis-shaped.
    pub fn step(&mut self, updates: Vec<ParamUpdate<'_, T>>) -> Result<()> {
        for u in &updates {
            if u.values.len() != u.grad.len() {
                return Err(Error::DimMismatch(format!(
                    "tensor {} has {} values and {} gradients",
                    u.name,
                    u.values.len(),
                    u.grad.len()
                )));
            }
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(u.name.clone()));
            }
            if let Some((m, _)) = self.moments.get(&u.name) {
                if m.len() != u.values.len() {
                    return Err(Error::DimMismatch(format!(
                        "tensor {} changed shape between steps",
                        u.name
                    )));
                }
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let lr = T::lit(lr);
                for u in updates {
                    for (p, &g) in u.values.iter_mut().zip(u.grad) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let bc1 = T::lit(1.0 - beta1.powi(t));
                let bc2 = T::lit(1.0 - beta2.powi(t));
                let (lr, b1, b2, eps) = (T::lit(lr), T::lit(beta1), T::lit(beta2), T::lit(eps));
                for u in updates {
                    let n = u.values.len();
                    let (m, v) = self
                        .moments
                        .entry(u.name)
                        .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
                    for i in 0..n {
                        let g = u.grad[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        u.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst_coord: usize,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` at `params`.
///
/// At most `max_coords` coordinates are checked, chosen by `seed` when the
/// parameter vector is larger. The relative error of a coordinate is
/// `|analytic - numeric| / max(|numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let coords: Vec<usize> = if params.len() <= max_coords {
        (0..params.len()).collect()
    } else {
        let mut rng = crate::seed::rng_for(seed, "grad_check", 0);
        let mut idx = rand::seq::index::sample(&mut rng, params.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst_coord: coords.first().copied().unwrap_or(0),
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(GRAD_CHECK_FLOOR);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_coord = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::seed::rng_for;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::from_parts(Array2::<f64>::eye(3), Array1::zeros(3), Activation::Identity).unwrap();
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        assert_eq!(mlp.infer(&x).unwrap(), x);
    }

    #[test]
    fn relu_kills_negative_preactivations() {
        let layer = DenseLayer::from_parts(-Array2::<f64>::eye(2), array![-1.0, -1.0], Activation::Relu).unwrap();
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let y = mlp.infer(&array![[1.0, 2.0], [0.0, 0.5]]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_net_matches_naive_matmul() {
        let mut rng = rng_for(1, "test", 0);
        let mlp = Mlp::<f64>::new(&[4, 6, 3], Activation::Gelu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-2.0..2.0));
        let y = mlp.infer(&x).unwrap();
        let want = oracle::mlp_forward_naive(&mlp, &x);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = rng_for(2, "test", 0);
        let mlp = Mlp::<f64>::new(&[3, 4, 2], Activation::Gelu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (y, tape) = mlp.forward(&x).unwrap();
        let (g, dx) = mlp.backward(&tape, &Array2::zeros(y.dim())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_sum_loss_has_closed_form_gradient() {
        let mut rng = rng_for(3, "test", 0);
        let mlp = Mlp::<f64>::new(&[3, 2], Activation::Identity, Activation::Identity, &mut rng).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]];
        let (y, tape) = mlp.forward(&x).unwrap();
        let (g, _) = mlp.backward(&tape, &Array2::ones(y.dim())).unwrap();
        let col_sums = x.sum_axis(Axis(0));
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.layers[0].weights[[o, i]] - col_sums[i]).abs() < 1e-14);
            }
            assert_eq!(g.layers[0].bias[o], 2.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_for(4, "test", 0);
        let mlp = Mlp::<f64>::new(&[3, 5, 4, 2], Activation::Gelu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.5..1.5));
        let seed_grad = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let (_, tape) = mlp.forward(&x).unwrap();
        let (g, _) = mlp.backward(&tape, &seed_grad).unwrap();
        let params = mlp.flatten_params();
        let loss = |p: &[f64]| {
            let mut m = mlp.clone();
            m.set_flat_params(p).unwrap();
            (m.infer(&x).unwrap() * &seed_grad).sum()
        };
        let r = grad_check(loss, &params, &g.flatten(), 1e-5, 200, 0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = rng_for(5, "test", 0);
        let mlp = Mlp::<f64>::new(&[3, 4, 2], Activation::Gelu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.5..1.5));
        let (_, tape) = mlp.forward(&x).unwrap();
        let (_, dx) = mlp.backward(&tape, &Array2::ones((2, 2))).unwrap();
        let f = |p: &[f64]| {
            let xi = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            mlp.infer(&xi).unwrap().sum()
        };
        let r = grad_check(f, x.as_slice().unwrap(), dx.as_slice().unwrap(), 1e-5, 200, 0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = rng_for(6, "test", 0);
        let mut mlp = Mlp::<f64>::new(&[2, 2], Activation::Gelu, Activation::Identity, &mut rng).unwrap();
        let (y, tape) = mlp.forward(&array![[1.0, 2.0]]).unwrap();
        mlp.params_mut()[0][0] += 1.0;
        assert!(matches!(mlp.backward(&tape, &y), Err(Error::StaleTape)));
        let other = Mlp::<f64>::new(&[2, 2], Activation::Gelu, Activation::Identity, &mut rng).unwrap();
        let (_, tape2) = other.forward(&array![[1.0, 2.0]]).unwrap();
        assert!(matches!(mlp.backward(&tape2, &y), Err(Error::StaleTape)));
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = rng_for(7, "test", 0);
        let mlp = Mlp::<f64>::new(&[3, 3, 3], Activation::Gelu, Activation::Gelu, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        assert_eq!(mlp.infer(&x).unwrap(), mlp.infer(&x).unwrap());
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5_f64] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((Activation::Gelu.derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let out = softmax_cross_entropy(&Array2::<f64>::zeros((3, 4)), &[0, 1, 3]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let out = softmax_cross_entropy(&array![[100.0_f64, 0.0, 0.0]], &[0]).unwrap();
        assert!(out.loss < 1e-40);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = rng_for(8, "test", 0);
        let logits = Array2::from_shape_fn((20, 5), |_| rng.random_range(-4.0..4.0_f64));
        let labels: Vec<u8> = (0..20).map(|i| if i % 7 == 3 { IGNORE } else { (i % 5) as u8 }).collect();
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        let want = oracle::cross_entropy_direct(&logits, &labels);
        assert!((out.loss - want).abs() < 1e-10);
        assert_eq!(out.ignored, 3);
        let params = logits.as_slice().unwrap().to_vec();
        let r = grad_check(
            |p| {
                let l = Array2::from_shape_vec((20, 5), p.to_vec()).unwrap();
                softmax_cross_entropy(&l, &labels).unwrap().loss
            },
            &params,
            out.grad.as_slice().unwrap(),
            1e-5,
            200,
            1,
        );
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn all_ignored_rows_rejected() {
        assert!(matches!(
            softmax_cross_entropy(&Array2::<f64>::zeros((2, 2)), &[IGNORE, IGNORE]),
            Err(Error::AllIgnored)
        ));
        assert!(matches!(
            sigmoid_bce_with_logits(&[0.0_f64], &[IGNORE]),
            Err(Error::AllIgnored)
        ));
    }

    #[test]
    fn bce_at_zero_is_log_two() {
        let out = sigmoid_bce_with_logits(&[0.0_f64], &[1]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let out = sigmoid_bce_with_logits(&[40.0_f64, -800.0, 800.0], &[1, 0, 1]).unwrap();
        assert!(out.loss.is_finite() && out.loss < 1e-15);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = rng_for(9, "test", 0);
        let z: Vec<f64> = (0..50).map(|_| rng.random_range(-8.0..8.0)).collect();
        let t: Vec<u8> = (0..50).map(|i| [0, 1, IGNORE][i % 3]).collect();
        let out = sigmoid_bce_with_logits(&z, &t).unwrap();
        assert!((out.loss - oracle::bce_naive(&z, &t)).abs() < 1e-10);
        let r = grad_check(|p| sigmoid_bce_with_logits(p, &t).unwrap().loss, &z, &out.grad, 1e-5, 200, 0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn sgd_step() {
        let mut p = [1.0_f64];
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1 });
        opt.step(vec![ParamUpdate { name: "p".into(), values: &mut p, grad: &[1.0] }]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op() {
        let mut p = [1.5_f64, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::default());
        for _ in 0..3 {
            opt.step(vec![ParamUpdate { name: "p".into(), values: &mut p, grad: &[0.0, 0.0] }]).unwrap();
        }
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn adam_matches_hand_stepped_sequence() {
        // minimise 0.5 * (p - 3)^2 from p = 0
        let mut p = [0.0_f64];
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1));
        let mut got = Vec::new();
        for _ in 0..3 {
            let g = [p[0] - 3.0];
            opt.step(vec![ParamUpdate { name: "p".into(), values: &mut p, grad: &g }]).unwrap();
            got.push(p[0]);
        }
        let want = oracle::adam_hand_stepped(0.0, 3.0, 0.1, 3);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_with_name() {
        let mut p = [1.0_f64];
        let mut opt = Optimizer::new(OptimizerKind::default());
        let err = opt
            .step(vec![ParamUpdate { name: "uem.proj.0.weight".into(), values: &mut p, grad: &[f64::NAN] }])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "uem.proj.0.weight"));
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn grad_check_accepts_linear_and_flags_scaled_gradient() {
        let c = [2.0, -3.0, 0.5];
        let f = |p: &[f64]| p.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let r = grad_check(f, &[1.0, 2.0, 3.0], &c, 1e-5, 200, 0);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        let wrong: Vec<f64> = c.iter().map(|v| v * 2.0).collect();
        let r = grad_check(f, &[1.0, 2.0, 3.0], &wrong, 1e-5, 200, 0);
        assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_samples_at_most_max_coords() {
        let p = vec![0.0; 1000];
        let r = grad_check(|x| x.iter().sum(), &p, &vec![1.0; 1000], 1e-5, 200, 9);
        assert_eq!(r.coords_checked, 200);
    }

    proptest! {
        #[test]
        fn ignored_rows_equal_deleted_rows(seed in 0u64..300) {
            let mut rng = rng_for(seed, "prop.ce", 0);
            let logits = Array2::from_shape_fn((8, 3), |_| rng.random_range(-3.0..3.0_f64));
            let labels: Vec<u8> = (0..8).map(|_| if rng.random_bool(0.3) { IGNORE } else { rng.random_range(0..3u8) }).collect();
            prop_assume!(labels.iter().any(|&l| l != IGNORE));
            let keep: Vec<usize> = (0..8).filter(|&i| labels[i] != IGNORE).collect();
            let sub = logits.select(Axis(0), &keep);
            let sub_labels: Vec<u8> = keep.iter().map(|&i| labels[i]).collect();
            let a = softmax_cross_entropy(&logits, &labels).unwrap().loss;
            let b = softmax_cross_entropy(&sub, &sub_labels).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-14);

            let z: Vec<f64> = logits.column(0).to_vec();
            let t: Vec<u8> = labels.iter().map(|&l| if l == IGNORE { IGNORE } else { l % 2 }).collect();
            let zs: Vec<f64> = keep.iter().map(|&i| z[i]).collect();
            let ts: Vec<u8> = keep.iter().map(|&i| t[i]).collect();
            let a = sigmoid_bce_with_logits(&z, &t).unwrap().loss;
            let b = sigmoid_bce_with_logits(&zs, &ts).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-14);
        }
    }
}
