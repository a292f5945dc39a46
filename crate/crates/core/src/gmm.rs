//! Diagonal-covariance Gaussian mixtures with fixed uniform weights, fitted
//! by Sinkhorn EM (an EM whose E-step is a balanced entropic assignment of
//! samples to components).

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Real};
use crate::seed::rng_for;

/// Lower bound applied to every variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Component mass below which an EM update leaves the component untouched.
pub const EMPTY_MASS: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(x; mean, diag(var))`.
pub fn gaussian_log_density<T: Real>(x: &[T], mean: &[T], var: &[T]) -> Result<T> {
    if x.len() != mean.len() || x.len() != var.len() {
        return Err(Error::DimMismatch(format!(
            "x has {} dims, mean {}, var {}",
            x.len(),
            mean.len(),
            var.len()
        )));
    }
    let floor = T::lit(VAR_FLOOR);
    if let Some((index, v)) = var
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v >= floor) || !v.is_finite())
    {
        return Err(Error::DegenerateCovariance {
            index,
            value: v.to_f64_lossy(),
        });
    }
    Ok(log_density_unchecked(x, mean, var))
}

#[inline]
fn log_density_unchecked<T: Real>(x: &[T], mean: &[T], var: &[T]) -> T {
    let mut log_det = T::zero();
    let mut maha = T::zero();
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        log_det += var[i].ln();
        maha += d * d / var[i];
    }
    -T::lit(0.5) * (T::lit(x.len() as f64 * LN_2PI) + log_det + maha)
}

/// Per-class Gaussian mixtures sharing one component count and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmHead<T> {
    classes: usize,
    components: usize,
    dim: usize,
    /// `[class][component][dim]`
    means: Vec<T>,
    /// `[class][component][dim]`
    vars: Vec<T>,
    /// `[class][component]`
    weights: Vec<T>,
}

impl<T: Real> GmmHead<T> {
    pub fn new(
        classes: usize,
        components: usize,
        dim: usize,
        means: Vec<T>,
        vars: Vec<T>,
        weights: Vec<T>,
    ) -> Result<Self> {
        if classes == 0 || components == 0 || dim == 0 {
            return Err(Error::DimMismatch(format!(
                "gmm head needs positive sizes, got {classes}x{components}x{dim}"
            )));
        }
        let n = classes * components * dim;
        if means.len() != n || vars.len() != n || weights.len() != classes * components {
            return Err(Error::DimMismatch(format!(
                "gmm head {classes}x{components}x{dim}: means {}, vars {}, weights {}",
                means.len(),
                vars.len(),
                weights.len()
            )));
        }
        if let Some(position) = means.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        let floor = T::lit(VAR_FLOOR);
        if let Some((index, v)) = vars
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= floor) || !v.is_finite())
        {
            return Err(Error::DegenerateCovariance {
                index,
                value: v.to_f64_lossy(),
            });
        }
        for k in 0..classes {
            let w = &weights[k * components..(k + 1) * components];
            let total: f64 = w.iter().map(|v| v.to_f64_lossy()).sum();
            if w.iter().any(|v| !(*v > T::zero())) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "weights of class {k} must be positive and sum to 1, sum is {total}"
                )));
            }
        }
        Ok(Self {
            classes,
            components,
            dim,
            means,
            vars,
            weights,
        })
    }

    /// Zero means, unit variances, uniform weights.
    pub fn standard(classes: usize, components: usize, dim: usize) -> Result<Self> {
        let n = classes * components * dim;
        Self::new(
            classes,
            components,
            dim,
            vec![T::zero(); n],
            vec![T::one(); n],
            vec![T::one() / T::lit(components as f64); classes * components],
        )
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, k: usize, c: usize) -> usize {
        (k * self.components + c) * self.dim
    }

    pub fn mean(&self, k: usize, c: usize) -> &[T] {
        let o = self.offset(k, c);
        &self.means[o..o + self.dim]
    }

    pub fn var(&self, k: usize, c: usize) -> &[T] {
        let o = self.offset(k, c);
        &self.vars[o..o + self.dim]
    }

    pub fn weight(&self, k: usize, c: usize) -> T {
        self.weights[k * self.components + c]
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn vars(&self) -> &[T] {
        &self.vars
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.means.len() + self.vars.len() + self.weights.len()
    }

    /// Sets one component's moments, clamping variances to the floor.
    pub fn set_component(&mut self, k: usize, c: usize, mean: &[T], var: &[T]) -> Result<()> {
        if mean.len() != self.dim || var.len() != self.dim {
            return Err(Error::DimMismatch(format!(
                "component moments of length {}/{} for dim {}",
                mean.len(),
                var.len(),
                self.dim
            )));
        }
        if let Some(position) = mean.iter().chain(var).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        let o = self.offset(k, c);
        let floor = T::lit(VAR_FLOOR);
        self.means[o..o + self.dim].copy_from_slice(mean);
        for (dst, &v) in self.vars[o..o + self.dim].iter_mut().zip(var) {
            *dst = if v < floor { floor } else { v };
        }
        Ok(())
    }

    /// Adds `delta` to the means and variances (variances re-floored).
    pub fn apply_delta(&mut self, d_means: &[T], d_vars: &[T]) -> Result<()> {
        if d_means.len() != self.means.len() || d_vars.len() != self.vars.len() {
            return Err(Error::DimMismatch("gmm parameter delta".into()));
        }
        let floor = T::lit(VAR_FLOOR);
        for (m, &d) in self.means.iter_mut().zip(d_means) {
            *m += d;
        }
        for (v, &d) in self.vars.iter_mut().zip(d_vars) {
            let nv = *v + d;
            *v = if nv < floor { floor } else { nv };
        }
        Ok(())
    }

    /// Mutable access for optimizers: `(means, vars)`.
    pub fn moments_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.means, &mut self.vars)
    }

    /// Re-applies the variance floor after an external update.
    pub fn clamp_variances(&mut self) {
        let floor = T::lit(VAR_FLOOR);
        for v in &mut self.vars {
            if !(*v >= floor) {
                *v = floor;
            }
        }
    }

    /// `log pi_kc + log N(x; mu_kc, Sigma_kc)` for every component of class `k`.
    pub fn component_log_densities(&self, x: &[T], k: usize, out: &mut [T]) {
        for (c, slot) in out.iter_mut().enumerate().take(self.components) {
            let o = self.offset(k, c);
            *slot = self.weight(k, c).ln()
                + log_density_unchecked(x, &self.means[o..o + self.dim], &self.vars[o..o + self.dim]);
        }
    }

    /// Mixture log-density of class `k` at `x` via log-sum-exp.
    pub fn class_log_density(&self, x: &[T], k: usize) -> T {
        let mut buf = vec![T::zero(); self.components];
        self.component_log_densities(x, k, &mut buf);
        log_sum_exp(&buf)
    }

    fn check_input(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::DimMismatch(format!(
                "gmm head of dim {} applied to {} features",
                self.dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Component scores for a batch: `N x (classes * components)`, column
    /// `k * C + c`.
    pub fn component_scores(&self, x: &Array2<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let kc = self.classes * self.components;
        let d = self.dim;
        // Per-component constants and precisions, hoisted out of the pixel loop.
        let prec: Vec<T> = self.vars.iter().map(|&v| T::one() / v).collect();
        let half = T::lit(0.5);
        let consts: Vec<T> = (0..kc)
            .map(|j| {
                let log_det: T = self.vars[j * d..(j + 1) * d].iter().map(|v| v.ln()).sum();
                self.weights[j].ln() - half * (T::lit(d as f64 * LN_2PI) + log_det)
            })
            .collect();
        let mut out = Array2::zeros((x.nrows(), kc));
        let mut row_buf = vec![T::zero(); d];
        for (n, row) in x.outer_iter().enumerate() {
            let xs = as_slice(&row, &mut row_buf);
            let mut o = out.row_mut(n);
            for j in 0..kc {
                let mean = &self.means[j * d..(j + 1) * d];
                let p = &prec[j * d..(j + 1) * d];
                let mut maha = T::zero();
                for i in 0..d {
                    let diff = xs[i] - mean[i];
                    maha += diff * diff * p[i];
                }
                o[j] = consts[j] - half * maha;
            }
        }
        Ok(out)
    }

    /// Class log-densities from component scores: `N x classes`.
    pub fn class_scores(&self, components: &Array2<T>) -> Array2<T> {
        let c = self.components;
        Array2::from_shape_fn((components.nrows(), self.classes), |(n, k)| {
            let row = components.row(n);
            let s = row.as_slice().expect("row-major");
            log_sum_exp(&s[k * c..(k + 1) * c])
        })
    }

    /// Class log-densities for a batch: `N x classes`.
    pub fn log_densities(&self, x: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.class_scores(&self.component_scores(x)?))
    }

    /// Converts a gradient on class scores into a gradient on component
    /// scores (adds into `d_components`).
    pub fn class_to_component_grad(
        &self,
        components: &Array2<T>,
        class_scores: &Array2<T>,
        d_class: &Array2<T>,
        d_components: &mut Array2<T>,
    ) {
        let c = self.components;
        for n in 0..components.nrows() {
            for k in 0..self.classes {
                let g = d_class[[n, k]];
                if g == T::zero() {
                    continue;
                }
                let lse = class_scores[[n, k]];
                for j in k * c..(k + 1) * c {
                    d_components[[n, j]] += g * (components[[n, j]] - lse).exp();
                }
            }
        }
    }

    /// Back-propagates a gradient on component scores to the inputs and to
    /// the component means and variances.
    pub fn backward_components(&self, x: &Array2<T>, d_components: &Array2<T>) -> Result<GmmGrads<T>> {
        self.check_input(x)?;
        let kc = self.classes * self.components;
        if d_components.dim() != (x.nrows(), kc) {
            return Err(Error::DimMismatch("component gradient shape".into()));
        }
        let mut dx = Array2::zeros(x.dim());
        let mut d_means = vec![T::zero(); self.means.len()];
        let mut d_vars = vec![T::zero(); self.vars.len()];
        let half = T::lit(0.5);
        let prec: Vec<T> = self.vars.iter().map(|&v| T::one() / v).collect();
        let d = self.dim;
        let mut row_buf = vec![T::zero(); d];
        for n in 0..x.nrows() {
            let xr = x.row(n);
            let xs = as_slice(&xr, &mut row_buf);
            let mut dxr = dx.row_mut(n);
            for j in 0..kc {
                let g = d_components[[n, j]];
                if g == T::zero() {
                    continue;
                }
                let o = j * d;
                for i in 0..d {
                    let p = prec[o + i];
                    let z = (xs[i] - self.means[o + i]) * p;
                    dxr[i] -= g * z;
                    d_means[o + i] += g * z;
                    d_vars[o + i] += g * half * (z * z - p);
                }
            }
        }
        Ok(GmmGrads {
            dx,
            d_means,
            d_vars,
        })
    }

    /// Sinkhorn-EM update of class `k` from its samples and assignment plan.
    ///
    /// New moments are the plan-weighted mean and variance per component,
    /// blended as `momentum * old + (1 - momentum) * new`. Components with
    /// mass below [`EMPTY_MASS`] are left unchanged; their count is returned.
    pub fn em_update(
        &mut self,
        k: usize,
        features: &Array2<T>,
        plan: &SinkhornPlan<T>,
        momentum: T,
    ) -> Result<usize> {
        if k >= self.classes {
            return Err(Error::DimMismatch(format!(
                "class {k} of a {}-class head",
                self.classes
            )));
        }
        self.check_input(features)?;
        if plan.plan.dim() != (features.nrows(), self.components) {
            return Err(Error::DimMismatch(format!(
                "plan {:?} for {} samples and {} components",
                plan.plan.dim(),
                features.nrows(),
                self.components
            )));
        }
        let floor = T::lit(VAR_FLOOR);
        let keep = momentum;
        let blend = T::one() - momentum;
        let mut empty = 0;
        for c in 0..self.components {
            let weights = plan.plan.column(c);
            let mass: T = weights.iter().copied().sum();
            if !(mass.to_f64_lossy() >= EMPTY_MASS) {
                empty += 1;
                continue;
            }
            let mut mean = vec![T::zero(); self.dim];
            for (n, &w) in weights.iter().enumerate() {
                for (i, m) in mean.iter_mut().enumerate() {
                    *m += w * features[[n, i]];
                }
            }
            for m in &mut mean {
                *m /= mass;
            }
            let mut var = vec![T::zero(); self.dim];
            for (n, &w) in weights.iter().enumerate() {
                for (i, v) in var.iter_mut().enumerate() {
                    let d = features[[n, i]] - mean[i];
                    *v += w * d * d;
                }
            }
            let o = self.offset(k, c);
            for i in 0..self.dim {
                let new_var = var[i] / mass;
                let m = keep * self.means[o + i] + blend * mean[i];
                let v = keep * self.vars[o + i] + blend * new_var;
                self.means[o + i] = m;
                self.vars[o + i] = if v < floor { floor } else { v };
            }
        }
        Ok(empty)
    }
}

fn as_slice<'a, T: Real>(row: &'a ArrayView1<'a, T>, buf: &'a mut [T]) -> &'a [T] {
    match row.as_slice() {
        Some(s) => s,
        None => {
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = v;
            }
            buf
        }
    }
}

/// Gradients produced by [`GmmHead::backward_components`].
#[derive(Debug, Clone)]
pub struct GmmGrads<T> {
    pub dx: Array2<T>,
    pub d_means: Vec<T>,
    pub d_vars: Vec<T>,
}

/// Checked mixture log-density of class `k`.
pub fn gmm_log_density<T: Real>(x: &[T], head: &GmmHead<T>, k: usize) -> Result<T> {
    if k >= head.classes {
        return Err(Error::DimMismatch(format!(
            "class {k} of a {}-class head",
            head.classes
        )));
    }
    if x.len() != head.dim {
        return Err(Error::DimMismatch(format!(
            "x has {} dims, head has {}",
            x.len(),
            head.dim
        )));
    }
    if let Some(position) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { position });
    }
    Ok(head.class_log_density(x, k))
}

/// Entropic balanced assignment of `N` samples to `C` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornPlan<T> {
    /// `N x C`, non-negative, total mass 1.
    pub plan: Array2<T>,
    pub iterations: usize,
    pub epsilon: T,
    /// `sum_i |row_i - 1/N|`
    pub row_residual: T,
    /// `sum_j |col_j - 1/C|`
    pub col_residual: T,
}

impl<T: Real> SinkhornPlan<T> {
    pub fn residual(&self) -> T {
        self.row_residual + self.col_residual
    }

    /// Index of the largest entry in each row (ties go to the lower index).
    pub fn hard_assignment(&self) -> Vec<usize> {
        self.plan
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Runs `iters` alternating row/column normalizations of `exp(logliks / eps)`
/// toward marginals `(1/N, 1/C)`, in the log domain.
///
/// With `iters == 0` the plan is the globally normalized kernel.
pub fn sinkhorn_assign<T: Real>(
    component_logliks: &Array2<T>,
    epsilon: T,
    iters: usize,
) -> Result<SinkhornPlan<T>> {
    let (n, c) = component_logliks.dim();
    if c == 0 || n < c {
        return Err(Error::DimMismatch(format!(
            "sinkhorn needs N >= C >= 1, got N={n}, C={c}"
        )));
    }
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "sinkhorn epsilon must be positive, got {epsilon}"
        )));
    }
    if let Some(((row, col), _)) = component_logliks
        .indexed_iter()
        .find(|(_, v)| !v.is_finite())
    {
        return Err(Error::InvalidCost { row, col });
    }
    let kernel = component_logliks.mapv(|v| v / epsilon);
    let log_row_target = -T::lit(n as f64).ln();
    let log_col_target = -T::lit(c as f64).ln();
    let mut u = vec![T::zero(); n];
    let mut v = vec![T::zero(); c];
    let mut buf_c = vec![T::zero(); c];
    let mut buf_n = vec![T::zero(); n];

    if iters == 0 {
        let all: Vec<T> = kernel.iter().copied().collect();
        let total = log_sum_exp(&all);
        u.iter_mut().for_each(|x| *x = -total);
    }
    for _ in 0..iters {
        for i in 0..n {
            for j in 0..c {
                buf_c[j] = kernel[[i, j]] + v[j];
            }
            u[i] = log_row_target - log_sum_exp(&buf_c);
        }
        for j in 0..c {
            for i in 0..n {
                buf_n[i] = kernel[[i, j]] + u[i];
            }
            v[j] = log_col_target - log_sum_exp(&buf_n);
        }
    }
    let plan = Array2::from_shape_fn((n, c), |(i, j)| (kernel[[i, j]] + u[i] + v[j]).exp());
    let row_t = T::one() / T::lit(n as f64);
    let col_t = T::one() / T::lit(c as f64);
    let row_residual = plan
        .outer_iter()
        .map(|r| (r.sum() - row_t).abs())
        .fold(T::zero(), |a, b| a + b);
    let col_residual = plan
        .columns()
        .into_iter()
        .map(|col| (col.sum() - col_t).abs())
        .fold(T::zero(), |a, b| a + b);
    Ok(SinkhornPlan {
        plan,
        iterations: iters,
        epsilon,
        row_residual,
        col_residual,
    })
}

/// Sinkhorn-EM hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub components: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub em_rounds: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 5,
            epsilon: 0.1,
            sinkhorn_iters: 10,
            em_rounds: 20,
            momentum: 0.99,
            seed: 0,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidConfig("gmm components must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("gmm epsilon must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("gmm momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-round diagnostics of [`fit_gmm`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitReport {
    /// Average class log-likelihood of each class's samples, one entry per
    /// round plus the final state, averaged over classes.
    pub mean_loglik: Vec<f64>,
    pub empty_component_updates: usize,
}

/// One Sinkhorn-EM round on class `k`; returns the number of empty components.
pub fn sinkhorn_em_round<T: Real>(
    head: &mut GmmHead<T>,
    k: usize,
    features: &Array2<T>,
    cfg: &GmmConfig,
) -> Result<usize> {
    let comps = head.components;
    if features.nrows() < comps {
        return Err(Error::InsufficientSamples {
            class: k,
            found: features.nrows(),
            needed: comps,
        });
    }
    let mut logliks = Array2::zeros((features.nrows(), comps));
    let mut buf = vec![T::zero(); comps];
    let mut row_buf = vec![T::zero(); head.dim];
    for (n, row) in features.outer_iter().enumerate() {
        head.component_log_densities(as_slice(&row, &mut row_buf), k, &mut buf);
        for c in 0..comps {
            logliks[[n, c]] = buf[c];
        }
    }
    let plan = sinkhorn_assign(&logliks, T::lit(cfg.epsilon), cfg.sinkhorn_iters)?;
    head.em_update(k, features, &plan, T::lit(cfg.momentum))
}

fn mean_class_loglik<T: Real>(head: &GmmHead<T>, features_by_class: &[Array2<T>]) -> f64 {
    let mut row_buf = vec![T::zero(); head.dim];
    let per_class: Vec<f64> = features_by_class
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let total: f64 = x
                .outer_iter()
                .map(|row| head.class_log_density(as_slice(&row, &mut row_buf), k).to_f64_lossy())
                .sum();
            total / x.nrows() as f64
        })
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Initializes one class: means at distinct random samples, variances at the
/// class's per-dimension variance.
pub fn init_class<T: Real>(head: &mut GmmHead<T>, k: usize, x: &Array2<T>, seed: u64) -> Result<()> {
    let comps = head.components;
    if x.nrows() < comps {
        return Err(Error::InsufficientSamples {
            class: k,
            found: x.nrows(),
            needed: comps,
        });
    }
    let n = T::lit(x.nrows() as f64);
    let mean: Vec<T> = (0..head.dim)
        .map(|i| x.column(i).iter().copied().sum::<T>() / n)
        .collect();
    let var: Vec<T> = (0..head.dim)
        .map(|i| {
            x.column(i)
                .iter()
                .map(|&v| (v - mean[i]) * (v - mean[i]))
                .sum::<T>()
                / n
        })
        .collect();
    let mut rng = rng_for(seed, "gmm.init", k as u64);
    let picks = sample(&mut rng, x.nrows(), comps);
    for (c, idx) in picks.into_iter().enumerate() {
        let m: Vec<T> = x.row(idx).to_vec();
        head.set_component(k, c, &m, &var)?;
    }
    Ok(())
}

/// Fits one mixture per class with Sinkhorn EM.
///
/// Deterministic for a fixed `cfg.seed`.
pub fn fit_gmm<T: Real>(
    features_by_class: &[Array2<T>],
    cfg: &GmmConfig,
) -> Result<(GmmHead<T>, FitReport)> {
    cfg.validate()?;
    let classes = features_by_class.len();
    if classes == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = features_by_class[0].ncols();
    for (k, x) in features_by_class.iter().enumerate() {
        if x.ncols() != dim {
            return Err(Error::DimMismatch(format!(
                "class {k} features have {} dims, expected {dim}",
                x.ncols()
            )));
        }
        if x.nrows() < cfg.components {
            return Err(Error::InsufficientSamples {
                class: k,
                found: x.nrows(),
                needed: cfg.components,
            });
        }
    }
    let mut head = GmmHead::standard(classes, cfg.components, dim)?;
    for (k, x) in features_by_class.iter().enumerate() {
        init_class(&mut head, k, x, cfg.seed)?;
    }
    let mut report = FitReport::default();
    for _ in 0..cfg.em_rounds {
        report
            .mean_loglik
            .push(mean_class_loglik(&head, features_by_class));
        for (k, x) in features_by_class.iter().enumerate() {
            report.empty_component_updates += sinkhorn_em_round(&mut head, k, x, cfg)?;
        }
    }
    report
        .mean_loglik
        .push(mean_class_loglik(&head, features_by_class));
    if report.empty_component_updates > 0 {
        log::warn!(
            "gmm fit skipped {} empty component updates",
            report.empty_component_updates
        );
    }
    Ok((head, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn unit_gaussian_at_mean() {
        let v = gaussian_log_density(&[0.0_f64], &[0.0], &[1.0]).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-15);
    }

    #[test]
    fn two_dim_identity_at_mean() {
        let v = gaussian_log_density(&[3.5_f64, -2.0], &[3.5, -2.0], &[1.0, 1.0]).unwrap();
        assert!((v - (-1.837_877_066_409_345_5)).abs() < 1e-15);
    }

    #[test]
    fn random_d4_matches_formula_oracle() {
        let mut rng = rng_for(11, "test", 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..4.0)).collect();
            let got = gaussian_log_density(&x, &m, &v).unwrap();
            let want = oracle::gaussian_log_density_compensated(&x, &m, &v);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn variance_below_floor_rejected() {
        assert!(matches!(
            gaussian_log_density(&[0.0_f64, 0.0], &[0.0, 0.0], &[1.0, 1e-7]),
            Err(Error::DegenerateCovariance { index: 1, .. })
        ));
    }

    #[test]
    fn single_component_equals_gaussian() {
        let head = GmmHead::new(1, 1, 2, vec![0.5, -1.0], vec![2.0, 0.5], vec![1.0]).unwrap();
        let x = [0.1_f64, 0.2];
        assert_eq!(
            gmm_log_density(&x, &head, 0).unwrap(),
            gaussian_log_density(&x, &[0.5, -1.0], &[2.0, 0.5]).unwrap()
        );
    }

    #[test]
    fn duplicate_components_collapse() {
        let head = GmmHead::new(
            1,
            2,
            2,
            vec![0.5, -1.0, 0.5, -1.0],
            vec![2.0, 0.5, 2.0, 0.5],
            vec![0.5, 0.5],
        )
        .unwrap();
        let x = [0.1_f64, 0.2];
        let single = gaussian_log_density(&x, &[0.5, -1.0], &[2.0, 0.5]).unwrap();
        assert!((gmm_log_density(&x, &head, 0).unwrap() - single).abs() < 1e-14);
    }

    #[test]
    fn three_components_match_naive_sum() {
        let mut rng = rng_for(5, "test", 1);
        for _ in 0..200 {
            let head = oracle::random_head(&mut rng, 2, 3, 5);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            for k in 0..2 {
                let got = gmm_log_density(&x, &head, k).unwrap();
                let want = oracle::gmm_log_density_naive(&x, &head, k);
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn far_point_stays_finite() {
        let head = GmmHead::<f64>::standard(1, 2, 3).unwrap();
        let v = gmm_log_density(&[1e5, -1e5, 1e5], &head, 0).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn constant_logliks_give_uniform_plan() {
        let l = Array2::from_elem((6, 3), -4.2_f64);
        let p = sinkhorn_assign(&l, 0.1, 10).unwrap();
        for &v in p.plan.iter() {
            assert!((v - 1.0 / 18.0).abs() < 1e-15);
        }
    }

    #[test]
    fn small_epsilon_recovers_the_optimal_permutation() {
        let mut rng = rng_for(3, "test", 2);
        for _ in 0..20 {
            let mut l = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..0.0_f64));
            let shift = rng.random_range(0..4usize);
            for i in 0..4 {
                l[[i, (i + shift) % 4]] += 3.0;
            }
            let perm = oracle::best_assignment(&l);
            assert!(perm.iter().enumerate().all(|(i, &j)| j == (i + shift) % 4));
            let p = sinkhorn_assign(&l, 0.01, 500).unwrap();
            for (i, &j) in perm.iter().enumerate() {
                assert!((p.plan[[i, j]] - 0.25).abs() < 1e-3, "{:?}", p.plan);
            }
        }
    }

    #[test]
    fn zero_iterations_report_residual() {
        let l = array![[0.0_f64, -1.0], [0.0, -1.0], [-3.0, 0.0]];
        let p = sinkhorn_assign(&l, 1.0, 0).unwrap();
        assert_eq!(p.iterations, 0);
        assert!((p.plan.sum() - 1.0).abs() < 1e-12);
        assert!(p.residual() > 0.0);
    }

    #[test]
    fn non_finite_cost_rejected() {
        let l = array![[0.0_f64, f64::NEG_INFINITY], [0.0, 0.0]];
        assert!(matches!(
            sinkhorn_assign(&l, 0.1, 3),
            Err(Error::InvalidCost { row: 0, col: 1 })
        ));
    }

    fn plan_from(weights: Array2<f64>) -> SinkhornPlan<f64> {
        SinkhornPlan {
            plan: weights,
            iterations: 0,
            epsilon: 1.0,
            row_residual: 0.0,
            col_residual: 0.0,
        }
    }

    #[test]
    fn full_momentum_leaves_head_unchanged() {
        let mut head = GmmHead::new(1, 2, 1, vec![0.0, 1.0], vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let before = head.clone();
        let x = array![[5.0_f64], [6.0], [7.0]];
        let plan = plan_from(Array2::from_elem((3, 2), 1.0 / 6.0));
        head.em_update(0, &x, &plan, 1.0).unwrap();
        assert_eq!(head, before);
    }

    #[test]
    fn zero_momentum_single_component_is_weighted_moments() {
        let mut head = GmmHead::<f64>::standard(1, 1, 2).unwrap();
        let x = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.0], [2.0, 4.0]];
        let w = array![[0.1], [0.4], [0.2], [0.3]];
        head.em_update(0, &x, &plan_from(w.clone()), 0.0).unwrap();
        let (mean, var) = oracle::weighted_moments(&x, w.column(0).as_slice().unwrap());
        for i in 0..2 {
            assert!((head.mean(0, 0)[i] - mean[i]).abs() < 1e-10);
            assert!((head.var(0, 0)[i] - var[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_features_hit_the_floor() {
        let mut head = GmmHead::<f64>::standard(1, 1, 3).unwrap();
        let x = Array2::from_elem((5, 3), 0.7);
        head.em_update(0, &x, &plan_from(Array2::from_elem((5, 1), 0.2)), 0.0)
            .unwrap();
        assert!(head.var(0, 0).iter().all(|&v| v == VAR_FLOOR));
    }

    #[test]
    fn empty_component_is_skipped_and_counted() {
        let mut head = GmmHead::new(1, 2, 1, vec![0.0, 1.0], vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let x = array![[5.0_f64], [6.0]];
        let plan = plan_from(array![[0.5, 0.0], [0.5, 0.0]]);
        assert_eq!(head.em_update(0, &x, &plan, 0.0).unwrap(), 1);
        assert_eq!(head.mean(0, 1), &[1.0]);
        assert!((head.mean(0, 0)[0] - 5.5).abs() < 1e-12);
    }

    fn two_cluster_data(seed: u64, centres: &[[f64; 2]; 2], n: usize) -> Array2<f64> {
        let mut rng = rng_for(seed, "test.clusters", 0);
        let noise = Normal::new(0.0, 0.3).unwrap();
        Array2::from_shape_fn((n, 2), |(i, j)| centres[i % 2][j] + noise.sample(&mut rng))
    }

    #[test]
    fn recovers_separated_clusters() {
        let a = [[-3.0, 0.0], [3.0, 1.0]];
        let b = [[0.0, 5.0], [0.0, -5.0]];
        let data = vec![two_cluster_data(1, &a, 500), two_cluster_data(2, &b, 500)];
        let cfg = GmmConfig {
            components: 2,
            momentum: 0.0,
            ..GmmConfig::default()
        };
        let (head, report) = fit_gmm(&data, &cfg).unwrap();
        for (k, centres) in [a, b].iter().enumerate() {
            for centre in centres {
                let close = (0..2).any(|c| {
                    let m = head.mean(k, c);
                    ((m[0] - centre[0]).powi(2) + (m[1] - centre[1]).powi(2)).sqrt() < 0.1
                });
                assert!(close, "class {k} centre {centre:?} not recovered: {head:?}");
            }
        }
        assert_eq!(report.mean_loglik.len(), cfg.em_rounds + 1);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = vec![two_cluster_data(9, &[[0.0, 0.0], [2.0, 2.0]], 60)];
        let cfg = GmmConfig {
            components: 3,
            ..GmmConfig::default()
        };
        assert_eq!(fit_gmm(&data, &cfg).unwrap(), fit_gmm(&data, &cfg).unwrap());
    }

    #[test]
    fn single_component_fit_equals_class_moments() {
        let data = vec![
            two_cluster_data(4, &[[0.0, 1.0], [2.0, -2.0]], 101),
            two_cluster_data(5, &[[4.0, 1.0], [2.0, 3.0]], 40),
        ];
        let cfg = GmmConfig {
            components: 1,
            momentum: 0.0,
            em_rounds: 3,
            ..GmmConfig::default()
        };
        let (head, _) = fit_gmm(&data, &cfg).unwrap();
        for (k, x) in data.iter().enumerate() {
            let w = vec![1.0 / x.nrows() as f64; x.nrows()];
            let (mean, var) = oracle::weighted_moments(x, &w);
            for i in 0..2 {
                assert!((head.mean(k, 0)[i] - mean[i]).abs() < 1e-10);
                assert!((head.var(k, 0)[i] - var[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let data = vec![Array2::<f64>::zeros((10, 2)), Array2::zeros((2, 2))];
        let cfg = GmmConfig::default();
        assert!(matches!(
            fit_gmm(&data, &cfg),
            Err(Error::InsufficientSamples { class: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn sinkhorn_residual_is_non_increasing(seed in 0u64..500, n in 5usize..20, c in 1usize..5) {
            let mut rng = rng_for(seed, "prop.sinkhorn", 0);
            let l = Array2::from_shape_fn((n, c), |_| rng.random_range(-3.0..3.0_f64));
            let mut prev = f64::INFINITY;
            for iters in 1..15 {
                let r = sinkhorn_assign(&l, 0.5, iters).unwrap().residual();
                prop_assert!(r <= prev + 1e-12, "iters {iters}: {r} > {prev}");
                prev = r;
            }
        }

        #[test]
        fn plan_is_a_probability_table(seed in 0u64..500) {
            let mut rng = rng_for(seed, "prop.sinkhorn", 1);
            let l = Array2::from_shape_fn((12, 4), |_| rng.random_range(-10.0..0.0_f64));
            let p = sinkhorn_assign(&l, 0.1, 30).unwrap();
            prop_assert!(p.plan.iter().all(|&v| v >= 0.0));
            prop_assert!((p.plan.sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn hard_plan_reduces_to_component_moments(seed in 0u64..200) {
            let mut rng = rng_for(seed, "prop.em", 0);
            let x = Array2::from_shape_fn((9, 2), |_| rng.random_range(-2.0..2.0_f64));
            let mut w = Array2::zeros((9, 3));
            for i in 0..9 { w[[i, i % 3]] = 1.0 / 9.0; }
            let mut head = GmmHead::<f64>::standard(1, 3, 2).unwrap();
            head.em_update(0, &x, &plan_from(w), 0.0).unwrap();
            for c in 0..3 {
                let rows: Vec<usize> = (0..9).filter(|i| i % 3 == c).collect();
                for d in 0..2 {
                    let m = rows.iter().map(|&i| x[[i, d]]).sum::<f64>() / 3.0;
                    let v = rows.iter().map(|&i| (x[[i, d]] - m).powi(2)).sum::<f64>() / 3.0;
                    prop_assert!((head.mean(0, c)[d] - m).abs() < 1e-12);
                    prop_assert!((head.var(0, c)[d] - v.max(VAR_FLOOR)).abs() < 1e-12);
                }
            }
        }
    }
}
