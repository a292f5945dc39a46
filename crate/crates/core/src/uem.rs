//! Unknown estimation module: a projection MLP with a two-class head whose
//! outputs are the inlier and outlier log-scores, the likelihood-ratio
//! outlier score, its training loss, and the frozen stage-2 training loop.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    BinaryOutlierMap, BundleStage, FeatureMap, HeadKind, ModelBundle, ScoreMap, IGNORE, INLIER,
    OUTLIER,
};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, sinkhorn_assign, sinkhorn_em_round, GmmConfig, GmmHead};
use crate::inlier::{tiles, InlierModel};
use crate::neural::{
    sigmoid_bce_with_logits, softmax_cross_entropy, Activation, DenseLayer, LayerGrads, Mlp,
    MlpGrads, Optimizer, OptimizerKind, ParamUpdate,
};
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for};
use crate::tensors::{insert_gmm, insert_layer, insert_mlp, read_gmm, read_layer, read_mlp};

/// Layers in the projection MLP.
pub const PROJECTION_LAYERS: usize = 3;
/// Head output index of the inlier score.
pub const UEM_INLIER: usize = 0;
/// Head output index of the outlier score.
pub const UEM_OUTLIER: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum UemHead<T> {
    Generative(GmmHead<T>),
    Discriminative(DenseLayer<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UemModel<T> {
    projection: Mlp<T>,
    head: UemHead<T>,
}

impl<T: Real> UemModel<T> {
    pub fn new(projection: Mlp<T>, head: UemHead<T>) -> Result<Self> {
        if projection.layers().len() != PROJECTION_LAYERS {
            return Err(Error::InvalidConfig(format!(
                "projection has {} layers, expected {PROJECTION_LAYERS}",
                projection.layers().len()
            )));
        }
        let p = projection.out_dim();
        match &head {
            UemHead::Generative(g) if g.classes() != 2 || g.dim() != p => {
                return Err(Error::DimMismatch(format!(
                    "{}-class gmm head of dim {} on projection output {p}",
                    g.classes(),
                    g.dim()
                )))
            }
            UemHead::Discriminative(l) if l.out_dim() != 2 || l.in_dim() != p => {
                return Err(Error::DimMismatch(format!(
                    "{}->{} head on projection output {p}",
                    l.in_dim(),
                    l.out_dim()
                )))
            }
            _ => {}
        }
        Ok(Self { projection, head })
    }

    /// Seeded initialization; a generative head starts at standard normals.
    pub fn init(
        kind: HeadKind,
        feature_dim: usize,
        projection_dim: usize,
        components: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "uem.init", 0);
        let p = projection_dim;
        let projection = Mlp::new(&[feature_dim, p, p, p], activation, Activation::Identity, &mut rng)?;
        let head = match kind {
            HeadKind::Generative => UemHead::Generative(GmmHead::standard(2, components, p)?),
            HeadKind::Discriminative => {
                UemHead::Discriminative(DenseLayer::xavier(p, 2, Activation::Identity, &mut rng))
            }
        };
        Self::new(projection, head)
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            UemHead::Generative(_) => HeadKind::Generative,
            UemHead::Discriminative(_) => HeadKind::Discriminative,
        }
    }

    pub fn projection(&self) -> &Mlp<T> {
        &self.projection
    }

    pub fn head(&self) -> &UemHead<T> {
        &self.head
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.in_dim()
    }

    pub fn projection_dim(&self) -> usize {
        self.projection.out_dim()
    }

    pub fn components(&self) -> usize {
        match &self.head {
            UemHead::Generative(g) => g.components(),
            UemHead::Discriminative(_) => 0,
        }
    }

    /// Stored scalars, fixed mixture weights included.
    pub fn parameter_count(&self) -> usize {
        self.projection.parameter_count()
            + match &self.head {
                UemHead::Generative(g) => g.parameter_count(),
                UemHead::Discriminative(l) => l.parameter_count(),
            }
    }

    /// Length of [`UemModel::flatten_params`]; mixture weights are fixed.
    pub fn trainable_count(&self) -> usize {
        self.projection.parameter_count()
            + match &self.head {
                UemHead::Generative(g) => g.means().len() + g.vars().len(),
                UemHead::Discriminative(l) => l.parameter_count(),
            }
    }

    /// Trainable tensors in a fixed order, with their bundle names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let names = self.projection.param_names("uem.proj");
        let mut out: Vec<(String, &mut [T])> =
            names.into_iter().zip(self.projection.params_mut()).collect();
        match &mut self.head {
            UemHead::Generative(g) => {
                let (m, v) = g.moments_mut();
                out.push(("uem.head.gmm.means".into(), m));
                out.push(("uem.head.gmm.vars".into(), v));
            }
            UemHead::Discriminative(l) => {
                out.push(("uem.head.weight".into(), l.weights.as_slice_mut().expect("standard layout")));
                out.push(("uem.head.bias".into(), l.bias.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }

    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = self.projection.flatten_params();
        match &self.head {
            UemHead::Generative(g) => {
                out.extend_from_slice(g.means());
                out.extend_from_slice(g.vars());
            }
            UemHead::Discriminative(l) => {
                out.extend(l.weights.iter().copied());
                out.extend(l.bias.iter().copied());
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::DimMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.trainable_count()
            )));
        }
        let mut off = 0;
        for (_, p) in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    /// Head scores `N x 2` for pixel-major features, column 0 inlier.
    pub fn pixel_scores(&self, pixels: &Array2<T>) -> Result<Array2<T>> {
        let z = self.projection.infer(pixels)?;
        match &self.head {
            UemHead::Generative(g) => g.log_densities(&z),
            UemHead::Discriminative(l) => l.forward(&z),
        }
    }

    pub(crate) fn write_tensors(&self, bundle: &mut ModelBundle) -> Result<()> {
        insert_mlp(bundle, "uem.proj", &self.projection)?;
        match &self.head {
            UemHead::Generative(g) => insert_gmm(bundle, "uem.head.gmm", g),
            UemHead::Discriminative(l) => insert_layer(bundle, "uem.head", l),
        }
    }

    /// Rebuilds the module held in a stage-2 bundle.
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let m = &bundle.manifest;
        if m.stage != BundleStage::Uem {
            return Err(Error::InvalidBundle("not a stage-2 bundle".into()));
        }
        let kind = m
            .uem_head
            .ok_or_else(|| Error::InvalidBundle("stage-2 manifest without uem_head".into()))?;
        let p = m
            .projection_dim
            .ok_or_else(|| Error::InvalidBundle("stage-2 manifest without projection_dim".into()))?;
        let act = m
            .config
            .get("uem")
            .and_then(|v| serde_json::from_value::<LlrConfig>(v.clone()).ok())
            .map(|c| c.activation)
            .unwrap_or(LlrConfig::default().activation);
        let projection = read_mlp(bundle, "uem.proj", act, Activation::Identity)?;
        if projection.out_dim() != p || projection.in_dim() != m.feature_dim {
            return Err(Error::InvalidBundle(format!(
                "projection is {}->{}, manifest says {}->{p}",
                projection.in_dim(),
                projection.out_dim(),
                m.feature_dim
            )));
        }
        let head = match kind {
            HeadKind::Generative => {
                let comps = m
                    .config
                    .get("uem")
                    .and_then(|v| serde_json::from_value::<LlrConfig>(v.clone()).ok())
                    .map(|c| c.gmm.components)
                    .unwrap_or(m.gmm_components);
                UemHead::Generative(read_gmm(bundle, "uem.head.gmm", 2, comps, p)?)
            }
            HeadKind::Discriminative => UemHead::Discriminative(read_layer(bundle, "uem.head", Activation::Identity)?),
        };
        Self::new(projection, head)
    }
}

fn check_channels<T: Real>(expected: usize, f: &FeatureMap<T>) -> Result<()> {
    if f.channels() != expected {
        return Err(Error::DimMismatch(format!(
            "module expects {expected} channels, got {}",
            f.channels()
        )));
    }
    Ok(())
}

/// `(log p_in, log p_out)` maps: GMM log-densities for a generative head,
/// raw logits for a discriminative one.
pub fn uem_forward<T: Real>(u: &UemModel<T>, f: &FeatureMap<T>) -> Result<(ScoreMap<T>, ScoreMap<T>)> {
    check_channels(u.feature_dim(), f)?;
    let s = u.pixel_scores(&f.to_pixels())?;
    let (h, w) = (f.height(), f.width());
    Ok((
        ScoreMap::new(h, w, s.column(UEM_INLIER).to_vec())?,
        ScoreMap::new(h, w, s.column(UEM_OUTLIER).to_vec())?,
    ))
}

#[inline]
fn ratio<T: Real>(log_out: T, log_in: T, max_logit: T) -> T {
    log_out - log_in - max_logit
}

/// Pixel score with a generative inlier model, whose class logits are class
/// log-probabilities: `log p_out - (log p_in + max_k log p(k|x))`.
pub fn llr_generative<T: Real>(log_out: T, log_in: T, class_log_probs: &[T]) -> T {
    let best = class_log_probs.iter().copied().fold(T::neg_infinity(), T::max);
    ratio(log_out, log_in, best)
}

/// Pixel score with a discriminative inlier model. The softmax normalizer
/// is shared by every class, so it leaves the arg-max and drops out.
pub fn llr_discriminative<T: Real>(log_out: T, log_in: T, class_logits: &[T]) -> T {
    let mut best = T::neg_infinity();
    for &f in class_logits {
        best = best.max(f);
    }
    ratio(log_out, log_in, best)
}

/// `log p_out - log p_in - max_k F_k` per pixel.
pub fn llr_score<T: Real>(
    log_out: &ScoreMap<T>,
    log_in: &ScoreMap<T>,
    max_logit: &ScoreMap<T>,
) -> Result<ScoreMap<T>> {
    if !log_out.same_shape(log_in) || !log_out.same_shape(max_logit) {
        return Err(Error::DimMismatch("score maps differ in shape".into()));
    }
    let s = log_out
        .scores()
        .iter()
        .zip(log_in.scores())
        .zip(max_logit.scores())
        .map(|((&o, &i), &m)| ratio(o, i, m))
        .collect();
    ScoreMap::new(log_out.height(), log_out.width(), s)
}

/// Outlier-density baseline: the outlier map itself.
pub fn ood_score<T: Real>(log_out: &ScoreMap<T>) -> ScoreMap<T> {
    log_out.clone()
}

/// Stage-2 configuration (loss weights, optimizer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlrConfig {
    pub head: HeadKind,
    pub projection_dim: usize,
    pub activation: Activation,
    /// Weight of the head's own classification loss.
    pub alpha: f64,
    /// Weight of the component contrast term inside it.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub patch: usize,
    pub em_samples: usize,
    pub gmm: GmmConfig,
    pub seed: u64,
}

impl Default for LlrConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Discriminative,
            projection_dim: 16,
            activation: Activation::Gelu,
            alpha: 1.0,
            beta: 0.01,
            lr: 3e-3,
            epochs: 20,
            patch: 16,
            em_samples: 2000,
            gmm: GmmConfig::default(),
            seed: 0,
        }
    }
}

impl LlrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} and beta {} must be finite and non-negative",
                self.alpha, self.beta
            )));
        }
        if self.projection_dim == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("projection_dim and lr must be positive".into()));
        }
        self.gmm.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrads<T> {
    Gmm { d_means: Vec<T>, d_vars: Vec<T> },
    Layer(LayerGrads<T>),
}

/// Gradients over the module's parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct UemGrads<T> {
    pub projection: MlpGrads<T>,
    pub head: HeadGrads<T>,
}

impl<T: Real> UemGrads<T> {
    /// Flattened in [`UemModel::flatten_params`] order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = self.projection.flatten();
        match &self.head {
            HeadGrads::Gmm { d_means, d_vars } => {
                out.extend_from_slice(d_means);
                out.extend_from_slice(d_vars);
            }
            HeadGrads::Layer(l) => {
                out.extend(l.weights.iter().copied());
                out.extend(l.bias.iter().copied());
            }
        }
        out
    }

    fn tensors(&self) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = self
            .projection
            .layers
            .iter()
            .flat_map(|l| [l.weights.iter().copied().collect(), l.bias.to_vec()])
            .collect();
        match &self.head {
            HeadGrads::Gmm { d_means, d_vars } => {
                out.push(d_means.clone());
                out.push(d_vars.clone());
            }
            HeadGrads::Layer(l) => {
                out.push(l.weights.iter().copied().collect());
                out.push(l.bias.to_vec());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlrLoss<T> {
    pub loss: T,
    pub bce: T,
    pub ce: T,
    pub contrast: T,
    pub valid: usize,
    pub grads: UemGrads<T>,
}

/// Sinkhorn assignment of each labelled pixel to a component of its own
/// class, as a global component index `k * C + c`; `IGNORE` elsewhere.
pub fn contrast_assignment<T: Real>(
    head: &GmmHead<T>,
    components: &Array2<T>,
    targets: &[u8],
    epsilon: f64,
    iters: usize,
) -> Result<Vec<u8>> {
    let c = head.components();
    let mut out = vec![IGNORE; targets.len()];
    for k in 0..head.classes() {
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] as usize == k).collect();
        if rows.is_empty() {
            continue;
        }
        let logliks = Array2::from_shape_fn((rows.len(), c), |(r, j)| components[[rows[r], k * c + j]]);
        // A balanced plan needs at least one pixel per component; smaller
        // groups take each pixel's most likely component.
        let picks = if rows.len() < c {
            logliks
                .outer_iter()
                .map(|row| {
                    (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect()
        } else {
            sinkhorn_assign(&logliks, T::lit(epsilon), iters)?.hard_assignment()
        };
        for (r, j) in picks.into_iter().enumerate() {
            out[rows[r]] = (k * c + j) as u8;
        }
    }
    Ok(out)
}

/// Loss and gradients for one batch of pixels whose frozen inlier
/// `max_k F_k` is already known. `assignment` overrides the Sinkhorn
/// component assignment of the contrast term.
pub fn llr_loss_pixels<T: Real>(
    u: &UemModel<T>,
    pixels: &Array2<T>,
    max_logit: &[T],
    targets: &[u8],
    cfg: &LlrConfig,
    assignment: Option<&[u8]>,
) -> Result<LlrLoss<T>> {
    let n = pixels.nrows();
    if max_logit.len() != n || targets.len() != n {
        return Err(Error::DimMismatch(format!(
            "{n} pixels, {} max logits, {} targets",
            max_logit.len(),
            targets.len()
        )));
    }
    let alpha = T::lit(cfg.alpha);
    let beta = T::lit(cfg.beta);
    let (z, tape) = u.projection.forward(pixels)?;
    let mut d_scores = Array2::zeros((n, 2));
    let (scores, comps) = match &u.head {
        UemHead::Generative(g) => {
            let comps = g.component_scores(&z)?;
            (g.class_scores(&comps), Some(comps))
        }
        UemHead::Discriminative(l) => (l.forward(&z)?, None),
    };
    let llr: Vec<T> = (0..n)
        .map(|i| ratio(scores[[i, UEM_OUTLIER]], scores[[i, UEM_INLIER]], max_logit[i]))
        .collect();
    let bce = sigmoid_bce_with_logits(&llr, targets)?;
    for i in 0..n {
        d_scores[[i, UEM_OUTLIER]] += bce.grad[i];
        d_scores[[i, UEM_INLIER]] -= bce.grad[i];
    }
    let ce = softmax_cross_entropy(&scores, targets)?;
    d_scores.scaled_add(alpha, &ce.grad);

    let mut contrast = T::zero();
    let (dz, head) = match &u.head {
        UemHead::Generative(g) => {
            let comps = comps.expect("generative head has component scores");
            let mut d_comp = Array2::zeros(comps.dim());
            g.class_to_component_grad(&comps, &scores, &d_scores, &mut d_comp);
            if cfg.beta != 0.0 && cfg.alpha != 0.0 {
                let owned;
                let assigned = match assignment {
                    Some(a) => a,
                    None => {
                        owned = contrast_assignment(g, &comps, targets, cfg.gmm.epsilon, cfg.gmm.sinkhorn_iters)?;
                        &owned
                    }
                };
                let ct = softmax_cross_entropy(&comps, assigned)?;
                contrast = ct.loss;
                d_comp.scaled_add(alpha * beta, &ct.grad);
            }
            let gg = g.backward_components(&z, &d_comp)?;
            (
                gg.dx,
                HeadGrads::Gmm {
                    d_means: gg.d_means,
                    d_vars: gg.d_vars,
                },
            )
        }
        UemHead::Discriminative(l) => {
            let pre = l.pre_activation(&z)?;
            let (lg, dz) = l.backward(&z, &pre, &d_scores);
            (dz, HeadGrads::Layer(lg))
        }
    };
    let (projection, _) = u.projection.backward(&tape, &dz)?;
    Ok(LlrLoss {
        loss: bce.loss + alpha * (ce.loss + beta * contrast),
        bce: bce.loss,
        ce: ce.loss,
        contrast,
        valid: bce.valid,
        grads: UemGrads { projection, head },
    })
}

/// Loss of the module on one scene against a frozen inlier model.
pub fn llr_loss<T: Real>(
    u: &UemModel<T>,
    inlier: &InlierModel<T>,
    f: &FeatureMap<T>,
    y: &BinaryOutlierMap,
    cfg: &LlrConfig,
) -> Result<LlrLoss<T>> {
    if !inlier.is_frozen() {
        return Err(Error::FreezeViolation("inlier model is not frozen".into()));
    }
    check_channels(u.feature_dim(), f)?;
    if f.height() != y.height() || f.width() != y.width() {
        return Err(Error::DimMismatch("features and outlier map differ in size".into()));
    }
    let pixels = f.to_pixels();
    let max_logit = inlier.pixel_max_logit(&pixels)?;
    llr_loss_pixels(u, &pixels, &max_logit, y.labels(), cfg, None)
}

/// `count(phi) / count(theta)` for a stage-2 bundle, counting every stored
/// scalar.
pub fn parameter_ratio(bundle: &ModelBundle) -> f64 {
    let phi = bundle.parameter_count(|n| n.starts_with("uem."));
    let theta = bundle.parameter_count(|n| !n.starts_with("uem."));
    phi as f64 / theta as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UemReport {
    pub epoch_loss: Vec<f64>,
    pub parameter_count: usize,
    pub inlier_parameter_count: usize,
    /// Every stage-1 tensor digest matched after training.
    pub freeze_verified: bool,
}

pub struct TrainedUem<T> {
    pub bundle: ModelBundle,
    /// The module exactly as stored in `bundle`.
    pub model: UemModel<T>,
    pub report: UemReport,
}

struct Prepared<T> {
    pixels: Array2<T>,
    max_logit: Vec<T>,
    targets: Vec<u8>,
    height: usize,
    width: usize,
}

fn gather<T: Real>(p: &Prepared<T>, tile: (usize, usize, usize, usize)) -> (Array2<T>, Vec<T>, Vec<u8>) {
    let (y0, x0, h, w) = tile;
    let rows: Vec<usize> = (y0..y0 + h)
        .flat_map(|y| (x0..x0 + w).map(move |x| y * p.width + x))
        .collect();
    let c = p.pixels.ncols();
    let px = Array2::from_shape_fn((rows.len(), c), |(r, ch)| p.pixels[[rows[r], ch]]);
    let ml = rows.iter().map(|&r| p.max_logit[r]).collect();
    let t = rows.iter().map(|&r| p.targets[r]).collect();
    (px, ml, t)
}

/// Projected features of up to `cap` pixels per outlier-map class.
fn projected_by_class<T: Real>(
    projection: &Mlp<T>,
    data: &[Prepared<T>],
    cap: usize,
    seed: u64,
) -> Result<[Option<Array2<T>>; 2]> {
    let mut out = [None, None];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut idx: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(s, p)| {
                p.targets
                    .iter()
                    .enumerate()
                    .filter(move |(_, &t)| t as usize == k)
                    .map(move |(i, _)| (s, i))
            })
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() > cap {
            idx.shuffle(&mut rng_for(seed, "uem.em_sample", k as u64));
            idx.truncate(cap);
            idx.sort_unstable();
        }
        let c = data[0].pixels.ncols();
        let px = Array2::from_shape_fn((idx.len(), c), |(r, ch)| {
            let (s, i) = idx[r];
            data[s].pixels[[i, ch]]
        });
        *slot = Some(projection.infer(&px)?);
    }
    Ok(out)
}

/// Trains the module on `(features, outlier map)` pairs with every stage-1
/// tensor frozen, and returns the stage-2 bundle.
pub fn train_uem<T: Real>(
    stage1: &ModelBundle,
    dataset: &[(FeatureMap<T>, BinaryOutlierMap)],
    cfg: &LlrConfig,
) -> Result<TrainedUem<T>> {
    cfg.validate()?;
    if stage1.manifest.stage != BundleStage::Inlier {
        return Err(Error::InvalidBundle("stage-2 training needs a stage-1 bundle".into()));
    }
    stage1.verify().map_err(|e| match e {
        Error::DigestMismatch { name, .. } => {
            Error::FreezeViolation(format!("stage-1 tensor {name} does not match its digest"))
        }
        other => other,
    })?;
    if cfg.head == HeadKind::Generative && stage1.manifest.inlier_head == HeadKind::Discriminative {
        return Err(Error::InvalidConfig(
            "a generative module on a discriminative inlier model is not supported".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let frozen: BTreeMap<String, String> = stage1
        .manifest
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), v.sha256.clone()))
        .collect();
    let mut inlier = InlierModel::<T>::from_bundle(stage1)?;
    inlier.freeze();
    let inlier = inlier;

    let mut prepared = Vec::with_capacity(dataset.len());
    for (f, y) in dataset {
        check_channels(inlier.feature_dim(), f)?;
        if f.height() != y.height() || f.width() != y.width() {
            return Err(Error::DimMismatch("features and outlier map differ in size".into()));
        }
        let pixels = f.to_pixels();
        let max_logit = inlier.pixel_max_logit(&pixels)?;
        prepared.push(Prepared {
            pixels,
            max_logit,
            targets: y.labels().to_vec(),
            height: f.height(),
            width: f.width(),
        });
    }

    let mut u = UemModel::init(
        cfg.head,
        inlier.feature_dim(),
        cfg.projection_dim,
        cfg.gmm.components,
        cfg.activation,
        cfg.seed,
    )?;
    if let UemHead::Generative(_) = u.head {
        let samples = projected_by_class(&u.projection, &prepared, cfg.em_samples, derive_seed(cfg.seed, "uem.em", 0))?;
        let (Some(inl), Some(out)) = (&samples[INLIER as usize], &samples[OUTLIER as usize]) else {
            return Err(Error::InsufficientSamples {
                class: if samples[0].is_none() { 0 } else { 1 },
                found: 0,
                needed: cfg.gmm.components,
            });
        };
        let mut init_cfg = cfg.gmm.clone();
        init_cfg.momentum = 0.0;
        init_cfg.seed = derive_seed(cfg.seed, "uem.gmm", 0);
        let (head, _) = fit_gmm(&[inl.clone(), out.clone()], &init_cfg)?;
        u.head = UemHead::Generative(head);
    }

    let mut jobs: Vec<(usize, (usize, usize, usize, usize))> = prepared
        .iter()
        .enumerate()
        .flat_map(|(s, p)| tiles(p.height, p.width, cfg.patch).into_iter().map(move |t| (s, t)))
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        jobs.shuffle(&mut rng_for(cfg.seed, "uem.shuffle", epoch as u64));
        let (mut total, mut steps) = (0.0, 0usize);
        for &(s, tile) in &jobs {
            let (px, ml, t) = gather(&prepared[s], tile);
            if t.iter().all(|&v| v == IGNORE) {
                continue;
            }
            let out = llr_loss_pixels(&u, &px, &ml, &t, cfg, None)?;
            total += out.loss.to_f64_lossy();
            steps += 1;
            let grads = out.grads.tensors();
            let updates = u
                .params_mut()
                .into_iter()
                .zip(&grads)
                .map(|((name, values), grad)| ParamUpdate { name, values, grad })
                .collect();
            opt.step(updates)?;
            if let UemHead::Generative(g) = &mut u.head {
                g.clamp_variances();
            }
        }
        if let UemHead::Generative(_) = u.head {
            let samples = projected_by_class(&u.projection, &prepared, cfg.em_samples, derive_seed(cfg.seed, "uem.em", epoch as u64 + 1))?;
            if let UemHead::Generative(g) = &mut u.head {
                for (k, s) in samples.iter().enumerate() {
                    if let Some(x) = s {
                        if x.nrows() >= cfg.gmm.components {
                            sinkhorn_em_round(g, k, x, &cfg.gmm)?;
                        }
                    }
                }
            }
        }
        epoch_loss.push(if steps > 0 { total / steps as f64 } else { 0.0 });
        log::debug!("uem epoch {epoch}: loss {:.6}", epoch_loss[epoch]);
    }

    let mut manifest = stage1.manifest.clone();
    manifest.stage = BundleStage::Uem;
    manifest.uem_head = Some(cfg.head);
    manifest.projection_dim = Some(cfg.projection_dim);
    manifest.frozen_digests = frozen.clone();
    let inlier_cfg = stage1.manifest.config.get("inlier").cloned().unwrap_or(serde_json::Value::Null);
    manifest.config = serde_json::json!({ "inlier": inlier_cfg, "uem": cfg });
    manifest.tensors = BTreeMap::new();
    let mut bundle = ModelBundle::new(manifest);
    for (name, t) in stage1.tensors() {
        bundle.insert(name, t.clone())?;
    }
    u.write_tensors(&mut bundle)?;
    verify_freeze(&bundle)?;
    let stored = UemModel::from_bundle(&bundle)?;
    let report = UemReport {
        epoch_loss,
        parameter_count: stored.parameter_count(),
        inlier_parameter_count: inlier.parameter_count(),
        freeze_verified: true,
    };
    Ok(TrainedUem {
        bundle,
        model: stored,
        report,
    })
}

/// Loads a stage-1 bundle for stage-2 training. A tensor that no longer
/// matches its recorded digest is reported as a freeze violation.
pub fn load_stage1(dir: impl AsRef<std::path::Path>) -> Result<ModelBundle> {
    let b = ModelBundle::load(dir).map_err(|e| match e {
        Error::DigestMismatch { name, .. } => {
            Error::FreezeViolation(format!("stage-1 tensor {name} does not match its digest"))
        }
        other => other,
    })?;
    if b.manifest.stage != BundleStage::Inlier {
        return Err(Error::InvalidBundle("expected a stage-1 bundle".into()));
    }
    Ok(b)
}

/// Checks that every digest recorded in `frozen_digests` matches the tensor
/// now held under that name.
pub fn verify_freeze(bundle: &ModelBundle) -> Result<()> {
    if bundle.manifest.frozen_digests.is_empty() {
        return Err(Error::FreezeViolation("bundle records no frozen digests".into()));
    }
    for (name, want) in &bundle.manifest.frozen_digests {
        match bundle.digest(name) {
            Some(got) if got == want => {}
            Some(got) => {
                return Err(Error::FreezeViolation(format!(
                    "{name}: digest {got} differs from frozen {want}"
                )))
            }
            None => return Err(Error::FreezeViolation(format!("{name} is missing"))),
        }
    }
    Ok(())
}
