//! Stage-1 inlier segmentor: pixel-wise decoder plus a generative (GMM) or
//! discriminative (linear) classification head.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    validate_pair, BundleStage, FeatureMap, HeadKind, LabelMap, Manifest, ModelBundle, ScoreMap,
    BUNDLE_FORMAT_VERSION, IGNORE,
};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, sinkhorn_em_round, GmmConfig, GmmHead};
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::neural::{
    softmax_cross_entropy, Activation, DenseLayer, Mlp, Optimizer, OptimizerKind, ParamUpdate,
};
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for};
use crate::tensors::{insert_gmm, insert_layer, insert_mlp, read_gmm, read_layer, read_mlp};

#[derive(Debug, Clone, PartialEq)]
pub enum InlierHead<T> {
    Generative(GmmHead<T>),
    Discriminative(DenseLayer<T>),
}

/// Decoder followed by a `K`-class head; logits are `F_k(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierModel<T> {
    decoder: Mlp<T>,
    head: InlierHead<T>,
    frozen: bool,
}

impl<T: Real> InlierModel<T> {
    pub fn new(decoder: Mlp<T>, head: InlierHead<T>) -> Result<Self> {
        let d = decoder.out_dim();
        match &head {
            InlierHead::Generative(g) if g.dim() != d => {
                return Err(Error::DimMismatch(format!(
                    "gmm head of dim {} on decoder output {d}",
                    g.dim()
                )))
            }
            InlierHead::Discriminative(l) if l.in_dim() != d => {
                return Err(Error::DimMismatch(format!(
                    "linear head of input {} on decoder output {d}",
                    l.in_dim()
                )))
            }
            _ => {}
        }
        Ok(Self {
            decoder,
            head,
            frozen: false,
        })
    }

    /// Seeded initialization: Xavier decoder, and either a Xavier linear
    /// head or a standard-normal GMM head.
    pub fn init(
        kind: HeadKind,
        feature_dim: usize,
        decoder_dim: usize,
        num_classes: usize,
        components: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "inlier.init", 0);
        let decoder = Mlp::new(
            &[feature_dim, decoder_dim, decoder_dim],
            activation,
            Activation::Identity,
            &mut rng,
        )?;
        let head = match kind {
            HeadKind::Generative => {
                InlierHead::Generative(GmmHead::standard(num_classes, components, decoder_dim)?)
            }
            HeadKind::Discriminative => InlierHead::Discriminative(DenseLayer::xavier(
                decoder_dim,
                num_classes,
                Activation::Identity,
                &mut rng,
            )),
        };
        Self::new(decoder, head)
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            InlierHead::Generative(_) => HeadKind::Generative,
            InlierHead::Discriminative(_) => HeadKind::Discriminative,
        }
    }

    pub fn decoder(&self) -> &Mlp<T> {
        &self.decoder
    }

    pub fn head(&self) -> &InlierHead<T> {
        &self.head
    }

    pub fn feature_dim(&self) -> usize {
        self.decoder.in_dim()
    }

    pub fn decoder_dim(&self) -> usize {
        self.decoder.out_dim()
    }

    pub fn num_classes(&self) -> usize {
        match &self.head {
            InlierHead::Generative(g) => g.classes(),
            InlierHead::Discriminative(l) => l.out_dim(),
        }
    }

    pub fn components(&self) -> usize {
        match &self.head {
            InlierHead::Generative(g) => g.components(),
            InlierHead::Discriminative(_) => 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.decoder.parameter_count()
            + match &self.head {
                InlierHead::Generative(g) => g.parameter_count(),
                InlierHead::Discriminative(l) => l.parameter_count(),
            }
    }

    /// Marks the model as frozen; stage-2 training refuses unfrozen models.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_features(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.channels() != self.feature_dim() {
            return Err(Error::DimMismatch(format!(
                "inlier model expects {} channels, got {}",
                self.feature_dim(),
                f.channels()
            )));
        }
        Ok(())
    }

    /// Logits for pixel-major features `N x C_e`: `N x K`.
    pub fn pixel_logits(&self, pixels: &Array2<T>) -> Result<Array2<T>> {
        let z = self.decoder.infer(pixels)?;
        match &self.head {
            InlierHead::Generative(g) => g.log_densities(&z),
            InlierHead::Discriminative(l) => l.forward(&z),
        }
    }

    /// `K x H x W` class logits.
    pub fn logits(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_features(f)?;
        FeatureMap::from_pixels(f.height(), f.width(), &self.pixel_logits(&f.to_pixels())?)
    }

    /// Per-pixel argmax; ties go to the smallest class index.
    pub fn predict(&self, f: &FeatureMap<T>) -> Result<LabelMap> {
        self.check_features(f)?;
        let logits = self.pixel_logits(&f.to_pixels())?;
        let labels = logits
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(f.height(), f.width(), labels)
    }

    /// `max_k F_k(x)` per pixel for pixel-major features.
    pub fn pixel_max_logit(&self, pixels: &Array2<T>) -> Result<Vec<T>> {
        let logits = self.pixel_logits(pixels)?;
        Ok(logits
            .outer_iter()
            .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
            .collect())
    }

    pub fn max_logit(&self, f: &FeatureMap<T>) -> Result<ScoreMap<T>> {
        self.check_features(f)?;
        ScoreMap::new(f.height(), f.width(), self.pixel_max_logit(&f.to_pixels())?)
    }

    /// Inlier-density baseline: `-max_k F_k(x)`.
    pub fn id_score(&self, f: &FeatureMap<T>) -> Result<ScoreMap<T>> {
        self.max_logit(f)?.map(|v| -v)
    }

    pub(crate) fn write_tensors(&self, bundle: &mut ModelBundle) -> Result<()> {
        insert_mlp(bundle, "decoder", &self.decoder)?;
        match &self.head {
            InlierHead::Generative(g) => insert_gmm(bundle, "gmm", g),
            InlierHead::Discriminative(l) => insert_layer(bundle, "head", l),
        }
    }

    /// Rebuilds the stage-1 model held in a (stage-1 or stage-2) bundle.
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let m = &bundle.manifest;
        let cfg = inlier_config_echo(m);
        let act = cfg.map(|c| c.activation).unwrap_or(Activation::Gelu);
        let decoder = read_mlp(bundle, "decoder", act, Activation::Identity)?;
        if decoder.in_dim() != m.feature_dim || decoder.out_dim() != m.decoder_dim {
            return Err(Error::InvalidBundle(format!(
                "decoder is {}->{}, manifest says {}->{}",
                decoder.in_dim(),
                decoder.out_dim(),
                m.feature_dim,
                m.decoder_dim
            )));
        }
        let head = match m.inlier_head {
            HeadKind::Generative => InlierHead::Generative(read_gmm(
                bundle,
                "gmm",
                m.num_classes,
                m.gmm_components,
                m.decoder_dim,
            )?),
            HeadKind::Discriminative => {
                let l = read_layer(bundle, "head", Activation::Identity)?;
                if l.out_dim() != m.num_classes {
                    return Err(Error::InvalidBundle(format!(
                        "head has {} outputs, manifest says {} classes",
                        l.out_dim(),
                        m.num_classes
                    )));
                }
                InlierHead::Discriminative(l)
            }
        };
        Self::new(decoder, head)
    }

    /// Stage-1 bundle holding this model.
    pub fn to_bundle(&self, cfg: &InlierTrainConfig) -> Result<ModelBundle> {
        let mut bundle = ModelBundle::new(Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            stage: BundleStage::Inlier,
            inlier_head: self.head_kind(),
            uem_head: None,
            num_classes: self.num_classes(),
            feature_dim: self.feature_dim(),
            decoder_dim: self.decoder_dim(),
            projection_dim: None,
            gmm_components: self.components(),
            config: serde_json::json!({ "inlier": cfg }),
            tensors: BTreeMap::new(),
            frozen_digests: BTreeMap::new(),
        });
        self.write_tensors(&mut bundle)?;
        Ok(bundle)
    }
}

fn inlier_config_echo(m: &Manifest) -> Option<InlierTrainConfig> {
    m.config
        .get("inlier")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Stage-1 training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InlierTrainConfig {
    pub head: HeadKind,
    pub decoder_dim: usize,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    /// Side length of the square training tiles (one optimizer step each).
    pub patch: usize,
    /// Pixels per class sampled for each EM refresh of a generative head.
    pub em_samples: usize,
    pub gmm: GmmConfig,
    pub seed: u64,
}

impl Default for InlierTrainConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Generative,
            decoder_dim: 128,
            activation: Activation::Gelu,
            lr: 1e-3,
            epochs: 2,
            patch: 16,
            em_samples: 2000,
            gmm: GmmConfig::default(),
            seed: 0,
        }
    }
}

/// Diagnostics from [`train_inlier`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InlierReport {
    pub epoch_loss: Vec<f64>,
    pub train_scenes: Vec<usize>,
    pub heldout_scenes: Vec<usize>,
    pub heldout_miou: MiouReport,
    pub absent_classes: Vec<usize>,
    pub parameter_count: usize,
}

pub struct TrainedInlier<T> {
    pub bundle: ModelBundle,
    /// The model exactly as stored in `bundle` (parameters rounded to f32).
    pub model: InlierModel<T>,
    pub report: InlierReport,
}

/// Deterministic 90/10 split by scene index: the last `max(1, n/10)` scenes
/// are held out when there are at least two scenes.
pub fn heldout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), Vec::new());
    }
    let hold = ((n as f64) * 0.1).round().max(1.0) as usize;
    ((0..n - hold).collect(), (n - hold..n).collect())
}

/// mIoU of `model` over the given scenes.
pub fn evaluate_miou<T: Real>(
    model: &InlierModel<T>,
    scenes: &[(&FeatureMap<T>, &LabelMap)],
) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (f, l) in scenes {
        cm.add(&model.predict(f)?, l)?;
    }
    cm.report()
}

/// Square tiles covering an `h x w` scene.
pub(crate) fn tiles(h: usize, w: usize, patch: usize) -> Vec<(usize, usize, usize, usize)> {
    let p = patch.max(1);
    let mut out = Vec::new();
    for y in (0..h).step_by(p) {
        for x in (0..w).step_by(p) {
            out.push((y, x, p.min(h - y), p.min(w - x)));
        }
    }
    out
}

struct Batch<T> {
    pixels: Array2<T>,
    labels: Vec<u8>,
}

fn gather_batch<T: Real>(f: &FeatureMap<T>, l: &[u8], width: usize, tile: (usize, usize, usize, usize)) -> Batch<T> {
    let (y0, x0, h, w) = tile;
    let c = f.channels();
    let mut pixels = Array2::zeros((h * w, c));
    let mut labels = Vec::with_capacity(h * w);
    for (i, (y, x)) in (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| (y, x))).enumerate() {
        for ch in 0..c {
            pixels[[i, ch]] = f.get(ch, y, x);
        }
        labels.push(l[y * width + x]);
    }
    Batch { pixels, labels }
}

/// Decoded features of up to `cap` pixels per class from the given scenes.
fn class_samples<T: Real>(
    decoder: &Mlp<T>,
    data: &[(&FeatureMap<T>, &LabelMap)],
    num_classes: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<Option<Array2<T>>>> {
    let mut per_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_classes];
    for (s, (_, l)) in data.iter().enumerate() {
        for (p, &lab) in l.labels().iter().enumerate() {
            if lab != IGNORE {
                per_class[lab as usize].push((s, p));
            }
        }
    }
    let mut out = Vec::with_capacity(num_classes);
    for (k, mut idx) in per_class.into_iter().enumerate() {
        if idx.is_empty() {
            out.push(None);
            continue;
        }
        if idx.len() > cap {
            let mut rng = rng_for(seed, "inlier.em_sample", k as u64);
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
        let c = data[0].0.channels();
        let mut px = Array2::zeros((idx.len(), c));
        for (row, &(s, p)) in idx.iter().enumerate() {
            let f = data[s].0;
            let (y, x) = (p / f.width(), p % f.width());
            for ch in 0..c {
                px[[row, ch]] = f.get(ch, y, x);
            }
        }
        out.push(Some(decoder.infer(&px)?));
    }
    Ok(out)
}

/// Trains the stage-1 segmentor.
///
/// Discriminative: decoder and linear head by cross-entropy. Generative:
/// decoder by cross-entropy on GMM log-density logits, alternating with a
/// Sinkhorn-EM refresh of the mixtures after every epoch.
pub fn train_inlier<T: Real>(
    dataset: &[(FeatureMap<T>, LabelMap)],
    num_classes: usize,
    cfg: &InlierTrainConfig,
) -> Result<TrainedInlier<T>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if num_classes == 0 || num_classes > IGNORE as usize {
        return Err(Error::InvalidConfig(format!("unsupported class count {num_classes}")));
    }
    cfg.gmm.validate()?;
    let feature_dim = dataset[0].0.channels();
    for (f, l) in dataset {
        if f.channels() != feature_dim {
            return Err(Error::DimMismatch(format!(
                "scene with {} channels in a {feature_dim}-channel dataset",
                f.channels()
            )));
        }
        validate_pair(f, l, num_classes)?;
    }
    let (train_idx, held_idx) = heldout_split(dataset.len());
    let train: Vec<(&FeatureMap<T>, &LabelMap)> =
        train_idx.iter().map(|&i| (&dataset[i].0, &dataset[i].1)).collect();

    let mut model = InlierModel::init(
        cfg.head,
        feature_dim,
        cfg.decoder_dim,
        num_classes,
        cfg.gmm.components,
        cfg.activation,
        cfg.seed,
    )?;

    let mut counts = vec![0usize; num_classes];
    for (_, l) in &train {
        for &v in l.labels() {
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
    }
    let mut absent: Vec<usize> = (0..num_classes).filter(|&k| counts[k] == 0).collect();
    for &k in &absent {
        log::warn!("class {k} does not occur in the training scenes");
    }
    if let InlierHead::Generative(_) = model.head {
        let samples = class_samples(&model.decoder, &train, num_classes, cfg.em_samples, derive_seed(cfg.seed, "inlier.em", 0))?;
        let mut init_cfg = cfg.gmm.clone();
        init_cfg.momentum = 0.0;
        init_cfg.seed = derive_seed(cfg.seed, "inlier.gmm", 0);
        let mut head = GmmHead::standard(num_classes, cfg.gmm.components, cfg.decoder_dim)?;
        for (k, s) in samples.iter().enumerate() {
            match s {
                Some(x) if x.nrows() >= cfg.gmm.components => {
                    let (fitted, _) = fit_gmm(std::slice::from_ref(x), &init_cfg)?;
                    for c in 0..cfg.gmm.components {
                        head.set_component(k, c, fitted.mean(0, c), fitted.var(0, c))?;
                    }
                }
                _ => {
                    log::warn!("class {k} has too few pixels; its mixture keeps the initial parameters");
                    if !absent.contains(&k) {
                        absent.push(k);
                    }
                }
            }
        }
        model.head = InlierHead::Generative(head);
    }

    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut jobs: Vec<(usize, (usize, usize, usize, usize))> = train
        .iter()
        .enumerate()
        .flat_map(|(s, (f, _))| tiles(f.height(), f.width(), cfg.patch).into_iter().map(move |t| (s, t)))
        .collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, "inlier.shuffle", epoch as u64);
        jobs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for &(s, tile) in &jobs {
            let (f, l) = train[s];
            let batch = gather_batch(f, l.labels(), f.width(), tile);
            if batch.labels.iter().all(|&v| v == IGNORE) {
                continue;
            }
            total += train_step(&mut model, &mut opt, &batch)?;
            steps += 1;
        }
        epoch_loss.push(if steps > 0 { total / steps as f64 } else { 0.0 });
        if let InlierHead::Generative(_) = model.head {
            let samples = class_samples(&model.decoder, &train, num_classes, cfg.em_samples, derive_seed(cfg.seed, "inlier.em", epoch as u64 + 1))?;
            if let InlierHead::Generative(head) = &mut model.head {
                for (k, s) in samples.iter().enumerate() {
                    if let Some(x) = s {
                        if x.nrows() >= cfg.gmm.components {
                            sinkhorn_em_round(head, k, x, &cfg.gmm)?;
                        }
                    }
                }
            }
        }
        log::debug!("inlier epoch {epoch}: loss {:.6}", epoch_loss[epoch]);
    }

    let bundle = model.to_bundle(cfg)?;
    let stored = InlierModel::from_bundle(&bundle)?;
    let eval_idx = if held_idx.is_empty() { &train_idx } else { &held_idx };
    let eval: Vec<(&FeatureMap<T>, &LabelMap)> =
        eval_idx.iter().map(|&i| (&dataset[i].0, &dataset[i].1)).collect();
    let heldout_miou = evaluate_miou(&stored, &eval)?;
    let report = InlierReport {
        epoch_loss,
        train_scenes: train_idx,
        heldout_scenes: held_idx,
        heldout_miou,
        absent_classes: absent,
        parameter_count: stored.parameter_count(),
    };
    Ok(TrainedInlier {
        bundle,
        model: stored,
        report,
    })
}

fn train_step<T: Real>(model: &mut InlierModel<T>, opt: &mut Optimizer<T>, batch: &Batch<T>) -> Result<f64> {
    let (z, tape) = model.decoder.forward(&batch.pixels)?;
    let (loss, dz, head_grads) = match &model.head {
        InlierHead::Discriminative(layer) => {
            let pre = layer.pre_activation(&z)?;
            let ce = softmax_cross_entropy(&pre, &batch.labels)?;
            let (lg, dz) = layer.backward(&z, &pre, &ce.grad);
            (ce.loss, dz, Some(lg))
        }
        InlierHead::Generative(g) => {
            let comps = g.component_scores(&z)?;
            let class = g.class_scores(&comps);
            let ce = softmax_cross_entropy(&class, &batch.labels)?;
            let mut d_comp = Array2::zeros(comps.dim());
            g.class_to_component_grad(&comps, &class, &ce.grad, &mut d_comp);
            let grads = g.backward_components(&z, &d_comp)?;
            (ce.loss, grads.dx, None)
        }
    };
    let (dec_grads, _) = model.decoder.backward(&tape, &dz)?;
    let names = model.decoder.param_names("decoder");
    let flat: Vec<Vec<T>> = dec_grads
        .layers
        .iter()
        .flat_map(|l| [l.weights.iter().copied().collect::<Vec<_>>(), l.bias.to_vec()])
        .collect();
    let mut updates: Vec<ParamUpdate<'_, T>> = model
        .decoder
        .params_mut()
        .into_iter()
        .zip(names)
        .zip(flat.iter())
        .map(|((values, name), grad)| ParamUpdate { name, values, grad })
        .collect();
    let head_flat;
    if let (Some(lg), InlierHead::Discriminative(layer)) = (head_grads, &mut model.head) {
        head_flat = [lg.weights.iter().copied().collect::<Vec<_>>(), lg.bias.to_vec()];
        updates.push(ParamUpdate {
            name: "head.weight".into(),
            values: layer.weights.as_slice_mut().expect("standard layout"),
            grad: &head_flat[0],
        });
        updates.push(ParamUpdate {
            name: "head.bias".into(),
            values: layer.bias.as_slice_mut().expect("standard layout"),
            grad: &head_flat[1],
        });
    }
    opt.step(updates)?;
    Ok(loss.to_f64_lossy())
}
