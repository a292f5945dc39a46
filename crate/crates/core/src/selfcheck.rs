//! Property checks shared by the acceptance suite and `llrseg selfcheck`.
//! Each returns the measured quantity next to its bound so callers can
//! print both.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::datamodel::{FeatureMap, HeadKind, IGNORE};
use crate::error::Result;
use crate::gmm::{gmm_log_density, sinkhorn_assign};
use crate::inference::{score_image, score_pixels, tile_plan, Pipeline, Scorer};
use crate::inlier::{InlierModel, InlierTrainConfig};
use crate::metrics::{auroc, average_precision, fpr_at_tpr, ScoredPixels};
use crate::neural::{grad_check, Activation, Mlp};
use crate::oracle;
use crate::seed::rng_for;
use crate::uem::{
    contrast_assignment, llr_discriminative, llr_generative, llr_loss_pixels, LlrConfig, UemHead,
    UemModel,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured value and the bound it was held to.
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Distance in units in the last place between two finite doubles of the
/// same sign.
pub fn ulps(a: f64, b: f64) -> u64 {
    a.to_bits().abs_diff(b.to_bits())
}

/// Both LLR forms on random pixels; counts inputs whose bits differ.
pub fn llr_identity(pixels: usize, seed: u64) -> Check {
    let mut rng = rng_for(seed, "selfcheck.llr", 0);
    let mut mismatches = 0;
    for _ in 0..pixels {
        let k = rng.random_range(1..=8);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-50.0..50.0)).collect();
        let o: f64 = rng.random_range(-50.0..50.0);
        let i: f64 = rng.random_range(-50.0..50.0);
        if llr_generative(o, i, &logits).to_bits() != llr_discriminative(o, i, &logits).to_bits() {
            mismatches += 1;
        }
    }
    Check::new(
        "llr identity",
        mismatches == 0,
        format!("{mismatches} of {pixels} pixels differ (bound: 0)"),
    )
}

/// Mixture log-density against compensated direct summation.
pub fn gmm_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_for(seed, "selfcheck.gmm", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=8);
        let c = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let head = oracle::random_head(&mut rng, k, c, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let class = rng.random_range(0..k);
        let fast = gmm_log_density(&x, &head, class)?;
        worst = worst.max((fast - oracle::gmm_log_density_naive(&x, &head, class)).abs());
    }
    Ok(Check::new(
        "gmm density oracle",
        worst < 1e-10,
        format!("max abs error {worst:.3e} over {instances} instances (bound: 1e-10)"),
    ))
}

/// Marginal residuals after 50 iterations, plus the uniform-cost plan.
pub fn sinkhorn_marginals(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_for(seed, "selfcheck.sinkhorn", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let cost = Array2::from_shape_fn((64, 5), |_| rng.random_range(-5.0..5.0));
        let plan = sinkhorn_assign(&cost, 1.0, 50)?;
        worst = worst.max(plan.row_residual).max(plan.col_residual);
    }
    let uniform = sinkhorn_assign(&Array2::<f64>::zeros((64, 5)), 1.0, 50)?;
    // Every cell is the same float and that float is 1/320 to the last bit
    // representable through exp/log.
    let first = uniform.plan[[0, 0]];
    let exact = uniform.plan.iter().all(|&v| v.to_bits() == first.to_bits()) && ulps(first, 1.0 / 320.0) <= 1;
    Ok(Check::new(
        "sinkhorn marginals",
        worst < 1e-4 && exact,
        format!("max residual {worst:.3e} (bound: 1e-4), uniform plan exact: {exact}"),
    ))
}

/// Random module of the given head kind on `d`-dimensional input.
pub fn random_uem(kind: HeadKind, d: usize, p: usize, components: usize, seed: u64) -> Result<UemModel<f64>> {
    let mut rng = rng_for(seed, "selfcheck.uem", 0);
    let projection = Mlp::new(&[d, p, p, p], Activation::Gelu, Activation::Identity, &mut rng)?;
    let head = match kind {
        HeadKind::Generative => UemHead::Generative(oracle::random_head(&mut rng, 2, components, p)),
        HeadKind::Discriminative => UemHead::Discriminative(crate::neural::DenseLayer::xavier(
            p,
            2,
            Activation::Identity,
            &mut rng,
        )),
    };
    UemModel::new(projection, head)
}

/// Worst relative error of the LLR loss gradient over `seeds` random
/// configurations, `coords` sampled coordinates each.
///
/// The contrast term's component assignment is piecewise constant, so the
/// finite differences hold it at its value for the unperturbed parameters.
pub fn llr_gradients(kind: HeadKind, seeds: u64, coords: usize) -> Result<f64> {
    let cfg = LlrConfig {
        head: kind,
        alpha: 1.0,
        beta: 0.01,
        ..LlrConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, "selfcheck.grad", 0);
        let (d, p, n) = (5, 8, 24);
        let u = random_uem(kind, d, p, 2, seed)?;
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let ml: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<u8> = (0..n)
            .map(|i| match i % 5 {
                4 => IGNORE,
                r => (r % 2) as u8,
            })
            .collect();
        let assignment = match u.head() {
            UemHead::Generative(g) => {
                let comps = g.component_scores(&u.projection().infer(&x)?)?;
                Some(contrast_assignment(g, &comps, &t, cfg.gmm.epsilon, cfg.gmm.sinkhorn_iters)?)
            }
            UemHead::Discriminative(_) => None,
        };
        let base = llr_loss_pixels(&u, &x, &ml, &t, &cfg, assignment.as_deref())?;
        let mut probe = u.clone();
        let report = grad_check(
            |flat| {
                probe.set_flat_params(flat).expect("same length");
                llr_loss_pixels(&probe, &x, &ml, &t, &cfg, assignment.as_deref())
                    .map(|l| l.loss)
                    .unwrap_or(f64::NAN)
            },
            &u.flatten_params(),
            &base.grads.flatten(),
            1e-5,
            coords,
            seed,
        );
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

pub fn gradient_check(seeds: u64, coords: usize) -> Result<Check> {
    let g = llr_gradients(HeadKind::Generative, seeds, coords)?;
    let d = llr_gradients(HeadKind::Discriminative, seeds, coords)?;
    Ok(Check::new(
        "llr loss gradients",
        g < 1e-4 && d < 1e-4,
        format!("max rel error generative {g:.3e}, discriminative {d:.3e} (bound: 1e-4)"),
    ))
}

/// Fast ranking metrics against brute-force sweeps, plus the hand examples.
pub fn metric_oracles(n: usize, seeds: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, "selfcheck.metrics", 0);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..200) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let sp = ScoredPixels::new(scores.clone(), labels.clone())?;
        worst = worst
            .max((auroc(&sp)? - oracle::auroc_pairwise(&scores, &labels)).abs())
            .max((average_precision(&sp)? - oracle::average_precision_sweep(&scores, &labels)).abs())
            .max((fpr_at_tpr(&sp, 0.95)? - oracle::fpr_at_tpr_sweep(&scores, &labels, 0.95)).abs());
    }
    let ap = average_precision(&ScoredPixels::new(vec![0.9, 0.8, 0.7, 0.6], vec![true, false, true, false])?)?;
    let au = auroc(&ScoredPixels::new(vec![0.9, 0.7, 0.8, 0.6], vec![true, true, false, false])?)?;
    let fpr = fpr_at_tpr(
        &ScoredPixels::new(vec![0.9, 0.8, 0.85, 0.7], vec![true, true, false, false])?,
        0.95,
    )?;
    // 5/6 has no exact binary form; one ulp is the closest a float sum gets.
    let hand = ulps(ap, 5.0 / 6.0) <= 1 && au == 0.75 && fpr == 0.5;
    Ok(Check::new(
        "metric oracles",
        worst < 1e-9 && hand,
        format!("max abs error {worst:.3e} over {seeds} seeds of n={n} (bound: 1e-9), hand examples exact: {hand}"),
    ))
}

/// Random pipeline whose scores are all finite, for stitching checks.
pub fn random_pipeline(channels: usize, seed: u64) -> Result<Pipeline<f64>> {
    let mut inlier = InlierModel::init(HeadKind::Generative, channels, 8, 3, 2, Activation::Gelu, seed)?;
    inlier.freeze();
    let uem = random_uem(HeadKind::Generative, channels, 4, 2, seed)?;
    Ok(Pipeline { inlier, uem })
}

/// Tiled scoring against whole-image scoring for strides `{1, w/4, w/2, w}`.
pub fn stitching(seed: u64) -> Result<Check> {
    let (c, h, w, win) = (4, 24, 20, 8);
    let pipe = random_pipeline(c, seed)?;
    let mut rng = rng_for(seed, "selfcheck.stitch", 0);
    let f = FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let mut worst: f64 = 0.0;
    let mut plans = 0;
    for scorer in Scorer::ALL {
        let whole = score_pixels(&pipe.inlier, &pipe.uem, &f, scorer)?;
        for stride in [1, win / 4, win / 2, win] {
            let plan = tile_plan(h, w, (win, win), (stride, stride))?;
            let tiled = score_image(&pipe, &f, &plan, scorer)?;
            plans += 1;
            for (a, b) in tiled.scores().iter().zip(whole.scores()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(Check::new(
        "stitching equivalence",
        worst <= 1e-12,
        format!("max abs difference {worst:.3e} over {plans} plans (bound: 1e-12)"),
    ))
}

/// `count(phi) / count(theta)` for models built at the default dimensions.
pub fn default_parameter_ratio(feature_dim: usize, classes: usize) -> Result<f64> {
    let icfg = InlierTrainConfig::default();
    let ucfg = LlrConfig::default();
    let inlier = InlierModel::<f64>::init(
        icfg.head,
        feature_dim,
        icfg.decoder_dim,
        classes,
        icfg.gmm.components,
        icfg.activation,
        0,
    )?;
    let uem = UemModel::<f64>::init(
        ucfg.head,
        feature_dim,
        ucfg.projection_dim,
        ucfg.gmm.components,
        ucfg.activation,
        0,
    )?;
    Ok(uem.parameter_count() as f64 / inlier.parameter_count() as f64)
}

pub fn parameter_budget(feature_dim: usize, classes: usize) -> Result<Check> {
    let r = default_parameter_ratio(feature_dim, classes)?;
    Ok(Check::new(
        "parameter budget",
        r < 0.05,
        format!("count(phi)/count(theta) = {r:.4} (bound: < 0.05)"),
    ))
}

/// The checks that need no training, in acceptance order.
pub fn quick_checks(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        llr_identity(1000, seed),
        gmm_oracle(10_000, seed)?,
        sinkhorn_marginals(20, seed)?,
        gradient_check(10, 200)?,
        metric_oracles(1000, 100)?,
        stitching(seed)?,
        parameter_budget(16, 5)?,
    ])
}
