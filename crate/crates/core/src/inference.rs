//! Sliding-window scoring with mean stitching over overlaps.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureMap, ModelBundle, ScoreMap};
use crate::error::{Error, Result};
use crate::inlier::InlierModel;
use crate::scalar::Real;
use crate::uem::{llr_score, ood_score, uem_forward, UemModel};

/// Which outlier score to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// `log p_out - log p_in - max_k F_k`.
    Llr,
    /// `-max_k F_k` from the inlier model alone.
    Id,
    /// `log p_out` from the module alone.
    Ood,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Llr, Scorer::Id, Scorer::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Llr => "llr",
            Scorer::Id => "id",
            Scorer::Ood => "ood",
        }
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llr" => Ok(Scorer::Llr),
            "id" => Ok(Scorer::Id),
            "ood" => Ok(Scorer::Ood),
            other => Err(Error::InvalidConfig(format!("unknown scorer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    /// Window after clamping to the image.
    pub window: (usize, usize),
    pub stride: (usize, usize),
    /// Row-major tile origins `(y, x)`.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(dim: usize, win: usize, stride: usize) -> Vec<usize> {
    let last = dim - win;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    // The final window is clamped so it ends at the border.
    out.push(last);
    out
}

/// Tiles of size `window` every `stride` pixels; the last tile per axis is
/// moved back so it ends at the image border.
pub fn tile_plan(height: usize, width: usize, window: (usize, usize), stride: (usize, usize)) -> Result<TilePlan> {
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::ZeroStride);
    }
    if height == 0 || width == 0 || window.0 == 0 || window.1 == 0 {
        return Err(Error::InvalidConfig("empty image or window".into()));
    }
    let win = (window.0.min(height), window.1.min(width));
    let ys = axis_origins(height, win.0, stride.0);
    let xs = axis_origins(width, win.1, stride.1);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    Ok(TilePlan {
        height,
        width,
        window: win,
        stride,
        origins,
    })
}

impl TilePlan {
    /// Visits per pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.height * self.width];
        for &(y0, x0) in &self.origins {
            for y in y0..y0 + self.window.0 {
                for x in x0..x0 + self.window.1 {
                    c[y * self.width + x] += 1;
                }
            }
        }
        c
    }
}

/// Frozen inlier model plus trained module, ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline<T> {
    pub inlier: InlierModel<T>,
    pub uem: UemModel<T>,
}

impl<T: Real> Pipeline<T> {
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let mut inlier = InlierModel::from_bundle(bundle)?;
        inlier.freeze();
        Ok(Self {
            inlier,
            uem: UemModel::from_bundle(bundle)?,
        })
    }

    pub fn score(&self, f: &FeatureMap<T>, scorer: Scorer) -> Result<ScoreMap<T>> {
        score_pixels(&self.inlier, &self.uem, f, scorer)
    }
}

/// Whole-image scoring without tiling.
pub fn score_pixels<T: Real>(
    inlier: &InlierModel<T>,
    uem: &UemModel<T>,
    f: &FeatureMap<T>,
    scorer: Scorer,
) -> Result<ScoreMap<T>> {
    match scorer {
        Scorer::Id => inlier.id_score(f),
        Scorer::Ood => Ok(ood_score(&uem_forward(uem, f)?.1)),
        Scorer::Llr => {
            let (log_in, log_out) = uem_forward(uem, f)?;
            llr_score(&log_out, &log_in, &inlier.max_logit(f)?)
        }
    }
}

/// Scores each tile independently (in parallel) and averages overlapping
/// pixels. Accumulation follows the plan's tile order, so the result does
/// not depend on scheduling.
pub fn score_image<T: Real>(
    pipeline: &Pipeline<T>,
    f: &FeatureMap<T>,
    plan: &TilePlan,
    scorer: Scorer,
) -> Result<ScoreMap<T>> {
    if plan.height != f.height() || plan.width != f.width() {
        return Err(Error::DimMismatch(format!(
            "plan for {}x{} applied to {}x{}",
            plan.height,
            plan.width,
            f.height(),
            f.width()
        )));
    }
    let (wh, ww) = plan.window;
    let tiles: Vec<ScoreMap<T>> = plan
        .origins
        .par_iter()
        .map(|&(y, x)| pipeline.score(&f.crop(y, x, wh, ww)?, scorer))
        .collect::<Result<_>>()?;
    let w = plan.width;
    let mut sum = vec![T::zero(); plan.height * w];
    let mut count = vec![0u32; plan.height * w];
    for (&(y0, x0), tile) in plan.origins.iter().zip(&tiles) {
        for dy in 0..wh {
            for dx in 0..ww {
                let p = (y0 + dy) * w + x0 + dx;
                sum[p] += tile.get(dy, dx);
                count[p] += 1;
            }
        }
    }
    let scores = sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| s / T::lit(c as f64))
        .collect();
    ScoreMap::new(plan.height, w, scores)
}

/// Binary PGM (`P5`) preview, min-max normalized over the image.
pub fn preview_pgm<T: Real>(scores: &ScoreMap<T>) -> Vec<u8> {
    let v: Vec<f64> = scores.scores().iter().map(|s| s.to_f64_lossy()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", scores.width(), scores.height()).into_bytes();
    out.extend(v.iter().map(|&s| {
        if span > 0.0 {
            ((s - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}
