//! Synthetic scenes and cut-paste outlier injection.
//!
//! Scenes are Voronoi partitions with one site per class; every pixel draws
//! its feature vector from its class's isotropic Gaussian. Outliers are
//! shapes whose pixels are overwritten with draws from a bank Gaussian that
//! sits at least `separation * max_scale` away from every class mean.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_feature_map, load_label_map, load_outlier_map, save_feature_map, save_label_map,
    save_outlier_map, BinaryOutlierMap, FeatureMap, LabelMap, IGNORE, INLIER, OUTLIER,
};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const LAYOUT_RETRIES: usize = 32;
const BANK_RETRIES: usize = 10_000;
pub const DATASET_MANIFEST: &str = "manifest.json";

/// Isotropic Gaussian `N(mean, scale^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Gaussian {
    /// One draw, rounded to f32 so in-memory and on-disk scenes agree.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                (m + self.scale * z) as f32 as f64
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len() as f64;
        let v = self.scale * self.scale;
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * (d * (2.0 * std::f64::consts::PI * v).ln() + sq / v)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_gaussian<R: Rng>(rng: &mut R, dim: usize, spread: f64, scales: (f64, f64)) -> Gaussian {
    let mean = (0..dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
    let scale = if scales.1 > scales.0 {
        rng.random_range(scales.0..scales.1)
    } else {
        scales.0
    };
    Gaussian { mean, scale }
}

fn check_scales(range: (f64, f64)) -> Result<()> {
    if !(range.0 > 0.0 && range.1 >= range.0 && range.1.is_finite()) {
        return Err(Error::InvalidConfig(format!("scale range {range:?}")));
    }
    Ok(())
}

/// Class generators and scene geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<Gaussian>,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, classes: Vec<Gaussian>) -> Result<Self> {
        if height == 0 || width == 0 || classes.is_empty() || classes.len() > IGNORE as usize {
            return Err(Error::InvalidConfig(format!(
                "{height}x{width} scene with {} classes",
                classes.len()
            )));
        }
        let dim = classes[0].mean.len();
        if dim == 0 {
            return Err(Error::InvalidConfig("zero feature dimension".into()));
        }
        for (i, g) in classes.iter().enumerate() {
            if g.mean.len() != dim {
                return Err(Error::DimMismatch(format!("class {i} has dim {}", g.mean.len())));
            }
            if !(g.scale > 0.0 && g.scale.is_finite()) || g.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidConfig(format!("class {i} generator is degenerate")));
            }
            for (j, h) in classes[..i].iter().enumerate() {
                if g.mean == h.mean {
                    return Err(Error::InvalidConfig(format!("classes {j} and {i} share a mean")));
                }
            }
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    /// Class means `spread * N(0, I)`, scales uniform in `scales`.
    pub fn random(
        num_classes: usize,
        feature_dim: usize,
        height: usize,
        width: usize,
        spread: f64,
        scales: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        check_scales(scales)?;
        let mut rng = rng_for(seed, "anomalymix.classes", 0);
        let classes = (0..num_classes)
            .map(|_| random_gaussian(&mut rng, feature_dim, spread, scales))
            .collect();
        Self::new(height, width, classes)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.classes[0].mean.len()
    }

    pub fn max_scale(&self) -> f64 {
        self.classes.iter().map(|g| g.scale).fold(0.0, f64::max)
    }

    /// Log-density of `x` under the equal-weight mixture of class generators.
    pub fn inlier_log_density(&self, x: &[f64]) -> f64 {
        let lp: Vec<f64> = self.classes.iter().map(|g| g.log_density(x)).collect();
        crate::scalar::log_sum_exp(&lp) - (self.classes.len() as f64).ln()
    }
}

/// Outlier generators plus the train/eval index partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierBank {
    pub gaussians: Vec<Gaussian>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub separation: f64,
}

impl OutlierBank {
    /// Rejection-samples `size` generators at least `separation * s_max` from
    /// every class mean, where `s_max` is the largest scale in play. The last
    /// `eval_count` are reserved for evaluation.
    pub fn random(
        spec: &SceneSpec,
        size: usize,
        eval_count: usize,
        separation: f64,
        spread: f64,
        scales: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        check_scales(scales)?;
        if eval_count > size || !(separation >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bank of {size} with {eval_count} eval members, separation {separation}"
            )));
        }
        let s_max = spec.max_scale().max(scales.1);
        let mut rng = rng_for(seed, "anomalymix.bank", 0);
        let mut gaussians = Vec::with_capacity(size);
        for i in 0..size {
            let mut accepted = None;
            for _ in 0..BANK_RETRIES {
                let g = random_gaussian(&mut rng, spec.feature_dim(), spread, scales);
                if spec
                    .classes
                    .iter()
                    .all(|c| distance(&c.mean, &g.mean) >= separation * s_max)
                {
                    accepted = Some(g);
                    break;
                }
            }
            gaussians.push(accepted.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "could not place bank member {i} at separation {separation}"
                ))
            })?);
        }
        let bank = Self {
            gaussians,
            train: (0..size - eval_count).collect(),
            eval: (size - eval_count..size).collect(),
            separation,
        };
        bank.check(spec)?;
        Ok(bank)
    }

    /// Verifies the separation invariant and the disjoint index partition.
    pub fn check(&self, spec: &SceneSpec) -> Result<()> {
        let s_max = self
            .gaussians
            .iter()
            .map(|g| g.scale)
            .fold(spec.max_scale(), f64::max);
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.mean.len() != spec.feature_dim() {
                return Err(Error::DimMismatch(format!("bank member {i} has dim {}", g.mean.len())));
            }
            for (k, c) in spec.classes.iter().enumerate() {
                let d = distance(&c.mean, &g.mean);
                if d < self.separation * s_max {
                    return Err(Error::InvalidConfig(format!(
                        "bank member {i} is {d:.3} from class {k}, below {:.3}",
                        self.separation * s_max
                    )));
                }
            }
        }
        let mut seen = vec![false; self.gaussians.len()];
        for &i in self.train.iter().chain(&self.eval) {
            if i >= seen.len() || seen[i] {
                return Err(Error::InvalidConfig(format!("bank index {i} reused or out of range")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// A raster shape in continuous pixel coordinates (pixel `(y, x)` is
/// inside when its centre `(y + 0.5, x + 0.5)` is).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    /// Convex polygon, vertices in counter-clockwise order as `(y, x)`.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    pub fn contains(&self, py: f64, px: f64) -> bool {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => py >= *y0 && py < *y1 && px >= *x0 && px < *x1,
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (py - cy, px - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| {
                    let (ay, ax) = vertices[i];
                    let (by, bx) = vertices[(i + 1) % n];
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
                })
            }
        }
    }

    /// Bounding box `(y0, x0, y1, x1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => (*y0, *x0, *y1, *x1),
            Shape::Ellipse { cy, cx, ry, rx, .. } => {
                let r = ry.max(*rx);
                (cy - r, cx - r, cy + r, cx + r)
            }
            Shape::Polygon { vertices } => vertices.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(y, x)| (a.min(y), b.min(x), c.max(y), d.max(x)),
            ),
        }
    }

    /// Pixels covered, clipped to the image.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (y0, x0, y1, x1) = self.bounds();
        let ylo = y0.floor().max(0.0) as usize;
        let xlo = x0.floor().max(0.0) as usize;
        let yhi = (y1.ceil().max(0.0) as usize).min(height);
        let xhi = (x1.ceil().max(0.0) as usize).min(width);
        let mut out = Vec::new();
        for y in ylo..yhi {
            for x in xlo..xhi {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn scaled(&self, f: f64) -> Shape {
        let (y0, x0, y1, x1) = self.bounds();
        let (cy, cx) = ((y0 + y1) / 2.0, (x0 + x1) / 2.0);
        match self {
            Shape::Rect { y0, x0, y1, x1 } => Shape::Rect {
                y0: cy + (y0 - cy) * f,
                x0: cx + (x0 - cx) * f,
                y1: cy + (y1 - cy) * f,
                x1: cx + (x1 - cx) * f,
            },
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => Shape::Ellipse {
                cy: *cy,
                cx: *cx,
                ry: ry * f,
                rx: rx * f,
                angle: *angle,
            },
            Shape::Polygon { vertices } => Shape::Polygon {
                vertices: vertices
                    .iter()
                    .map(|&(y, x)| (cy + (y - cy) * f, cx + (x - cx) * f))
                    .collect(),
            },
        }
    }

    fn translated(&self, dy: f64, dx: f64) -> Shape {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => Shape::Rect {
                y0: y0 + dy,
                x0: x0 + dx,
                y1: y1 + dy,
                x1: x1 + dx,
            },
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => Shape::Ellipse {
                cy: cy + dy,
                cx: cx + dx,
                ry: *ry,
                rx: *rx,
                angle: *angle,
            },
            Shape::Polygon { vertices } => Shape::Polygon {
                vertices: vertices.iter().map(|&(y, x)| (y + dy, x + dx)).collect(),
            },
        }
    }
}

/// Raster area of a shape centred in an unbounded plane.
fn unclipped_area(shape: &Shape) -> usize {
    let (y0, x0, _, _) = shape.bounds();
    let t = shape.translated(2.0 - y0.floor(), 2.0 - x0.floor());
    let (_, _, y1, x1) = t.bounds();
    t.rasterize(y1.ceil() as usize + 2, x1.ceil() as usize + 2).len()
}

/// A random unit-scale shape of one of the three kinds, centred at the origin.
fn random_prototype<R: Rng>(rng: &mut R) -> Shape {
    let aspect: f64 = rng.random_range(0.5..2.0);
    let (ry, rx) = (aspect.sqrt(), 1.0 / aspect.sqrt());
    match rng.random_range(0..3) {
        0 => Shape::Rect {
            y0: -ry,
            x0: -rx,
            y1: ry,
            x1: rx,
        },
        1 => Shape::Ellipse {
            cy: 0.0,
            cx: 0.0,
            ry,
            rx,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        _ => {
            // Points on an ellipse are in convex position; sorted angles give
            // a counter-clockwise convex polygon.
            let n = rng.random_range(5..=8);
            let mut angles: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(f64::total_cmp);
            Shape::Polygon {
                vertices: angles.iter().map(|a| (ry * a.sin(), rx * a.cos())).collect(),
            }
        }
    }
}

/// Smallest scaling of `proto` whose raster area reaches `target` pixels
/// (bisection on the scale factor).
fn fit_area(proto: &Shape, target: usize, limit: usize) -> Shape {
    let target = target.max(1);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while unclipped_area(&proto.scaled(hi)) < target {
        hi *= 2.0;
        if hi > 1e4 {
            break;
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if unclipped_area(&proto.scaled(mid)) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let best = proto.scaled(hi);
    if unclipped_area(&best) > limit && lo > 0.0 && unclipped_area(&proto.scaled(lo)) > 0 {
        return proto.scaled(lo);
    }
    best
}

/// Paste controls for [`inject_outliers`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PasteConfig {
    /// Inclusive range of pastes per scene.
    pub count: (usize, usize),
    /// Range of each shape's area as a fraction of the image.
    pub area: (f64, f64),
}

impl Default for PasteConfig {
    fn default() -> Self {
        Self {
            count: (1, 4),
            area: (0.01, 0.10),
        }
    }
}

impl PasteConfig {
    fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area;
        if self.count.0 > self.count.1 || !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::InvalidConfig(format!("paste config {self:?}")));
        }
        Ok(())
    }
}

/// Labelled scene as produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub features: FeatureMap<f64>,
    /// Class labels, `IGNORE` under pasted outliers.
    pub labels: LabelMap,
    pub outliers: BinaryOutlierMap,
}

/// Voronoi scene with one site per class.
pub fn synth_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<(FeatureMap<f64>, LabelMap)> {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes());
    if k > h * w {
        return Err(Error::DegenerateLayout(format!("{k} classes on {h}x{w} pixels")));
    }
    let mut labels = None;
    for _ in 0..LAYOUT_RETRIES {
        let sites: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
            .collect();
        let mut lab = vec![0u8; h * w];
        let mut counts = vec![0usize; k];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &(sy, sx)) in sites.iter().enumerate() {
                    let d = (py - sy).powi(2) + (px - sx).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                lab[y * w + x] = best as u8;
                counts[best] += 1;
            }
        }
        if counts.iter().all(|&c| c > 0) {
            labels = Some(lab);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::DegenerateLayout(format!("a class stayed empty after {LAYOUT_RETRIES} layouts"))
    })?;
    let c = spec.feature_dim();
    let mut data = vec![0.0; c * h * w];
    for (p, &lab) in labels.iter().enumerate() {
        let v = spec.classes[lab as usize].sample(rng);
        for (ch, value) in v.into_iter().enumerate() {
            data[ch * h * w + p] = value;
        }
    }
    Ok((FeatureMap::new(c, h, w, data)?, LabelMap::new(h, w, labels)?))
}

/// Overwrites the pixels of `shape` with draws from `source`.
pub fn paste_shape<R: Rng>(
    features: &mut FeatureMap<f64>,
    labels: &mut LabelMap,
    outliers: &mut BinaryOutlierMap,
    shape: &Shape,
    source: &Gaussian,
    rng: &mut R,
) -> Result<usize> {
    if source.mean.len() != features.channels() {
        return Err(Error::DimMismatch(format!(
            "outlier generator of dim {} for {} channels",
            source.mean.len(),
            features.channels()
        )));
    }
    let (h, w) = (features.height(), features.width());
    let pixels = shape.rasterize(h, w);
    let mut out = outliers.labels().to_vec();
    for &(y, x) in &pixels {
        features.set_pixel(y, x, &source.sample(rng))?;
        labels.labels_mut()[y * w + x] = IGNORE;
        out[y * w + x] = OUTLIER;
    }
    *outliers = BinaryOutlierMap::new(h, w, out)?;
    Ok(pixels.len())
}

/// Pastes a random number of random shapes drawn from the bank members in
/// `pool`. Returns the mixed features, the outlier map, and the inlier
/// labels with pasted pixels set to `IGNORE`.
pub fn inject_outliers<R: Rng>(
    features: &FeatureMap<f64>,
    labels: &LabelMap,
    bank: &OutlierBank,
    pool: &[usize],
    paste: &PasteConfig,
    rng: &mut R,
) -> Result<Scene> {
    paste.validate()?;
    let (h, w) = (features.height(), features.width());
    let mut f = features.clone();
    let mut l = labels.clone();
    let mut o = BinaryOutlierMap::new(h, w, vec![INLIER; h * w])?;
    let n = rng.random_range(paste.count.0..=paste.count.1);
    if n > 0 && pool.is_empty() {
        return Err(Error::InvalidConfig("empty outlier pool".into()));
    }
    let total = (h * w) as f64;
    for _ in 0..n {
        let source = &bank.gaussians[pool[rng.random_range(0..pool.len())]];
        let frac = if paste.area.1 > paste.area.0 {
            rng.random_range(paste.area.0..paste.area.1)
        } else {
            paste.area.0
        };
        let target = (frac * total).ceil() as usize;
        let limit = (paste.area.1 * total).floor() as usize;
        let shape = fit_area(&random_prototype(rng), target, limit);
        let (y0, x0, y1, x1) = shape.bounds();
        let (bh, bw) = (y1 - y0, x1 - x0);
        // Whole shape inside the image whenever it fits; otherwise clipped.
        let dy = if bh < h as f64 {
            rng.random_range(0.0..=(h as f64 - bh)) - y0
        } else {
            (h as f64 - bh) / 2.0 - y0
        };
        let dx = if bw < w as f64 {
            rng.random_range(0.0..=(w as f64 - bw)) - x0
        } else {
            (w as f64 - bw) / 2.0 - x0
        };
        paste_shape(&mut f, &mut l, &mut o, &shape.translated(dy, dx), source, rng)?;
    }
    Ok(Scene {
        features: f,
        labels: l,
        outliers: o,
    })
}

/// Generator settings for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the class and bank means around the origin.
    pub mean_spread: f64,
    pub scale_range: (f64, f64),
    pub bank_size: usize,
    pub eval_bank: usize,
    pub separation: f64,
    pub paste: PasteConfig,
    pub train_inlier: usize,
    pub train_uem: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            feature_dim: 16,
            height: 64,
            width: 64,
            mean_spread: 3.0,
            scale_range: (0.8, 1.2),
            bank_size: 8,
            eval_bank: 3,
            separation: 6.0,
            paste: PasteConfig::default(),
            train_inlier: 12,
            train_uem: 12,
            eval: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainInlier,
    TrainUem,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub split: Split,
    pub dir: String,
    pub seed: u64,
    pub outlier_pixels: usize,
}

/// Outcome of the likelihood separation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// First percentile of inlier-pixel log-densities under the inlier mixture.
    pub inlier_p01: f64,
    /// Largest outlier-pixel log-density under the same mixture.
    pub outlier_max: f64,
    pub outlier_pixels: usize,
    /// Outlier pixels at or above `inlier_p01`.
    pub violations: usize,
}

impl SeparationReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub spec: SceneSpec,
    pub bank: OutlierBank,
    pub scenes: Vec<SceneRecord>,
    pub separation: SeparationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.manifest
            .scenes
            .iter()
            .zip(&self.scenes)
            .filter(move |(r, _)| r.split == split)
            .map(|(_, s)| s)
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes()
    }
}

/// Checks that every outlier pixel is below the first percentile of inlier
/// log-densities under the generating inlier mixture.
pub fn separation_check<'a>(
    spec: &SceneSpec,
    scenes: impl IntoIterator<Item = &'a Scene>,
) -> SeparationReport {
    let mut inlier = Vec::new();
    let mut outlier = Vec::new();
    for s in scenes {
        let px = s.features.to_pixels();
        for (row, &o) in px.outer_iter().zip(s.outliers.labels()) {
            let lp = spec.inlier_log_density(row.as_slice().expect("standard layout"));
            match o {
                OUTLIER => outlier.push(lp),
                INLIER => inlier.push(lp),
                _ => {}
            }
        }
    }
    inlier.sort_by(f64::total_cmp);
    let p01 = if inlier.is_empty() {
        f64::NEG_INFINITY
    } else {
        inlier[((inlier.len() - 1) as f64 * 0.01).floor() as usize]
    };
    SeparationReport {
        inlier_p01: p01,
        outlier_max: outlier.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        outlier_pixels: outlier.len(),
        violations: outlier.iter().filter(|&&v| v >= p01).count(),
    }
}

/// Generates every scene in memory; scene `i` uses its own derived seed.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let spec = SceneSpec::random(
        cfg.num_classes,
        cfg.feature_dim,
        cfg.height,
        cfg.width,
        cfg.mean_spread,
        cfg.scale_range,
        cfg.seed,
    )?;
    let bank = OutlierBank::random(
        &spec,
        cfg.bank_size,
        cfg.eval_bank,
        cfg.separation,
        cfg.mean_spread,
        cfg.scale_range,
        cfg.seed,
    )?;
    let plan = [
        (Split::TrainInlier, cfg.train_inlier),
        (Split::TrainUem, cfg.train_uem),
        (Split::Eval, cfg.eval),
    ];
    let mut records = Vec::new();
    let mut scenes = Vec::new();
    for (split, n) in plan {
        for _ in 0..n {
            let index = records.len();
            let seed = crate::seed::derive_seed(cfg.seed, "anomalymix.scene", index as u64);
            let mut rng = rng_for(seed, "scene", 0);
            let (f, l) = synth_scene(&spec, &mut rng)?;
            let scene = match split {
                Split::TrainInlier => {
                    let (h, w) = (f.height(), f.width());
                    Scene {
                        features: f,
                        labels: l,
                        outliers: BinaryOutlierMap::new(h, w, vec![INLIER; h * w])?,
                    }
                }
                Split::TrainUem => inject_outliers(&f, &l, &bank, &bank.train, &cfg.paste, &mut rng)?,
                Split::Eval => inject_outliers(&f, &l, &bank, &bank.eval, &cfg.paste, &mut rng)?,
            };
            records.push(SceneRecord {
                index,
                split,
                dir: format!("scenes/{index:04}"),
                seed,
                outlier_pixels: scene.outliers.count(OUTLIER),
            });
            scenes.push(scene);
        }
    }
    let separation = separation_check(&spec, &scenes);
    if !separation.holds() {
        log::warn!(
            "{} of {} outlier pixels reach the inlier 1st percentile",
            separation.violations,
            separation.outlier_pixels
        );
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            config: cfg.clone(),
            spec,
            bank,
            scenes: records,
            separation,
        },
        scenes,
    })
}

/// Generates and writes the dataset under `dir`.
pub fn make_dataset(cfg: &DatasetConfig, dir: impl AsRef<Path>) -> Result<Dataset> {
    let data = generate_dataset(cfg)?;
    save_dataset(&data, dir)?;
    Ok(data)
}

pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (rec, scene) in data.manifest.scenes.iter().zip(&data.scenes) {
        let d = dir.join(&rec.dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        save_feature_map(&scene.features, d.join("features.fmap"))?;
        save_label_map(&scene.labels, d.join("labels.lmap"))?;
        save_outlier_map(&scene.outliers, d.join("outliers.lmap"))?;
    }
    let path = dir.join(DATASET_MANIFEST);
    let json = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|rec| {
            let d: PathBuf = dir.join(&rec.dir);
            let features = load_feature_map(d.join("features.fmap"))?;
            let labels = load_label_map(d.join("labels.lmap"))?;
            let outliers = load_outlier_map(d.join("outliers.lmap"))?;
            crate::datamodel::validate_pair(&features, &labels, manifest.spec.num_classes())?;
            Ok(Scene {
                features,
                labels,
                outliers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(k: usize) -> SceneSpec {
        SceneSpec::random(k, 4, 16, 16, 4.0, (0.5, 1.0), 3).unwrap()
    }

    #[test]
    fn one_class_gives_constant_labels() {
        let spec = tiny_spec(1);
        let (_, l) = synth_scene(&spec, &mut rng_for(1, "t", 0)).unwrap();
        assert!(l.labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = tiny_spec(3);
        let a = synth_scene(&spec, &mut rng_for(9, "t", 0)).unwrap();
        let b = synth_scene(&spec, &mut rng_for(9, "t", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_class_gets_pixels() {
        let spec = tiny_spec(5);
        for s in 0..20 {
            let (_, l) = synth_scene(&spec, &mut rng_for(s, "t", 0)).unwrap();
            for k in 0..5u8 {
                assert!(l.labels().contains(&k));
            }
        }
    }

    #[test]
    fn zero_pastes_leave_scene_untouched() {
        let spec = tiny_spec(2);
        let bank = OutlierBank::random(&spec, 2, 1, 2.0, 4.0, (0.5, 1.0), 0).unwrap();
        let mut rng = rng_for(4, "t", 0);
        let (f, l) = synth_scene(&spec, &mut rng).unwrap();
        let paste = PasteConfig {
            count: (0, 0),
            area: (0.01, 0.1),
        };
        let s = inject_outliers(&f, &l, &bank, &bank.train, &paste, &mut rng).unwrap();
        assert_eq!(s.features, f);
        assert_eq!(s.labels, l);
        assert_eq!(s.outliers.count(OUTLIER), 0);
    }

    #[test]
    fn full_image_rectangle_marks_everything() {
        let spec = tiny_spec(2);
        let bank = OutlierBank::random(&spec, 1, 0, 2.0, 4.0, (0.5, 1.0), 0).unwrap();
        let mut rng = rng_for(5, "t", 0);
        let (mut f, mut l) = synth_scene(&spec, &mut rng).unwrap();
        let mut o = BinaryOutlierMap::new(16, 16, vec![INLIER; 256]).unwrap();
        let rect = Shape::Rect {
            y0: -3.0,
            x0: -3.0,
            y1: 40.0,
            x1: 40.0,
        };
        let n = paste_shape(&mut f, &mut l, &mut o, &rect, &bank.gaussians[0], &mut rng).unwrap();
        assert_eq!(n, 256);
        assert_eq!(o.count(OUTLIER), 256);
        assert!(l.labels().iter().all(|&v| v == IGNORE));
    }

    #[test]
    fn polygons_are_convex_and_ccw() {
        let mut rng = rng_for(0, "t", 0);
        for _ in 0..200 {
            if let Shape::Polygon { vertices } = random_prototype(&mut rng) {
                let n = vertices.len();
                for i in 0..n {
                    let (ay, ax) = vertices[i];
                    let (by, bx) = vertices[(i + 1) % n];
                    let (cy, cx) = vertices[(i + 2) % n];
                    let cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
                    assert!(cross >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn bank_respects_separation() {
        let spec = tiny_spec(4);
        let bank = OutlierBank::random(&spec, 6, 2, 3.0, 4.0, (0.5, 1.0), 1).unwrap();
        bank.check(&spec).unwrap();
        assert_eq!(bank.train, vec![0, 1, 2, 3]);
        assert_eq!(bank.eval, vec![4, 5]);
        let mut bad = bank.clone();
        bad.gaussians[0].mean = spec.classes[0].mean.clone();
        assert!(bad.check(&spec).is_err());
    }

    #[test]
    fn tiny_dataset_round_trips_through_disk() {
        let cfg = DatasetConfig {
            height: 16,
            width: 16,
            train_inlier: 2,
            train_uem: 2,
            eval: 2,
            ..DatasetConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let made = make_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(made.manifest.scenes.len(), 6);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, made);
    }
}
