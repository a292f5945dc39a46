//! Pixel-wise evaluation: AUROC, average precision, FPR at a TPR level, and
//! mIoU.

use std::cmp::Ordering;

use serde::Serialize;

use crate::datamodel::{BinaryOutlierMap, LabelMap, ScoreMap, IGNORE, OUTLIER};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Flattened `(score, is_outlier)` pairs with ignored pixels removed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPixels<T> {
    scores: Vec<T>,
    labels: Vec<bool>,
    positives: usize,
    negatives: usize,
    ignored: usize,
}

impl<T: Real> ScoredPixels<T> {
    pub fn new(scores: Vec<T>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(position) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        let positives = labels.iter().filter(|&&l| l).count();
        let negatives = labels.len() - positives;
        Ok(Self {
            scores,
            labels,
            positives,
            negatives,
            ignored: 0,
        })
    }

    pub fn from_maps(scores: &ScoreMap<T>, outliers: &BinaryOutlierMap) -> Result<Self> {
        let mut sp = Self::new(Vec::new(), Vec::new())?;
        sp.extend(scores, outliers)?;
        Ok(sp)
    }

    /// Appends one more scene.
    pub fn extend(&mut self, scores: &ScoreMap<T>, outliers: &BinaryOutlierMap) -> Result<()> {
        if scores.height() != outliers.height() || scores.width() != outliers.width() {
            return Err(Error::DimMismatch(format!(
                "scores {}x{} vs outlier labels {}x{}",
                scores.height(),
                scores.width(),
                outliers.height(),
                outliers.width()
            )));
        }
        for (&s, &l) in scores.scores().iter().zip(outliers.labels()) {
            if l == IGNORE {
                self.ignored += 1;
                continue;
            }
            let pos = l == OUTLIER;
            self.scores.push(s);
            self.labels.push(pos);
            if pos {
                self.positives += 1;
            } else {
                self.negatives += 1;
            }
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn ignored(&self) -> usize {
        self.ignored
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn require_both(&self) -> Result<()> {
        if self.positives == 0 || self.negatives == 0 {
            return Err(Error::OneClassOnly {
                positives: self.positives,
                negatives: self.negatives,
            });
        }
        Ok(())
    }

    /// Tie groups in descending score order as `(positives, negatives)`.
    fn groups_desc(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_unstable_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(Ordering::Equal)
        });
        let mut groups = Vec::new();
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            let (mut p, mut n) = (0, 0);
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.labels[idx[i]] {
                    p += 1;
                } else {
                    n += 1;
                }
                i += 1;
            }
            groups.push((p, n));
        }
        groups
    }
}

/// Mann-Whitney AUROC: `(ordered pairs + ties / 2) / (P * N)`.
pub fn auroc<T: Real>(sp: &ScoredPixels<T>) -> Result<f64> {
    sp.require_both()?;
    let mut negatives_below = sp.negatives as f64;
    let mut good = 0.0;
    for (p, n) in sp.groups_desc() {
        negatives_below -= n as f64;
        good += p as f64 * (negatives_below + 0.5 * n as f64);
    }
    Ok(good / (sp.positives as f64 * sp.negatives as f64))
}

/// Step-sum average precision, `sum_n (R_n - R_{n-1}) P_n`, one step per
/// distinct score.
pub fn average_precision<T: Real>(sp: &ScoredPixels<T>) -> Result<f64> {
    sp.require_both()?;
    let total_pos = sp.positives as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in sp.groups_desc() {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / total_pos) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// FPR at the largest threshold whose TPR is at least `tau`, no
/// interpolation.
pub fn fpr_at_tpr<T: Real>(sp: &ScoredPixels<T>, tau: f64) -> Result<f64> {
    sp.require_both()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in sp.groups_desc() {
        tp += p;
        fp += n;
        if tp as f64 / sp.positives as f64 >= tau {
            return Ok(fp as f64 / sp.negatives as f64);
        }
    }
    Ok(1.0)
}

/// The three ranking metrics together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankingReport {
    pub auroc: f64,
    pub ap: f64,
    pub fpr95: f64,
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
}

pub fn ranking_report<T: Real>(sp: &ScoredPixels<T>) -> Result<RankingReport> {
    Ok(RankingReport {
        auroc: auroc(sp)?,
        ap: average_precision(sp)?,
        fpr95: fpr_at_tpr(sp, 0.95)?,
        positives: sp.positives,
        negatives: sp.negatives,
        ignored: sp.ignored,
    })
}

/// mIoU result with a per-class table (`None` for classes absent from gt).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub valid_pixels: usize,
    pub ignored: usize,
}

/// Accumulates a confusion matrix over one or more scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    /// `[gt][pred]`, last column counts predictions outside `0..k`.
    counts: Vec<u64>,
    ignored: usize,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * (k + 1)],
            ignored: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::DimMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        gt.validate(self.k)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                self.ignored += 1;
                continue;
            }
            let col = (p as usize).min(self.k);
            self.counts[g as usize * (self.k + 1) + col] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MiouReport> {
        let k = self.k;
        let stride = k + 1;
        let valid: u64 = self.counts.iter().sum();
        if valid == 0 {
            return Err(Error::NoValidPixels);
        }
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let row: u64 = self.counts[c * stride..(c + 1) * stride].iter().sum();
            if row == 0 {
                per_class.push(None);
                continue;
            }
            let tp = self.counts[c * stride + c];
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.counts[g * stride + c]).sum();
            let fn_ = row - tp;
            per_class.push(Some(tp as f64 / (tp + fp + fn_) as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            valid_pixels: valid as usize,
            ignored: self.ignored,
        })
    }
}

/// Mean IoU over classes present in `gt`.
pub fn miou(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    cm.report()
}
