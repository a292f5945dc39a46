//! Independent reference implementations used by the self-check and the
//! test suites. Everything here is written directly from the defining
//! formulas, deliberately slow, and shares no code path with the modules it
//! checks.

use ndarray::Array2;
use rand::Rng;

use crate::datamodel::IGNORE;
use crate::gmm::GmmHead;
use crate::neural::Mlp;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn gaussian_log_density_compensated(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let d = x.len() as f64;
    let log_det = compensated_sum(var.iter().map(|v| v.ln()));
    let maha = compensated_sum(
        x.iter()
            .zip(mean)
            .zip(var)
            .map(|((a, m), v)| (a - m) * (a - m) / v),
    );
    -0.5 * compensated_sum([d * (2.0 * std::f64::consts::PI).ln(), log_det, maha])
}

/// `ln(sum_c pi_c N_c(x))` by direct summation of densities.
pub fn gmm_log_density_naive(x: &[f64], head: &GmmHead<f64>, k: usize) -> f64 {
    let terms = (0..head.components()).map(|c| {
        head.weight(k, c) * gaussian_log_density_compensated(x, head.mean(k, c), head.var(k, c)).exp()
    });
    compensated_sum(terms).ln()
}

pub fn random_head<R: Rng>(rng: &mut R, classes: usize, components: usize, dim: usize) -> GmmHead<f64> {
    let n = classes * components * dim;
    let means = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let vars = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let mut weights = Vec::with_capacity(classes * components);
    for _ in 0..classes {
        let raw: Vec<f64> = (0..components).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| w / s));
    }
    GmmHead::new(classes, components, dim, means, vars, weights).expect("valid random head")
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Row-to-column permutation maximizing the total score (brute force).
pub fn best_assignment(scores: &Array2<f64>) -> Vec<usize> {
    let n = scores.nrows();
    assert_eq!(n, scores.ncols(), "square matrix required");
    permutations(n)
        .into_iter()
        .max_by(|a, b| {
            let sa: f64 = a.iter().enumerate().map(|(i, &j)| scores[[i, j]]).sum();
            let sb: f64 = b.iter().enumerate().map(|(i, &j)| scores[[i, j]]).sum();
            sa.partial_cmp(&sb).expect("finite")
        })
        .expect("at least one permutation")
}

/// Weighted per-dimension mean and (biased) variance.
pub fn weighted_moments(x: &Array2<f64>, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mass = compensated_sum(w.iter().copied());
    let d = x.ncols();
    let mean: Vec<f64> = (0..d)
        .map(|i| compensated_sum((0..x.nrows()).map(|n| w[n] * x[[n, i]])) / mass)
        .collect();
    let var = (0..d)
        .map(|i| {
            compensated_sum((0..x.nrows()).map(|n| w[n] * (x[[n, i]] - mean[i]).powi(2))) / mass
        })
        .collect();
    (mean, var)
}

/// Forward pass with explicit loops.
pub fn mlp_forward_naive(mlp: &Mlp<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    for layer in mlp.layers() {
        let mut out = Array2::zeros((h.nrows(), layer.out_dim()));
        for n in 0..h.nrows() {
            for o in 0..layer.out_dim() {
                let mut acc = layer.bias[o];
                for i in 0..layer.in_dim() {
                    acc += layer.weights[[o, i]] * h[[n, i]];
                }
                out[[n, o]] = layer.activation.apply(acc);
            }
        }
        h = out;
    }
    h
}

pub fn cross_entropy_direct(logits: &Array2<f64>, labels: &[u8]) -> f64 {
    let mut terms = Vec::new();
    for (n, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let denom = compensated_sum(logits.row(n).iter().map(|v| v.exp()));
        terms.push(-(logits[[n, l as usize]].exp() / denom).ln());
    }
    compensated_sum(terms.iter().copied()) / terms.len() as f64
}

pub fn bce_naive(z: &[f64], t: &[u8]) -> f64 {
    let mut terms = Vec::new();
    for (&zi, &ti) in z.iter().zip(t) {
        if ti == IGNORE {
            continue;
        }
        let s = 1.0 / (1.0 + (-zi).exp());
        let y = ti as f64;
        terms.push(-y * s.ln() - (1.0 - y) * (1.0 - s).ln());
    }
    compensated_sum(terms.iter().copied()) / terms.len() as f64
}

/// Adam on `0.5 (p - target)^2` with default betas, stepped by hand.
pub fn adam_hand_stepped(p0: f64, target: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = p - target;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}

/// Mann-Whitney AUROC by counting every positive/negative pair.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

fn distinct_thresholds_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    t.dedup();
    t
}

fn counts_at(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

/// Step-sum average precision by recounting at every distinct threshold.
pub fn average_precision_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_thresholds_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let recall = tp / p;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    ap
}

/// FPR at the highest threshold whose TPR reaches `tau`.
pub fn fpr_at_tpr_sweep(scores: &[f64], labels: &[bool], tau: f64) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    for t in distinct_thresholds_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp / p >= tau {
            return fp / n;
        }
    }
    1.0
}

/// mIoU over classes present in `gt`, from an explicit confusion matrix.
#[allow(clippy::needless_range_loop)]
pub fn miou_confusion(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    let mut cm = vec![vec![0u64; k + 1]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE {
            continue;
        }
        let col = if (p as usize) < k { p as usize } else { k };
        cm[g as usize][col] += 1;
    }
    let mut ious = Vec::new();
    for c in 0..k {
        let row: u64 = cm[c].iter().sum();
        if row == 0 {
            continue;
        }
        let tp = cm[c][c];
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm[g][c]).sum();
        let fn_ = row - tp;
        ious.push(tp as f64 / (tp + fp + fn_) as f64);
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}
