//! End-to-end synthetic benchmark: generate, train both stages, score the
//! held-out outlier scenes with all three scorers.

use serde::{Deserialize, Serialize};

use crate::anomalymix::{generate_dataset, Dataset, DatasetConfig, Split};
use crate::datamodel::{FeatureMap, LabelMap, ModelBundle};
use crate::error::Result;
use crate::inference::{score_pixels, Scorer};
use crate::inlier::{evaluate_miou, train_inlier, InlierModel, InlierTrainConfig};
use crate::metrics::{ranking_report, RankingReport, ScoredPixels};
use crate::uem::{parameter_ratio, train_uem, LlrConfig, UemModel};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub data: DatasetConfig,
    pub inlier: InlierTrainConfig,
    pub uem: LlrConfig,
}

impl BenchmarkConfig {
    /// Same settings with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = seed;
        c.inlier.seed = seed;
        c.uem.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub llr: RankingReport,
    pub id: RankingReport,
    pub ood: RankingReport,
    pub heldout_miou: f64,
    pub eval_miou: f64,
    pub parameter_ratio: f64,
}

impl BenchmarkReport {
    /// LLR at least as good as both baselines in AP.
    pub fn ordering_holds(&self) -> bool {
        self.llr.ap >= self.id.ap && self.llr.ap >= self.ood.ap
    }
}

pub struct BenchmarkRun {
    pub dataset: Dataset,
    pub stage1: ModelBundle,
    pub stage2: ModelBundle,
    pub report: BenchmarkReport,
}

/// Scores every eval scene with `scorer` and pools the pixels.
pub fn pooled_scores(
    inlier: &InlierModel<f64>,
    uem: &UemModel<f64>,
    data: &Dataset,
    scorer: Scorer,
) -> Result<ScoredPixels<f64>> {
    let mut pooled: Option<ScoredPixels<f64>> = None;
    for s in data.split(Split::Eval) {
        let scores = score_pixels(inlier, uem, &s.features, scorer)?;
        match &mut pooled {
            Some(p) => p.extend(&scores, &s.outliers)?,
            None => pooled = Some(ScoredPixels::from_maps(&scores, &s.outliers)?),
        }
    }
    pooled.ok_or(crate::Error::EmptyDataset)
}

/// Metrics of a stage-2 bundle on the eval split of `data`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub llr: RankingReport,
    pub id: RankingReport,
    pub ood: RankingReport,
    pub eval_miou: f64,
    pub parameter_ratio: f64,
}

impl EvalReport {
    /// LLR at least as good as both baselines in AP.
    pub fn ordering_holds(&self) -> bool {
        self.llr.ap >= self.id.ap && self.llr.ap >= self.ood.ap
    }
}

pub fn evaluate_bundle(stage2: &ModelBundle, data: &Dataset) -> Result<EvalReport> {
    let inlier = InlierModel::from_bundle(stage2)?;
    let uem = UemModel::from_bundle(stage2)?;
    let report = |s| ranking_report(&pooled_scores(&inlier, &uem, data, s)?);
    let eval: Vec<(&FeatureMap<f64>, &LabelMap)> = data
        .split(Split::Eval)
        .map(|s| (&s.features, &s.labels))
        .collect();
    Ok(EvalReport {
        llr: report(Scorer::Llr)?,
        id: report(Scorer::Id)?,
        ood: report(Scorer::Ood)?,
        eval_miou: evaluate_miou(&inlier, &eval)?.miou,
        parameter_ratio: parameter_ratio(stage2),
    })
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkRun> {
    let dataset = generate_dataset(&cfg.data)?;
    let k = dataset.num_classes();
    let inlier_data: Vec<(FeatureMap<f64>, LabelMap)> = dataset
        .split(Split::TrainInlier)
        .map(|s| (s.features.clone(), s.labels.clone()))
        .collect();
    let stage1 = train_inlier(&inlier_data, k, &cfg.inlier)?;
    let uem_data: Vec<_> = dataset
        .split(Split::TrainUem)
        .map(|s| (s.features.clone(), s.outliers.clone()))
        .collect();
    let stage2 = train_uem::<f64>(&stage1.bundle, &uem_data, &cfg.uem)?;
    let e = evaluate_bundle(&stage2.bundle, &dataset)?;
    let report = BenchmarkReport {
        llr: e.llr,
        id: e.id,
        ood: e.ood,
        heldout_miou: stage1.report.heldout_miou.miou,
        eval_miou: e.eval_miou,
        parameter_ratio: e.parameter_ratio,
    };
    Ok(BenchmarkRun {
        dataset,
        stage1: stage1.bundle,
        stage2: stage2.bundle,
        report,
    })
}
