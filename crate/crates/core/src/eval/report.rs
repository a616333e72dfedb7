use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_ci, bootstrap_pvalue, BootstrapConfig};
use super::froc::{cpm, froc_blocks, FrocCurve, FrocUnit};
use super::roc::auc_blocks;
use super::{EvalSet, ExamBlock, ScoredCandidate};
use crate::error::{Error, Result};
use crate::provenance::Provenance;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub value: f64,
    pub ci: [f64; 2],
}

impl MetricCi {
    /// Percentile intervals need not contain the point estimate on skewed
    /// resample distributions; the reported interval is widened to it.
    fn new(value: f64, ci: [f64; 2]) -> Self {
        MetricCi {
            value,
            ci: [ci[0].min(value), ci[1].max(value)],
        }
    }
}

/// Metrics over the images that lack a contra-lateral partner (scored with a
/// zero symmetry patch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub images: usize,
    pub candidates: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub cpm_image: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub candidates: usize,
    pub positives: usize,
    pub auc: MetricCi,
    pub cpm_image: MetricCi,
    pub cpm_exam: MetricCi,
    pub missing_contralateral: SubsetMetrics,
}

/// One-sided paired p-values for `candidate` improving on `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub candidate: String,
    pub p_auc: f64,
    pub p_cpm_image: f64,
    pub p_cpm_exam: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub provenance: Option<Provenance>,
    pub split: String,
    pub bootstrap_n: usize,
    pub ci_level: f64,
    pub seed: u64,
    pub models: Vec<ModelMetrics>,
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = serde_json::from_str(text)?;
        if v.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                artifact: "evaluation report".into(),
                found: v.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.model == name)
    }
}

fn cpm_of(blocks: &[&ExamBlock], unit: FrocUnit) -> Result<f64> {
    Ok(cpm(&froc_blocks(blocks, unit)?))
}

fn subset_metrics(set: &EvalSet) -> SubsetMetrics {
    let sub = set.missing_contralateral();
    let view = sub.view();
    let cands = view.iter().flat_map(|b| &b.candidates);
    SubsetMetrics {
        images: view.iter().map(|b| b.image_ids.len()).sum(),
        candidates: cands.clone().count(),
        positives: cands.filter(|c| c.positive).count(),
        auc: auc_blocks(&view).ok(),
        cpm_image: cpm_of(&view, FrocUnit::Image).ok(),
    }
}

/// Point estimates and exam-level bootstrap intervals for one model.
pub fn evaluate(model: &str, set: &EvalSet, cfg: &BootstrapConfig) -> Result<ModelMetrics> {
    let view = set.view();
    let with_ci = |f: &(dyn Fn(&[&ExamBlock]) -> Result<f64> + Sync)| -> Result<MetricCi> {
        Ok(MetricCi::new(f(&view)?, bootstrap_ci(&set.blocks, f, cfg)?))
    };
    let cands = view.iter().flat_map(|b| &b.candidates);
    Ok(ModelMetrics {
        model: model.to_string(),
        candidates: cands.clone().count(),
        positives: cands.filter(|c| c.positive).count(),
        auc: with_ci(&auc_blocks)?,
        cpm_image: with_ci(&|v| cpm_of(v, FrocUnit::Image))?,
        cpm_exam: with_ci(&|v| cpm_of(v, FrocUnit::Exam))?,
        missing_contralateral: subset_metrics(set),
    })
}

/// Evaluates every model; each model after the first is compared with the
/// first (the reference) by paired bootstrap.
pub fn evaluate_models(
    models: &[(String, EvalSet)],
    split: &str,
    cfg: &BootstrapConfig,
    provenance: Option<Provenance>,
) -> Result<EvalReport> {
    let metrics = models
        .iter()
        .map(|(name, set)| evaluate(name, set, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut comparisons = Vec::new();
    if let Some((ref_name, ref_set)) = models.first() {
        for (name, set) in &models[1..] {
            ref_set.check_paired(set)?;
            let p = |f: &(dyn Fn(&[&ExamBlock]) -> Result<f64> + Sync)| {
                bootstrap_pvalue(&ref_set.blocks, &set.blocks, f, cfg)
            };
            comparisons.push(Comparison {
                reference: ref_name.clone(),
                candidate: name.clone(),
                p_auc: p(&auc_blocks)?,
                p_cpm_image: p(&|v| cpm_of(v, FrocUnit::Image))?,
                p_cpm_exam: p(&|v| cpm_of(v, FrocUnit::Exam))?,
            });
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        provenance,
        split: split.to_string(),
        bootstrap_n: cfg.n_resamples,
        ci_level: cfg.level,
        seed: cfg.seed,
        models: metrics,
        comparisons,
    })
}

/// A candidate row with the network's score appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub exam_id: String,
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub label: crate::candidates::CandidateLabel,
    pub lesion_id: Option<u32>,
    pub has_contralateral: bool,
    pub model_score: f64,
}

impl ScoredRow {
    pub fn to_scored(&self) -> ScoredCandidate {
        ScoredCandidate {
            score: self.model_score,
            positive: self.lesion_id.is_some(),
            lesion_id: self.lesion_id,
            image_id: self.image_id.clone(),
            exam_id: self.exam_id.clone(),
            has_contralateral: self.has_contralateral,
        }
    }
}

fn write_with_comment<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>, comment: &str) -> Result<()> {
    let mut buf = Vec::new();
    for line in comment.lines() {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)
                .map_err(|e| Error::format(format!("CSV {}", path.display()), e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_scored_csv(path: &Path, rows: &[ScoredRow], comment: &str) -> Result<()> {
    write_with_comment(path, rows, comment)
}

pub fn read_scored_csv(path: &Path) -> Result<Vec<ScoredRow>> {
    let bad = |e: csv::Error| Error::format(format!("scored candidate CSV {}", path.display()), e.to_string());
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(bad)?
        .deserialize()
        .map(|r| r.map_err(bad))
        .collect()
}

#[derive(Serialize)]
struct CurveRow {
    threshold: f64,
    x: f64,
    y: f64,
}

/// `threshold,x,y` rows for plotting; `points` are (threshold, x, y).
pub fn write_curve_csv(path: &Path, points: &[(f64, f64, f64)], comment: &str) -> Result<()> {
    write_with_comment(
        path,
        points.iter().map(|&(threshold, x, y)| CurveRow { threshold, x, y }),
        comment,
    )
}

impl FrocCurve {
    pub fn csv_points(&self) -> Vec<(f64, f64, f64)> {
        self.points
            .iter()
            .map(|p| (p.threshold, p.fp_per_unit, p.sensitivity))
            .collect()
    }
}
