//! Candidate-, image- and exam-level evaluation: exact ROC AUC, FROC and CPM,
//! exam-level bootstrap intervals and paired bootstrap p-values.
//!
//! Scored candidates are grouped into per-exam blocks with local integer ids
//! so a bootstrap resample is just a list of block references.

mod bootstrap;
mod froc;
mod report;
mod roc;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{DatasetManifest, Split};

pub use bootstrap::{bootstrap_ci, bootstrap_pvalue, percentile, BootstrapConfig};
pub use froc::{cpm, froc, froc_blocks, FrocCurve, FrocPoint, FrocUnit, CPM_OPERATING_POINTS};
pub use report::{
    evaluate, evaluate_models, read_scored_csv, write_curve_csv, write_scored_csv, Comparison,
    EvalReport, MetricCi, ModelMetrics, ScoredRow, SubsetMetrics, REPORT_SCHEMA_VERSION,
};
pub use roc::{auc_blocks, auc_from_scores, roc_auc, roc_curve, RocPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub score: f64,
    pub positive: bool,
    /// Lesion hit by the candidate; present exactly for positives.
    pub lesion_id: Option<u32>,
    pub image_id: String,
    pub exam_id: String,
    pub has_contralateral: bool,
}

impl ScoredCandidate {
    pub fn new(score: f64, lesion_id: Option<u32>, image_id: &str, exam_id: &str) -> Self {
        ScoredCandidate {
            score,
            positive: lesion_id.is_some(),
            lesion_id,
            image_id: image_id.to_string(),
            exam_id: exam_id.to_string(),
            has_contralateral: true,
        }
    }
}

/// Ground truth for one image; every evaluated image must be listed, with
/// or without lesions, so FP rates count all units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub exam_id: String,
    pub image_id: String,
    pub lesion_ids: Vec<u32>,
    pub has_contralateral: bool,
}

/// Ground truth for every image of the exams in `split`.
pub fn truth_from_manifest(manifest: &DatasetManifest, split: Split) -> Vec<ImageTruth> {
    let mut out = Vec::new();
    for exam in manifest.exams_in(split) {
        for img in &exam.images {
            out.push(ImageTruth {
                exam_id: exam.exam_id.clone(),
                image_id: img.image_id.clone(),
                lesion_ids: img.lesions.iter().map(|l| l.lesion_id).collect(),
                has_contralateral: exam
                    .images
                    .iter()
                    .any(|o| o.view == img.view && o.laterality != img.laterality),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCandidate {
    pub score: f64,
    pub positive: bool,
    pub image: u32,
    pub image_lesion: Option<u32>,
    pub exam_lesion: Option<u32>,
    pub has_contralateral: bool,
}

/// One exam with block-local image and lesion indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamBlock {
    pub exam_id: String,
    pub image_ids: Vec<String>,
    /// Per local image: whether the contra-lateral image exists.
    pub image_has_contralateral: Vec<bool>,
    /// Per image-level lesion: (local image, local exam-level lesion).
    pub image_lesions: Vec<(u32, u32)>,
    pub exam_lesions: usize,
    pub candidates: Vec<BlockCandidate>,
}

/// Candidates and truth grouped by exam, in first-seen truth order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub blocks: Vec<ExamBlock>,
}

impl EvalSet {
    pub fn build(cands: &[ScoredCandidate], truth: &[ImageTruth]) -> Result<EvalSet> {
        let mut blocks: Vec<ExamBlock> = Vec::new();
        let mut exam_index: HashMap<&str, usize> = HashMap::new();
        let mut image_index: HashMap<(&str, &str), u32> = HashMap::new();
        let mut image_lesion: HashMap<(&str, &str, u32), (u32, u32)> = HashMap::new();
        let mut exam_lesion: Vec<HashMap<u32, u32>> = Vec::new();
        for t in truth {
            let b = *exam_index.entry(&t.exam_id).or_insert_with(|| {
                blocks.push(ExamBlock {
                    exam_id: t.exam_id.clone(),
                    image_ids: Vec::new(),
                    image_has_contralateral: Vec::new(),
                    image_lesions: Vec::new(),
                    exam_lesions: 0,
                    candidates: Vec::new(),
                });
                exam_lesion.push(HashMap::new());
                blocks.len() - 1
            });
            let block = &mut blocks[b];
            let local = block.image_ids.len() as u32;
            if image_index.insert((&t.exam_id, &t.image_id), local).is_some() {
                return Err(Error::format("ground truth", format!("image {} listed twice", t.image_id)));
            }
            block.image_ids.push(t.image_id.clone());
            block.image_has_contralateral.push(t.has_contralateral);
            for &l in &t.lesion_ids {
                let next = exam_lesion[b].len() as u32;
                let el = *exam_lesion[b].entry(l).or_insert(next);
                block.exam_lesions = exam_lesion[b].len();
                let il = block.image_lesions.len() as u32;
                block.image_lesions.push((local, el));
                image_lesion.insert((&t.exam_id, &t.image_id, l), (il, el));
            }
        }

        for c in cands {
            if !c.score.is_finite() {
                return Err(Error::format("scored candidates", format!("non-finite score in {}", c.image_id)));
            }
            if c.positive != c.lesion_id.is_some() {
                return Err(Error::format(
                    "scored candidates",
                    format!("candidate in {} is positive without a lesion id (or the reverse)", c.image_id),
                ));
            }
            let &b = exam_index.get(c.exam_id.as_str()).ok_or_else(|| {
                Error::format("scored candidates", format!("exam {} has no ground truth", c.exam_id))
            })?;
            let &img = image_index.get(&(c.exam_id.as_str(), c.image_id.as_str())).ok_or_else(|| {
                Error::format("scored candidates", format!("image {} has no ground truth", c.image_id))
            })?;
            let lesion = match c.lesion_id {
                Some(l) => Some(
                    image_lesion
                        .get(&(c.exam_id.as_str(), c.image_id.as_str(), l))
                        .copied()
                        .ok_or_else(|| {
                            Error::format("scored candidates", format!("lesion {l} is not in image {}", c.image_id))
                        })?,
                ),
                None => None,
            };
            blocks[b].candidates.push(BlockCandidate {
                score: c.score,
                positive: c.positive,
                image: img,
                image_lesion: lesion.map(|l| l.0),
                exam_lesion: lesion.map(|l| l.1),
                has_contralateral: c.has_contralateral,
            });
        }
        Ok(EvalSet { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn view(&self) -> Vec<&ExamBlock> {
        self.blocks.iter().collect()
    }

    /// Blocks restricted to images lacking a contra-lateral partner, with
    /// only their candidates and lesions.
    pub fn missing_contralateral(&self) -> EvalSet {
        let blocks = self
            .blocks
            .iter()
            .filter_map(|b| {
                let mut image_map = vec![None; b.image_ids.len()];
                let mut image_ids = Vec::new();
                for (i, &has) in b.image_has_contralateral.iter().enumerate() {
                    if !has {
                        image_map[i] = Some(image_ids.len() as u32);
                        image_ids.push(b.image_ids[i].clone());
                    }
                }
                if image_ids.is_empty() {
                    return None;
                }
                let mut lesion_map = vec![None; b.image_lesions.len()];
                let mut exam_map: HashMap<u32, u32> = HashMap::new();
                let mut image_lesions = Vec::new();
                for (l, &(img, el)) in b.image_lesions.iter().enumerate() {
                    if let Some(ni) = image_map[img as usize] {
                        let next = exam_map.len() as u32;
                        let nel = *exam_map.entry(el).or_insert(next);
                        lesion_map[l] = Some(image_lesions.len() as u32);
                        image_lesions.push((ni, nel));
                    }
                }
                let candidates = b
                    .candidates
                    .iter()
                    .filter_map(|c| {
                        let ni = image_map[c.image as usize]?;
                        Some(BlockCandidate {
                            image: ni,
                            image_lesion: c.image_lesion.and_then(|l| lesion_map[l as usize]),
                            exam_lesion: c.exam_lesion.and_then(|e| exam_map.get(&e).copied()),
                            ..*c
                        })
                    })
                    .collect();
                Some(ExamBlock {
                    exam_id: b.exam_id.clone(),
                    image_has_contralateral: vec![false; image_ids.len()],
                    image_ids,
                    exam_lesions: exam_map.len(),
                    image_lesions,
                    candidates,
                })
            })
            .collect();
        EvalSet { blocks }
    }

    /// Errors unless `other` holds the same candidates in the same order.
    pub fn check_paired(&self, other: &EvalSet) -> Result<()> {
        let same = self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.exam_id == b.exam_id
                    && a.image_ids == b.image_ids
                    && a.candidates.len() == b.candidates.len()
                    && a.candidates.iter().zip(&b.candidates).all(|(x, y)| {
                        x.positive == y.positive && x.image == y.image && x.image_lesion == y.image_lesion
                    })
            });
        if same {
            Ok(())
        } else {
            Err(Error::InsufficientData(
                "paired comparison needs both models to score the same candidates".into(),
            ))
        }
    }
}
