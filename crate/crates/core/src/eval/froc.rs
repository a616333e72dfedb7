use serde::{Deserialize, Serialize};

use super::{EvalSet, ExamBlock, ImageTruth, ScoredCandidate};
use crate::error::{Error, Result};

/// False-positive rates at which sensitivities are averaged.
pub const CPM_OPERATING_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrocUnit {
    Image,
    Exam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_unit: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub unit: FrocUnit,
    pub n_units: usize,
    pub n_lesions: usize,
    pub points: Vec<FrocPoint>,
}

/// FROC from raw candidates and per-image truth.
pub fn froc(cands: &[ScoredCandidate], truth: &[ImageTruth], unit: FrocUnit) -> Result<FrocCurve> {
    let set = EvalSet::build(cands, truth)?;
    froc_blocks(&set.view(), unit)
}

/// Sweeps "score ≥ t" over the distinct candidate scores, highest first.
/// A lesion counts as found at `t` when a positive candidate hitting it
/// scores at least `t`; every negative at or above `t` is a false positive.
pub fn froc_blocks(blocks: &[&ExamBlock], unit: FrocUnit) -> Result<FrocCurve> {
    let n_units: usize = match unit {
        FrocUnit::Image => blocks.iter().map(|b| b.image_ids.len()).sum(),
        FrocUnit::Exam => blocks.len(),
    };
    let mut lesion_best: Vec<f64> = Vec::new();
    let mut negatives: Vec<f64> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    for b in blocks {
        let base = lesion_best.len();
        let n = match unit {
            FrocUnit::Image => b.image_lesions.len(),
            FrocUnit::Exam => b.exam_lesions,
        };
        lesion_best.resize(base + n, f64::NEG_INFINITY);
        for c in &b.candidates {
            scores.push(c.score);
            let hit = match unit {
                FrocUnit::Image => c.image_lesion,
                FrocUnit::Exam => c.exam_lesion,
            };
            match hit {
                Some(l) if c.positive => {
                    let slot = &mut lesion_best[base + l as usize];
                    *slot = slot.max(c.score);
                }
                _ => negatives.push(c.score),
            }
        }
    }
    let n_lesions = lesion_best.len();
    if n_lesions == 0 {
        return Err(Error::InsufficientData("FROC needs at least one lesion".into()));
    }
    if n_units == 0 {
        return Err(Error::InsufficientData("FROC needs at least one unit".into()));
    }
    let desc = |v: &mut Vec<f64>| v.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    desc(&mut lesion_best);
    desc(&mut negatives);
    desc(&mut scores);
    scores.dedup();

    let (mut li, mut ni) = (0, 0);
    let points = scores
        .into_iter()
        .map(|t| {
            while li < lesion_best.len() && lesion_best[li] >= t {
                li += 1;
            }
            while ni < negatives.len() && negatives[ni] >= t {
                ni += 1;
            }
            FrocPoint {
                threshold: t,
                fp_per_unit: ni as f64 / n_units as f64,
                sensitivity: li as f64 / n_lesions as f64,
            }
        })
        .collect();
    Ok(FrocCurve {
        unit,
        n_units,
        n_lesions,
        points,
    })
}

/// Mean sensitivity over [`CPM_OPERATING_POINTS`]. Each is read from the
/// rightmost curve point whose FP rate does not exceed it, or 0 if none.
pub fn cpm(curve: &FrocCurve) -> f64 {
    let total: f64 = CPM_OPERATING_POINTS
        .iter()
        .map(|&f| {
            curve
                .points
                .iter()
                .rev()
                .find(|p| p.fp_per_unit <= f)
                .map_or(0.0, |p| p.sensitivity)
        })
        .sum();
    total / CPM_OPERATING_POINTS.len() as f64
}
