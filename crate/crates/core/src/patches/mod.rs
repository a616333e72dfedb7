//! Primary / contra-lateral patch pairs.
//!
//! The contra-lateral image is mirrored into the primary image's frame and a
//! window is cut at the same pixel position in both. Training negatives are
//! thinned by distance rules and patches are augmented on the fly.

mod archive;
mod augment;

pub use archive::{read_archive, write_archive, ArchiveIndex, IndexEntry, PATCH_SCHEMA_VERSION};
pub use augment::{augment, transform_pair, AugmentConfig, GeometricOp};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{Candidate, CandidateLabel};
use crate::error::{Error, Result};
use crate::phantom::{BreastImage, Lesion};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Negative,
    Positive,
}

impl PatchLabel {
    pub fn is_positive(self) -> bool {
        self == PatchLabel::Positive
    }

    pub fn class_index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchProvenance {
    pub exam_id: String,
    pub image_id: String,
    pub center_rc: [usize; 2],
    /// First-stage likelihood of the candidate.
    pub candidate_score: f64,
    pub lesion_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub primary: Raster,
    /// All zeros when the contra-lateral image is missing.
    pub contralateral: Raster,
    pub label: PatchLabel,
    pub has_contralateral: bool,
    pub provenance: PatchProvenance,
}

impl PatchPair {
    pub fn size(&self) -> usize {
        self.primary.height()
    }

    /// Both members resampled to `size`×`size`. A missing contra-lateral
    /// patch stays exactly zero.
    pub fn resized(&self, size: usize) -> PatchPair {
        PatchPair {
            primary: self.primary.resize_square(size),
            contralateral: if self.has_contralateral {
                self.contralateral.resize_square(size)
            } else {
                Raster::zeros(size, size)
            },
            ..self.clone()
        }
    }
}

/// The image mirrored about its vertical axis, lesion ground truth included.
pub fn mirror_contralateral(image: &BreastImage) -> BreastImage {
    let w = image.width();
    BreastImage {
        pixels: image.pixels.flip_horizontal(),
        lesions: image.lesions.iter().map(|l| l.mirrored(w)).collect(),
        ..image.clone()
    }
}

/// `size_px` square window centred on `center_rc`, zero outside the image.
pub fn extract_patch(image: &Raster, center_rc: [usize; 2], size_px: usize) -> Raster {
    image.window(center_rc[0], center_rc[1], size_px)
}

/// Primary patch plus the patch at the same position in the mirrored
/// contra-lateral image (zeros if there is none).
pub fn extract_pair(
    primary: &BreastImage,
    contralateral: Option<&BreastImage>,
    candidate: &Candidate,
    size_px: usize,
) -> Result<PatchPair> {
    let [r, c] = candidate.center_rc;
    if r >= primary.height() || c >= primary.width() {
        return Err(Error::Shape(format!(
            "candidate centre {:?} outside {}x{} image {}",
            candidate.center_rc,
            primary.height(),
            primary.width(),
            primary.image_id
        )));
    }
    let label = match candidate.label {
        CandidateLabel::Positive => PatchLabel::Positive,
        CandidateLabel::Negative => PatchLabel::Negative,
        CandidateLabel::Unknown => {
            return Err(Error::InsufficientData(format!(
                "candidate at {:?} in {} is unlabeled",
                candidate.center_rc, primary.image_id
            )))
        }
    };
    let contra = match contralateral {
        Some(img) => {
            if img.pixels.shape() != primary.pixels.shape() {
                return Err(Error::Shape(format!(
                    "contra-lateral image {} is {:?}, primary {} is {:?}",
                    img.image_id,
                    img.pixels.shape(),
                    primary.image_id,
                    primary.pixels.shape()
                )));
            }
            Some(img.pixels.flip_horizontal())
        }
        None => None,
    };
    Ok(PatchPair {
        primary: extract_patch(&primary.pixels, candidate.center_rc, size_px),
        contralateral: contra
            .as_ref()
            .map(|m| extract_patch(m, candidate.center_rc, size_px))
            .unwrap_or_else(|| Raster::zeros(size_px, size_px)),
        label,
        has_contralateral: contra.is_some(),
        provenance: PatchProvenance {
            exam_id: candidate.exam_id.clone(),
            image_id: primary.image_id.clone(),
            center_rc: candidate.center_rc,
            candidate_score: candidate.score,
            lesion_id: candidate.lesion_id,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeSampling {
    pub min_lesion_dist_cm: f64,
    pub min_inter_dist_cm: f64,
}

impl Default for NegativeSampling {
    fn default() -> Self {
        NegativeSampling {
            min_lesion_dist_cm: 2.0,
            min_inter_dist_cm: 1.4,
        }
    }
}

fn dist_px(a: [usize; 2], b: [usize; 2]) -> f64 {
    let dr = a[0] as f64 - b[0] as f64;
    let dc = a[1] as f64 - b[1] as f64;
    dr.hypot(dc)
}

/// Greedy thinning of the negative candidates of one image: in descending
/// score order (random order among equal scores) keep a candidate when it is
/// far enough from every lesion centre and from every negative kept so far.
pub fn sample_negatives<R: Rng + ?Sized>(
    cands: &[Candidate],
    lesions: &[Lesion],
    spacing_cm: f64,
    rules: NegativeSampling,
    rng: &mut R,
) -> Vec<Candidate> {
    let mut pool: Vec<&Candidate> = cands
        .iter()
        .filter(|c| c.label == CandidateLabel::Negative)
        .filter(|c| {
            lesions
                .iter()
                .all(|l| dist_px(c.center_rc, l.center_rc) * spacing_cm >= rules.min_lesion_dist_cm)
        })
        .collect();
    pool.shuffle(rng);
    // stable: equal scores keep the shuffled order
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in pool {
        if kept
            .iter()
            .all(|k| dist_px(c.center_rc, k.center_rc) * spacing_cm >= rules.min_inter_dist_cm)
        {
            kept.push(c.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Laterality, LesionShape, View};
    use crate::rng;

    fn image(id: &str, pixels: Raster, lesions: Vec<Lesion>) -> BreastImage {
        BreastImage {
            image_id: id.into(),
            pixels,
            laterality: Laterality::Right,
            view: View::Mlo,
            pixel_spacing_cm: 0.02,
            lesions,
        }
    }

    fn cand(r: usize, c: usize, score: f64, label: CandidateLabel) -> Candidate {
        Candidate {
            center_rc: [r, c],
            score,
            label,
            lesion_id: None,
            image_id: "i".into(),
            exam_id: "e".into(),
        }
    }

    fn lesion_at(r: usize, c: usize) -> Lesion {
        Lesion {
            lesion_id: 0,
            center_rc: [r, c],
            radius_px: 10.0,
            shape: LesionShape::Oval,
            contrast: 0.3,
            aspect: 1.0,
            orientation: 0.0,
            harmonics: vec![],
        }
    }

    #[test]
    fn mirror_twice_is_identity_and_maps_coordinates() {
        let px = Raster::from_fn(8, 11, |r, c| (r * 11 + c) as f32);
        let img = image("a", px, vec![lesion_at(3, 2)]);
        let m = mirror_contralateral(&img);
        assert_eq!(m.pixels.get(5, 10 - 4), img.pixels.get(5, 4));
        assert_eq!(m.lesions[0].center_rc, [3, 8]);
        assert_eq!(mirror_contralateral(&m), img);
    }

    #[test]
    fn corner_patch_is_three_quarters_zero() {
        let px = Raster::filled(400, 400, 0.5);
        let p = extract_patch(&px, [0, 0], 300);
        assert_eq!(p.shape(), (300, 300));
        let zeros = p.data().iter().filter(|&&v| v == 0.0).count() as f64 / 90000.0;
        assert!((zeros - 0.75).abs() < 0.01, "{zeros}");
        let interior = extract_patch(&Raster::filled(800, 800, 0.5), [400, 400], 300);
        assert!(interior.data().iter().all(|&v| v == 0.5));
        // 300 px at 0.02 cm/px spans 6 cm
        assert!((300.0 * 0.02 - 6.0f64).abs() < 1e-12);
    }

    #[test]
    fn contralateral_patch_comes_from_the_mirrored_position() {
        let left = image("L", Raster::from_fn(50, 40, |r, c| (r * 40 + c) as f32), vec![]);
        let right = image("R", Raster::zeros(50, 40), vec![]);
        let pair = extract_pair(&right, Some(&left), &cand(20, 10, 0.5, CandidateLabel::Negative), 5).unwrap();
        // window centre (index 2,2) equals left pixel (20, 40-1-10)
        assert_eq!(pair.contralateral.get(2, 2), left.pixels.get(20, 29));
        assert!(pair.has_contralateral);
    }

    #[test]
    fn missing_contralateral_is_zero_and_shapes_must_match() {
        let right = image("R", Raster::filled(50, 40, 0.3), vec![]);
        let pair = extract_pair(&right, None, &cand(20, 10, 0.5, CandidateLabel::Positive), 9).unwrap();
        assert!(pair.contralateral.is_all_zero());
        assert!(!pair.has_contralateral);
        assert!(pair.resized(4).contralateral.is_all_zero());
        let other = image("L", Raster::filled(50, 41, 0.3), vec![]);
        assert!(matches!(
            extract_pair(&right, Some(&other), &cand(20, 10, 0.5, CandidateLabel::Positive), 9),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn negatives_respect_distance_rules() {
        let spacing = 0.02;
        // 1.0 cm apart: only one of the two survives
        let two = [cand(100, 100, 0.5, CandidateLabel::Negative), cand(100, 150, 0.4, CandidateLabel::Negative)];
        let kept = sample_negatives(&two, &[], spacing, NegativeSampling::default(), &mut rng::stream(0, &[]));
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.5);
        // 1.5 cm from a lesion centre: removed
        let near = [cand(100, 175, 0.5, CandidateLabel::Negative)];
        let kept = sample_negatives(&near, &[lesion_at(100, 100)], spacing, NegativeSampling::default(), &mut rng::stream(0, &[]));
        assert!(kept.is_empty());
        // positives are never returned
        let pos = [cand(10, 10, 0.9, CandidateLabel::Positive)];
        assert!(sample_negatives(&pos, &[], spacing, NegativeSampling::default(), &mut rng::stream(0, &[])).is_empty());
    }

    /// All maximal subsets satisfying the pairwise rule, by enumeration.
    fn maximal_feasible(points: &[[usize; 2]], min_px: f64) -> Vec<u32> {
        let n = points.len();
        let feasible = |mask: u32| {
            (0..n).all(|i| {
                (i + 1..n).all(|j| mask & (1 << i) == 0 || mask & (1 << j) == 0 || dist_px(points[i], points[j]) >= min_px)
            })
        };
        let all: Vec<u32> = (0..1u32 << n).filter(|&m| feasible(m)).collect();
        all.iter()
            .copied()
            .filter(|&m| !(0..n).any(|i| m & (1 << i) == 0 && feasible(m | (1 << i))))
            .collect()
    }

    #[test]
    fn greedy_on_a_line_is_a_maximal_feasible_subset() {
        for (step_px, expect) in [(75usize, None), (50, Some(0b10101u32))] {
            let line: Vec<Candidate> = (0..5).map(|i| cand(100, 100 + i * step_px, 0.5, CandidateLabel::Negative)).collect();
            let points: Vec<[usize; 2]> = line.iter().map(|c| c.center_rc).collect();
            let oracle = maximal_feasible(&points, 1.4 / 0.02);
            for seed in 0..50 {
                let kept = sample_negatives(&line, &[], 0.02, NegativeSampling::default(), &mut rng::stream(seed, &[]));
                let mask = kept
                    .iter()
                    .map(|k| 1u32 << points.iter().position(|p| *p == k.center_rc).unwrap())
                    .sum::<u32>();
                assert!(oracle.contains(&mask), "step {step_px}: {mask:05b} not maximal");
                if expect.is_none() {
                    // 1.5 cm spacing clears the 1.4 cm rule: everything survives
                    assert_eq!(mask, 0b11111);
                }
            }
            // scanning the line in order (distinct descending scores) keeps 1, 3, 5
            if let Some(e) = expect {
                let ordered: Vec<Candidate> = (0..5).map(|i| cand(100, 100 + i * step_px, 1.0 - i as f64 * 0.1, CandidateLabel::Negative)).collect();
                let kept = sample_negatives(&ordered, &[], 0.02, NegativeSampling::default(), &mut rng::stream(0, &[]));
                let mask = kept.iter().map(|k| 1u32 << points.iter().position(|p| *p == k.center_rc).unwrap()).sum::<u32>();
                assert_eq!(mask, e);
            }
        }
    }
}
