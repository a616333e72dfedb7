//! First-stage suspicious mass detection.
//!
//! A per-pixel likelihood combines gradient convergence (how many rays of an
//! annulus around the pixel carry a gradient pointing back at it, and how
//! evenly those rays are spread over angle) with an oriented second-derivative
//! response that is high for bright compact structures. Candidates are local
//! maxima of thresholded connected regions.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{BreastImage, Lesion};
use crate::raster::{Boundary, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    pub values: Raster,
    pub source_image_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateLabel {
    Positive,
    Negative,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub center_rc: [usize; 2],
    pub score: f64,
    pub label: CandidateLabel,
    /// Lesion whose support contains the centre, once labeled.
    pub lesion_id: Option<u32>,
    pub image_id: String,
    pub exam_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParams {
    pub radius_range_px: [f64; 2],
    pub n_directions: usize,
    pub n_radii: usize,
    pub angle_tolerance_deg: f64,
    /// Minimum gradient magnitude (intensity per pixel) for a sample to vote.
    pub gradient_min: f64,
    pub smoothing_sigma_px: f64,
    /// Weight of the second-derivative response; the rest goes to convergence.
    pub curvature_weight: f64,
}

impl Default for LikelihoodParams {
    fn default() -> Self {
        LikelihoodParams {
            radius_range_px: [15.0, 45.0],
            n_directions: 32,
            n_radii: 6,
            angle_tolerance_deg: 30.0,
            gradient_min: 0.004,
            smoothing_sigma_px: 2.0,
            curvature_weight: 0.25,
        }
    }
}

impl LikelihoodParams {
    /// Parameters scaled to a mass radius range given in centimetres.
    pub fn for_radius_range(radius_range_cm: [f64; 2], pixel_spacing_cm: f64) -> Self {
        let rmin = radius_range_cm[0] / pixel_spacing_cm;
        let rmax = radius_range_cm[1] / pixel_spacing_cm;
        LikelihoodParams {
            radius_range_px: [0.6 * rmin, 1.2 * rmax],
            smoothing_sigma_px: (0.1 * rmin).max(1.0),
            ..LikelihoodParams::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius_range_px;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("radius_range_px", format!("{:?} must be positive and ordered", self.radius_range_px)));
        }
        if self.n_directions < 8 || self.n_directions % 8 != 0 {
            return Err(Error::config("n_directions", "must be a positive multiple of 8"));
        }
        if self.n_radii == 0 {
            return Err(Error::config("n_radii", "must be positive"));
        }
        Ok(())
    }
}

/// Sampling pattern of the convergence annulus. Built so that the pattern is
/// closed under column mirroring: direction `k` maps to `n/2 - 1 - k`.
struct Annulus {
    /// Per direction: integer sample offsets (drow, dcol), inner to outer.
    offsets: Vec<Vec<(isize, isize)>>,
    /// Per direction: unit vector from the samples back towards the centre.
    inward: Vec<(f32, f32)>,
}

impl Annulus {
    fn new(params: &LikelihoodParams) -> Self {
        let k = params.n_directions;
        let [rmin, rmax] = params.radius_range_px;
        let radii: Vec<f64> = (0..params.n_radii)
            .map(|j| {
                if params.n_radii == 1 {
                    0.5 * (rmin + rmax)
                } else {
                    rmin + (rmax - rmin) * j as f64 / (params.n_radii - 1) as f64
                }
            })
            .collect();
        let mut offsets = vec![Vec::new(); k];
        let mut inward = vec![(0.0f32, 0.0f32); k];
        for i in 0..k {
            let mirror = (k / 2 + k - 1 - i) % k;
            if mirror < i {
                continue;
            }
            let theta = (i as f64 + 0.5) * std::f64::consts::TAU / k as f64;
            let (s, c) = theta.sin_cos();
            offsets[i] = radii
                .iter()
                .map(|r| ((r * s).round() as isize, (r * c).round() as isize))
                .collect();
            inward[i] = (-s as f32, -c as f32);
            offsets[mirror] = offsets[i].iter().map(|&(dr, dc)| (dr, -dc)).collect();
            inward[mirror] = (inward[i].0, -inward[i].1);
        }
        Annulus { offsets, inward }
    }
}

/// Per-pixel mass likelihood in [0, 1], rescaled by its own maximum.
pub fn mass_likelihood(image: &BreastImage, params: &LikelihoodParams) -> Result<LikelihoodMap> {
    Ok(LikelihoodMap {
        values: likelihood_raster(&image.pixels, params)?,
        source_image_id: image.image_id.clone(),
    })
}

pub fn likelihood_raster(pixels: &Raster, params: &LikelihoodParams) -> Result<Raster> {
    params.validate()?;
    if !pixels.all_finite() {
        return Err(Error::format("image", "non-finite pixel values"));
    }
    let (h, w) = pixels.shape();
    let smooth = pixels.gaussian_blur_with(params.smoothing_sigma_px, Boundary::Replicate);

    // unit gradients of the voting pixels, zero elsewhere
    let mut unit = vec![(0.0f32, 0.0f32); h * w];
    let gmin = params.gradient_min as f32;
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let gr = 0.5 * (smooth.get(r + 1, c) - smooth.get(r - 1, c));
            let gc = 0.5 * (smooth.get(r, c + 1) - smooth.get(r, c - 1));
            let norm = (gr * gr + gc * gc).sqrt();
            if norm >= gmin && norm > 0.0 {
                unit[r * w + c] = (gr / norm, gc / norm);
            }
        }
    }

    let annulus = Annulus::new(params);
    let cos_tol = params.angle_tolerance_deg.to_radians().cos() as f32;
    let k = params.n_directions;
    let per_sector = k / 8;
    let mut convergence = Raster::zeros(h, w);
    let mut hits = vec![false; k];
    for r in 0..h {
        for c in 0..w {
            if pixels.get(r, c) <= 0.0 {
                continue;
            }
            let mut n_hit = 0usize;
            for (d, hit) in hits.iter_mut().enumerate() {
                let (ur, uc) = annulus.inward[d];
                *hit = annulus.offsets[d].iter().any(|&(dr, dc)| {
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                        return false;
                    }
                    let (gr, gc) = unit[rr as usize * w + cc as usize];
                    (gr != 0.0 || gc != 0.0) && gr * ur + gc * uc >= cos_tol
                });
                n_hit += *hit as usize;
            }
            if n_hit == 0 {
                continue;
            }
            let active = hits
                .chunks(per_sector)
                .filter(|s| 2 * s.iter().filter(|&&x| x).count() >= per_sector)
                .count();
            convergence.set(r, c, (n_hit as f32 / k as f32) * (active as f32 / 8.0));
        }
    }

    let curvature = blob_response(pixels, 0.5 * (params.radius_range_px[0] + params.radius_range_px[1]) / 2.0);
    let cmax = curvature.max();
    let cw = params.curvature_weight as f32;
    let mut out = Raster::zeros(h, w);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        if pixels.data()[i] <= 0.0 {
            continue;
        }
        let curv = if cmax > 0.0 { curvature.data()[i] / cmax } else { 0.0 };
        *o = (1.0 - cw) * convergence.data()[i] + cw * curv;
    }
    let max = out.max();
    if max > 0.0 {
        for v in out.data_mut() {
            *v /= max;
        }
    }
    Ok(out)
}

/// Response of four oriented second-derivative filters (0, 45, 90, 135
/// degrees): positive where intensity is concave along every orientation.
fn blob_response(pixels: &Raster, sigma: f64) -> Raster {
    let s = pixels.gaussian_blur_with(sigma, Boundary::Replicate);
    let (h, w) = s.shape();
    let mut out = Raster::zeros(h, w);
    // scale-normalised so the response does not shrink with sigma
    let norm = (sigma * sigma) as f32;
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let x = s.get(r, c);
            let icc = (s.get(r, c - 1) + s.get(r, c + 1)) - 2.0 * x;
            let irr = (s.get(r - 1, c) + s.get(r + 1, c)) - 2.0 * x;
            let irc = 0.25 * ((s.get(r + 1, c + 1) - s.get(r + 1, c - 1)) - (s.get(r - 1, c + 1) - s.get(r - 1, c - 1)));
            let mean = 0.5 * (irr + icc);
            let d45 = mean + irc;
            let d135 = mean - irc;
            let largest = icc.max(irr).max(d45.max(d135));
            out.set(r, c, (-largest).max(0.0) * norm);
        }
    }
    out
}

/// Connected regions of `{v >= threshold, v > 0}` (8-connectivity), one
/// candidate at each region's maximum, maxima closer than
/// `min_separation_px` merged in favour of the higher score. Sorted by
/// descending score.
pub fn threshold_candidates(map: &LikelihoodMap, threshold: f64, min_separation_px: f64) -> Vec<Candidate> {
    let peaks = threshold_peaks(&map.values, threshold, min_separation_px);
    peaks
        .into_iter()
        .map(|(center_rc, score)| Candidate {
            center_rc,
            score,
            label: CandidateLabel::Unknown,
            lesion_id: None,
            image_id: map.source_image_id.clone(),
            exam_id: String::new(),
        })
        .collect()
}

fn threshold_peaks(values: &Raster, threshold: f64, min_separation_px: f64) -> Vec<([usize; 2], f64)> {
    let (h, w) = values.shape();
    let t = threshold as f32;
    let inside = |i: usize| {
        let v = values.data()[i];
        v > 0.0 && v >= t
    };
    let mut seen = vec![false; h * w];
    let mut peaks: Vec<([usize; 2], f64)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !inside(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut best = (start, values.data()[start]);
        while let Some(i) = queue.pop_front() {
            let v = values.data()[i];
            if v > best.1 || (v == best.1 && i < best.0) {
                best = (i, v);
            }
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if !seen[j] && inside(j) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        peaks.push(([best.0 / w, best.0 % w], best.1 as f64));
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let min_sq = min_separation_px * min_separation_px;
    let mut kept: Vec<([usize; 2], f64)> = Vec::with_capacity(peaks.len());
    for p in peaks {
        let clear = kept.iter().all(|q| {
            let dr = p.0[0] as f64 - q.0[0] as f64;
            let dc = p.0[1] as f64 - q.0[1] as f64;
            dr * dr + dc * dc >= min_sq
        });
        if clear {
            kept.push(p);
        }
    }
    kept
}

/// Positive when the centre falls inside a lesion support; the first
/// containing lesion is recorded.
pub fn label_candidates(cands: &[Candidate], lesions: &[Lesion]) -> Vec<Candidate> {
    cands
        .iter()
        .map(|cand| {
            let (r, c) = (cand.center_rc[0] as f64, cand.center_rc[1] as f64);
            let hit = lesions.iter().find(|l| l.contains(r, c));
            Candidate {
                label: if hit.is_some() { CandidateLabel::Positive } else { CandidateLabel::Negative },
                lesion_id: hit.map(|l| l.lesion_id),
                ..cand.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub likelihood: LikelihoodParams,
    pub threshold: f64,
    pub min_separation_px: f64,
    /// Per-image budget applied after thresholding (0 = unlimited).
    pub max_per_image: usize,
}

/// Likelihood, threshold, budget and labels for one image of an exam.
pub fn detect(image: &BreastImage, exam_id: &str, cfg: &DetectorConfig) -> Result<Vec<Candidate>> {
    let map = mass_likelihood(image, &cfg.likelihood)?;
    let mut cands = threshold_candidates(&map, cfg.threshold, cfg.min_separation_px);
    if cfg.max_per_image > 0 {
        cands.truncate(cfg.max_per_image);
    }
    for c in &mut cands {
        c.exam_id = exam_id.to_string();
    }
    Ok(label_candidates(&cands, &image.lesions))
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRow {
    exam_id: String,
    image_id: String,
    row: usize,
    col: usize,
    score: f64,
    label: CandidateLabel,
}

/// Writes `exam_id,image_id,row,col,score,label` with a leading `#` comment line.
pub fn write_candidates_csv(path: &Path, cands: &[Candidate], comment: &str) -> Result<()> {
    let mut buf = Vec::new();
    for line in comment.lines() {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for c in cands {
            w.serialize(CandidateRow {
                exam_id: c.exam_id.clone(),
                image_id: c.image_id.clone(),
                row: c.center_rc[0],
                col: c.center_rc[1],
                score: c.score,
                label: c.label,
            })
            .map_err(|e| Error::format("candidate CSV", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a candidate CSV. Lesion ids are not stored; relabel against the
/// manifest when needed.
pub fn read_candidates_csv(path: &Path) -> Result<Vec<Candidate>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(format!("candidate CSV {}", path.display()), e.to_string()))?;
    r.deserialize::<CandidateRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::format(format!("candidate CSV {}", path.display()), e.to_string()))?;
            Ok(Candidate {
                center_rc: [row.row, row.col],
                score: row.score,
                label: row.label,
                lesion_id: None,
                image_id: row.image_id,
                exam_id: row.exam_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{LesionShape, Laterality, View};

    fn image(pixels: Raster, lesions: Vec<Lesion>) -> BreastImage {
        BreastImage {
            image_id: "img".into(),
            pixels,
            laterality: Laterality::Left,
            view: View::Cc,
            pixel_spacing_cm: 0.02,
            lesions,
        }
    }

    fn disc(center: [usize; 2], radius: f64) -> Lesion {
        Lesion {
            lesion_id: 0,
            center_rc: center,
            radius_px: radius,
            shape: LesionShape::Oval,
            contrast: 0.3,
            aspect: 1.0,
            orientation: 0.0,
            harmonics: vec![],
        }
    }

    #[test]
    fn constant_image_gives_zero_map() {
        let map = mass_likelihood(&image(Raster::filled(60, 50, 0.4), vec![]), &LikelihoodParams::default()).unwrap();
        assert!(map.values.is_all_zero());
        assert!(threshold_candidates(&map, 0.0, 10.0).is_empty());
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut px = Raster::filled(20, 20, 0.4);
        px.set(3, 3, f32::NAN);
        assert!(mass_likelihood(&image(px, vec![]), &LikelihoodParams::default()).is_err());
    }

    #[test]
    fn two_plateaus_give_two_ordered_candidates() {
        let mut values = Raster::zeros(20, 20);
        for r in 2..5 {
            for c in 2..5 {
                values.set(r, c, 0.6);
            }
        }
        for r in 12..16 {
            for c in 10..14 {
                values.set(r, c, 0.9);
            }
        }
        values.set(8, 8, 0.3);
        let map = LikelihoodMap { values, source_image_id: "x".into() };
        let cands = threshold_candidates(&map, 0.5, 1.0);
        let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
        assert_eq!(scores, vec![0.9f32 as f64, 0.6f32 as f64]);
        assert_eq!(cands[0].center_rc, [12, 10]);
        // merging within 20 px keeps only the stronger peak
        assert_eq!(threshold_candidates(&map, 0.5, 20.0).len(), 1);
        assert!(threshold_candidates(&map, 1.0, 1.0).is_empty());
    }

    #[test]
    fn threshold_one_keeps_at_most_the_global_max() {
        let mut values = Raster::zeros(10, 10);
        values.set(2, 2, 1.0);
        values.set(7, 7, 0.8);
        let map = LikelihoodMap { values, source_image_id: "x".into() };
        let c = threshold_candidates(&map, 1.0, 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].center_rc, [2, 2]);
    }

    #[test]
    fn labels_follow_lesion_support() {
        let lesion = disc([50, 50], 10.0);
        let at = |r, c| Candidate {
            center_rc: [r, c],
            score: 0.5,
            label: CandidateLabel::Unknown,
            lesion_id: None,
            image_id: "i".into(),
            exam_id: "e".into(),
        };
        let labeled = label_candidates(&[at(50, 50), at(50, 70)], std::slice::from_ref(&lesion));
        assert_eq!(labeled[0].label, CandidateLabel::Positive);
        assert_eq!(labeled[0].lesion_id, Some(0));
        assert_eq!(labeled[1].label, CandidateLabel::Negative);
        let none = label_candidates(&[at(50, 50)], &[]);
        assert_eq!(none[0].label, CandidateLabel::Negative);
    }

    fn blob_image() -> Raster {
        let lesion = disc([70, 60], 30.0);
        Raster::from_fn(150, 130, |r, c| {
            let base = 0.3 + 0.0005 * c as f32 + 0.02 * ((r as f32) * 0.05).sin();
            base + 0.3 * lesion.profile(r as f64, c as f64) as f32
        })
    }

    #[test]
    fn argmax_sits_on_the_mass() {
        let map = likelihood_raster(&blob_image(), &LikelihoodParams::default()).unwrap();
        let (mut best, mut at) = (f32::MIN, 0);
        for (i, &v) in map.data().iter().enumerate() {
            if v > best {
                best = v;
                at = i;
            }
        }
        let (r, c) = ((at / 130) as f64, (at % 130) as f64);
        assert!(((r - 70.0).powi(2) + (c - 60.0).powi(2)).sqrt() <= 10.0, "argmax at {r},{c}");
        assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn likelihood_is_mirror_equivariant() {
        let px = blob_image();
        let p = LikelihoodParams::default();
        let a = likelihood_raster(&px, &p).unwrap();
        let b = likelihood_raster(&px.flip_horizontal(), &p).unwrap();
        let a = a.flip_horizontal();
        let max_diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let cands = vec![Candidate {
            center_rc: [3, 4],
            score: 0.123456789,
            label: CandidateLabel::Positive,
            lesion_id: Some(0),
            image_id: "E1_L_CC".into(),
            exam_id: "E1".into(),
        }];
        write_candidates_csv(&path, &cands, "prov").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# prov\nexam_id,image_id,row,col,score,label\n"));
        let back = read_candidates_csv(&path).unwrap();
        assert_eq!(back[0].center_rc, [3, 4]);
        assert_eq!(back[0].score, 0.123456789);
        assert_eq!(back[0].label, CandidateLabel::Positive);
    }
}
