use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PatchPair;
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub blur_sigma_range: [f64; 2],
    pub apply_probability: f64,
    pub scale_range: [f64; 2],
    pub translate_range_px: [f64; 2],
    pub rotate_range_deg: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_sigma_range: [0.2, 3.0],
            apply_probability: 0.5,
            scale_range: [0.88, 1.25],
            translate_range_px: [-25.0, 25.0],
            rotate_range_deg: [-30.0, 30.0],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::config(name, format!("{r:?} is not an ordered range")))
            }
        };
        ordered("blur_sigma_range", self.blur_sigma_range)?;
        ordered("scale_range", self.scale_range)?;
        ordered("translate_range_px", self.translate_range_px)?;
        ordered("rotate_range_deg", self.rotate_range_deg)?;
        if self.blur_sigma_range[0] < 0.0 {
            return Err(Error::config("blur_sigma_range", "sigma must be >= 0"));
        }
        if self.scale_range[0] <= 0.0 {
            return Err(Error::config("scale_range", "scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::config("apply_probability", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Pixel-valued ranges (blur sigma, translation) rescaled for patches
    /// that were resampled by `factor` after extraction.
    pub fn rescaled(&self, factor: f64) -> AugmentConfig {
        AugmentConfig {
            blur_sigma_range: self.blur_sigma_range.map(|s| s * factor),
            translate_range_px: self.translate_range_px.map(|t| t * factor),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometricOp {
    Scale(f64),
    Translate { drow: f64, dcol: f64 },
    Rotate { degrees: f64 },
}

/// Applies `op` about the patch centre with bilinear sampling and zero fill.
pub fn transform(raster: &Raster, op: GeometricOp) -> Raster {
    let (h, w) = raster.shape();
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    match op {
        GeometricOp::Scale(s) => Raster::from_fn(h, w, |r, c| {
            raster.bilinear(cr + (r as f64 - cr) / s, cc + (c as f64 - cc) / s)
        }),
        GeometricOp::Translate { drow, dcol } => {
            Raster::from_fn(h, w, |r, c| raster.bilinear(r as f64 - drow, c as f64 - dcol))
        }
        GeometricOp::Rotate { degrees } => {
            let (s, co) = degrees.to_radians().sin_cos();
            Raster::from_fn(h, w, |r, c| {
                let (y, x) = (r as f64 - cr, c as f64 - cc);
                // inverse rotation of the output coordinate
                raster.bilinear(cr + co * y - s * x, cc + s * y + co * x)
            })
        }
    }
}

/// The same geometric transform applied to both members of a pair.
pub fn transform_pair(pair: &PatchPair, op: GeometricOp) -> PatchPair {
    PatchPair {
        primary: transform(&pair.primary, op),
        contralateral: if pair.has_contralateral {
            transform(&pair.contralateral, op)
        } else {
            pair.contralateral.clone()
        },
        ..pair.clone()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Positives: random horizontal flip, then Gaussian blur with a uniformly
/// drawn sigma. Every pair: with `apply_probability`, one of scaling,
/// translation or rotation. Both members always receive the same operation.
pub fn augment<R: Rng + ?Sized>(pair: &PatchPair, cfg: &AugmentConfig, rng: &mut R) -> PatchPair {
    let mut out = pair.clone();
    if pair.label.is_positive() {
        if rng.gen_bool(0.5) {
            out.primary = out.primary.flip_horizontal();
            out.contralateral = out.contralateral.flip_horizontal();
        }
        let sigma = uniform(rng, cfg.blur_sigma_range);
        out.primary = out.primary.gaussian_blur(sigma);
        if out.has_contralateral {
            out.contralateral = out.contralateral.gaussian_blur(sigma);
        }
    }
    if cfg.apply_probability > 0.0 && rng.gen_bool(cfg.apply_probability) {
        let op = match rng.gen_range(0..3) {
            0 => GeometricOp::Scale(uniform(rng, cfg.scale_range)),
            1 => GeometricOp::Translate {
                drow: uniform(rng, cfg.translate_range_px),
                dcol: uniform(rng, cfg.translate_range_px),
            },
            _ => GeometricOp::Rotate {
                degrees: uniform(rng, cfg.rotate_range_deg),
            },
        };
        out = transform_pair(&out, op);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::{PatchLabel, PatchProvenance};
    use crate::rng;

    fn pair(primary: Raster, contra: Option<Raster>, label: PatchLabel) -> PatchPair {
        let size = primary.height();
        PatchPair {
            has_contralateral: contra.is_some(),
            contralateral: contra.unwrap_or_else(|| Raster::zeros(size, size)),
            primary,
            label,
            provenance: PatchProvenance {
                exam_id: "e".into(),
                image_id: "i".into(),
                center_rc: [0, 0],
                candidate_score: 0.5,
                lesion_id: None,
            },
        }
    }

    fn smooth(n: usize) -> Raster {
        Raster::from_fn(n, n, |r, c| ((r as f32) * 0.1).sin() * 0.3 + ((c as f32) * 0.07).cos() * 0.2 + 0.5)
    }

    #[test]
    fn negative_with_zero_probability_is_untouched() {
        let p = pair(smooth(32), Some(smooth(32)), PatchLabel::Negative);
        let cfg = AugmentConfig { apply_probability: 0.0, ..AugmentConfig::default() };
        for seed in 0..5 {
            assert_eq!(augment(&p, &cfg, &mut rng::stream(seed, &[])), p);
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let p = smooth(48);
        let r = transform(&p, GeometricOp::Rotate { degrees: 0.0 });
        let err = p.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6);
    }

    fn disc_radius(r: &Raster) -> f64 {
        // area of the thresholded support, as an equivalent radius
        let area = r.data().iter().filter(|&&v| v >= 0.5).count() as f64;
        (area / std::f64::consts::PI).sqrt()
    }

    #[test]
    fn scaling_a_disc_scales_its_radius() {
        let n = 160;
        let c = (n as f64 - 1.0) / 2.0;
        let disc = Raster::from_fn(n, n, |r, cc| {
            if ((r as f64 - c).powi(2) + (cc as f64 - c).powi(2)).sqrt() <= 40.0 { 1.0 } else { 0.0 }
        });
        let before = disc_radius(&disc);
        let after = disc_radius(&transform(&disc, GeometricOp::Scale(1.25)));
        assert!((before - 40.0).abs() < 1.0);
        assert!((after - 50.0).abs() <= 1.0, "radius {after}");
    }

    #[test]
    fn augmentation_keeps_shape_label_and_zero_contralateral() {
        let cfg = AugmentConfig { apply_probability: 1.0, ..AugmentConfig::default() };
        for seed in 0..30 {
            for label in [PatchLabel::Positive, PatchLabel::Negative] {
                let p = pair(smooth(40), None, label);
                let a = augment(&p, &cfg, &mut rng::stream(seed, &[]));
                assert_eq!(a.label, label);
                assert!(!a.has_contralateral);
                assert!(a.contralateral.is_all_zero());
                assert_eq!(a.primary.shape(), (40, 40));
                assert!(a.primary.all_finite());
            }
        }
    }

    #[test]
    fn both_members_get_the_same_transform() {
        let cfg = AugmentConfig { apply_probability: 1.0, ..AugmentConfig::default() };
        let p = pair(smooth(40), Some(smooth(40)), PatchLabel::Positive);
        for seed in 0..20 {
            let a = augment(&p, &cfg, &mut rng::stream(seed, &[]));
            assert_eq!(a.primary, a.contralateral);
        }
    }

    #[test]
    fn rescaling_only_touches_pixel_ranges() {
        let c = AugmentConfig::default().rescaled(0.5);
        assert_eq!(c.translate_range_px, [-12.5, 12.5]);
        assert_eq!(c.blur_sigma_range, [0.1, 1.5]);
        assert_eq!(c.scale_range, [0.88, 1.25]);
    }
}
