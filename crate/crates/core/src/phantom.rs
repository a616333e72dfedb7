//! Synthetic bilateral mammography exams.
//!
//! Each exam holds MLO and CC views of one or both breasts. The left and
//! right images of a view are rendered from one shared texture stream in a
//! canonical (chest wall on the left) frame and the right breast is mirrored,
//! so background structure, including mass-like fibroglandular nodules, is
//! bilaterally symmetric up to a configurable perturbation. Malignant lesions
//! are placed in one breast only.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::Provenance;
use crate::raster::{dequantize_u16, quantize_u16, Raster};
use crate::rng::{self, StreamRng};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub fn opposite(self) -> Self {
        match self {
            Laterality::Left => Laterality::Right,
            Laterality::Right => Laterality::Left,
        }
    }

    fn code(self) -> &'static str {
        match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "MLO")]
    Mlo,
    #[serde(rename = "CC")]
    Cc,
}

impl View {
    pub const ALL: [View; 2] = [View::Mlo, View::Cc];

    fn code(self) -> &'static str {
        match self {
            View::Mlo => "MLO",
            View::Cc => "CC",
        }
    }
}

/// Scanner family analog. Only changes a global intensity gamma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vendor {
    Ge,
    Siemens,
    Hologic,
}

impl Vendor {
    pub const ALL: [Vendor; 3] = [Vendor::Ge, Vendor::Siemens, Vendor::Hologic];

    pub fn gamma(self) -> f64 {
        match self {
            Vendor::Ge => 1.0,
            Vendor::Siemens => 0.85,
            Vendor::Hologic => 1.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExamLabel {
    Normal,
    Malignant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionShape {
    Oval,
    Irregular,
}

/// One radial harmonic of an irregular boundary: `amplitude * cos(order * theta + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub order: u32,
    pub amplitude: f64,
    pub phase: f64,
}

/// A bright blob with an oval or harmonically perturbed oval boundary.
///
/// Angles are measured as `atan2(drow, dcol)` in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Identifies the physical lesion; shared by its appearances in both views.
    pub lesion_id: u32,
    pub center_rc: [usize; 2],
    /// Equivalent-circle radius of the unperturbed oval.
    pub radius_px: f64,
    pub shape: LesionShape,
    pub contrast: f64,
    pub aspect: f64,
    pub orientation: f64,
    #[serde(default)]
    pub harmonics: Vec<Harmonic>,
}

/// Fraction of the boundary radius over which intensity ramps up.
const EDGE_FRACTION: f64 = 0.3;

impl Lesion {
    /// Boundary distance from the centre in direction `theta`.
    pub fn boundary_radius(&self, theta: f64) -> f64 {
        let a = self.radius_px * self.aspect.sqrt();
        let b = self.radius_px / self.aspect.sqrt();
        let t = theta - self.orientation;
        let (s, c) = t.sin_cos();
        let oval = a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt();
        let modulation: f64 = self
            .harmonics
            .iter()
            .map(|h| h.amplitude * (h.order as f64 * theta + h.phase).cos())
            .sum();
        oval * (1.0 + modulation)
    }

    fn max_extent(&self) -> f64 {
        let amp: f64 = self.harmonics.iter().map(|h| h.amplitude.abs()).sum();
        self.radius_px * self.aspect.max(1.0 / self.aspect).sqrt() * (1.0 + amp)
    }

    /// True when pixel `(row, col)` lies inside the lesion support.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let dr = row - self.center_rc[0] as f64;
        let dc = col - self.center_rc[1] as f64;
        let d = dr.hypot(dc);
        d == 0.0 || d <= self.boundary_radius(dr.atan2(dc))
    }

    /// Intensity weight in [0, 1]: 1 in the core, smooth ramp to 0 at the boundary.
    pub fn profile(&self, row: f64, col: f64) -> f64 {
        let dr = row - self.center_rc[0] as f64;
        let dc = col - self.center_rc[1] as f64;
        let d = dr.hypot(dc);
        if d == 0.0 {
            return 1.0;
        }
        let rb = self.boundary_radius(dr.atan2(dc));
        let x = ((rb - d) / (EDGE_FRACTION * rb)).clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    }

    /// The same lesion after the image is mirrored about its vertical axis.
    pub fn mirrored(&self, width: usize) -> Lesion {
        let mut m = self.clone();
        m.center_rc[1] = width - 1 - self.center_rc[1];
        m.orientation = -self.orientation;
        for h in &mut m.harmonics {
            h.phase = -(h.order as f64) * PI - h.phase;
        }
        m
    }

    fn add_to(&self, raster: &mut Raster, scale: f64) {
        let ext = self.max_extent().ceil() as isize + 1;
        let (h, w) = raster.shape();
        let (cr, cc) = (self.center_rc[0] as isize, self.center_rc[1] as isize);
        for r in (cr - ext).max(0)..(cr + ext + 1).min(h as isize) {
            for c in (cc - ext).max(0)..(cc + ext + 1).min(w as isize) {
                let p = self.profile(r as f64, c as f64);
                if p > 0.0 {
                    let (ru, cu) = (r as usize, c as usize);
                    let v = raster.get(ru, cu) as f64 + scale * self.contrast * p;
                    raster.set(ru, cu, v as f32);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_exams: usize,
    pub malignant_fraction: f64,
    pub missing_laterality_fraction: f64,
    /// GE, Siemens, Hologic analogs.
    pub vendor_weights: [f64; 3],
    pub image_height_px: usize,
    pub image_width_px: usize,
    pub pixel_spacing_cm: f64,
    pub mass_count_range: [usize; 2],
    pub mass_radius_range_cm: [f64; 2],
    pub lesion_contrast_range: [f64; 2],
    /// Probability that a malignant mass gets an irregular boundary.
    pub irregular_fraction: f64,
    /// Symmetric mass-like background nodules per view.
    pub nodule_count_range: [usize; 2],
    pub nodule_contrast_range: [f64; 2],
    pub nodule_irregular_fraction: f64,
    pub asymmetry_texture_strength: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_exams: 200,
            malignant_fraction: 0.42,
            // 1315 of 7196 exams lack one breast
            missing_laterality_fraction: 0.183,
            // study counts 2248 / 1518 / 3430 of 7196
            vendor_weights: [2248.0 / 7196.0, 1518.0 / 7196.0, 3430.0 / 7196.0],
            image_height_px: 600,
            image_width_px: 450,
            pixel_spacing_cm: 0.02,
            mass_count_range: [1, 2],
            mass_radius_range_cm: [0.4, 0.9],
            lesion_contrast_range: [0.15, 0.35],
            irregular_fraction: 0.6,
            nodule_count_range: [2, 5],
            nodule_contrast_range: [0.12, 0.32],
            nodule_irregular_fraction: 0.2,
            asymmetry_texture_strength: 0.04,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} is outside [0, 1]")))
            }
        };
        let range = |name: &str, r: [f64; 2], min: f64| {
            if r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::config(name, format!("{r:?} is not an ordered range with lower bound >= {min}")))
            }
        };
        if self.n_exams == 0 {
            return Err(Error::config("n_exams", "must be positive"));
        }
        unit("malignant_fraction", self.malignant_fraction)?;
        unit("missing_laterality_fraction", self.missing_laterality_fraction)?;
        unit("irregular_fraction", self.irregular_fraction)?;
        unit("nodule_irregular_fraction", self.nodule_irregular_fraction)?;
        for (i, &w) in self.vendor_weights.iter().enumerate() {
            unit(&format!("vendor_weights[{i}]"), w)?;
        }
        let sum: f64 = self.vendor_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("vendor_weights", format!("sum to {sum}, expected 1")));
        }
        if self.image_height_px < 16 || self.image_width_px < 16 {
            return Err(Error::config("image_height_px", "image must be at least 16x16"));
        }
        if !(self.pixel_spacing_cm > 0.0 && self.pixel_spacing_cm.is_finite()) {
            return Err(Error::config("pixel_spacing_cm", "must be positive"));
        }
        if self.mass_count_range[0] == 0 || self.mass_count_range[0] > self.mass_count_range[1] {
            return Err(Error::config("mass_count_range", "must be an ordered range starting at 1 or more"));
        }
        if self.nodule_count_range[0] > self.nodule_count_range[1] {
            return Err(Error::config("nodule_count_range", "must be ordered"));
        }
        range("mass_radius_range_cm", self.mass_radius_range_cm, f64::MIN_POSITIVE)?;
        range("lesion_contrast_range", self.lesion_contrast_range, 0.0)?;
        range("nodule_contrast_range", self.nodule_contrast_range, 0.0)?;
        let max_r = self.mass_radius_range_cm[1] / self.pixel_spacing_cm;
        if 4.0 * max_r >= self.image_width_px.min(self.image_height_px) as f64 {
            return Err(Error::config("mass_radius_range_cm", "masses do not fit inside the image"));
        }
        if !(self.asymmetry_texture_strength >= 0.0 && self.asymmetry_texture_strength.is_finite()) {
            return Err(Error::config("asymmetry_texture_strength", "must be >= 0"));
        }
        Ok(())
    }

    fn radius_range_px(&self) -> [f64; 2] {
        [
            self.mass_radius_range_cm[0] / self.pixel_spacing_cm,
            self.mass_radius_range_cm[1] / self.pixel_spacing_cm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub laterality: Laterality,
    pub view: View,
    pub height: usize,
    pub width: usize,
    pub pixel_spacing_cm: f64,
    /// Relative to the manifest directory; set once the image is written.
    pub path: Option<String>,
    pub lesions: Vec<Lesion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamRecord {
    pub exam_id: String,
    pub patient_id: String,
    /// Position in generation order; keys the exam's random streams.
    pub index: u64,
    pub vendor: Vendor,
    pub label: ExamLabel,
    pub split: Option<Split>,
    pub images: Vec<ImageRecord>,
}

impl ExamRecord {
    pub fn image(&self, laterality: Laterality, view: View) -> Option<&ImageRecord> {
        self.images
            .iter()
            .find(|i| i.laterality == laterality && i.view == view)
    }

    pub fn lesion_count(&self) -> usize {
        self.images.iter().map(|i| i.lesions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub provenance: Option<Provenance>,
    pub config: PhantomConfig,
    pub exams: Vec<ExamRecord>,
}

impl DatasetManifest {
    pub fn exam(&self, exam_id: &str) -> Option<&ExamRecord> {
        self.exams.iter().find(|e| e.exam_id == exam_id)
    }

    pub fn exams_in(&self, split: Split) -> impl Iterator<Item = &ExamRecord> {
        self.exams.iter().filter(move |e| e.split == Some(split))
    }

    pub fn assign_splits(&mut self, split: &DatasetSplit) {
        for (ids, s) in [(&split.train, Split::Train), (&split.val, Split::Val), (&split.test, Split::Test)] {
            for &i in ids {
                self.exams[i].split = Some(s);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                artifact: "dataset manifest".into(),
                found,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// A rendered breast image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BreastImage {
    pub image_id: String,
    pub pixels: Raster,
    pub laterality: Laterality,
    pub view: View,
    pub pixel_spacing_cm: f64,
    pub lesions: Vec<Lesion>,
}

impl BreastImage {
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exam {
    pub exam_id: String,
    pub patient_id: String,
    pub vendor: Vendor,
    pub label: ExamLabel,
    pub images: Vec<BreastImage>,
}

impl Exam {
    pub fn image(&self, laterality: Laterality, view: View) -> Option<&BreastImage> {
        self.images
            .iter()
            .find(|i| i.laterality == laterality && i.view == view)
    }

    /// Same view of the opposite breast, if present.
    pub fn contralateral(&self, image: &BreastImage) -> Option<&BreastImage> {
        self.image(image.laterality.opposite(), image.view)
    }
}

/// Half-ellipse breast outline in the canonical frame (chest wall at column 0).
#[derive(Debug, Clone, Copy)]
pub struct BreastGeometry {
    pub center_row: f64,
    pub semi_rows: f64,
    pub semi_cols: f64,
}

impl BreastGeometry {
    fn sample(rng: &mut StreamRng, height: usize, width: usize, view: View) -> Self {
        let (h, w) = (height as f64, width as f64);
        let (sr, sc, shift) = match view {
            View::Mlo => (0.46, 0.86, -0.03),
            View::Cc => (0.41, 0.80, 0.0),
        };
        BreastGeometry {
            center_row: h * (0.5 + shift + rng.gen_range(-0.02..0.02)),
            semi_rows: h * sr * rng.gen_range(0.95..1.03),
            semi_cols: w * sc * rng.gen_range(0.95..1.05),
        }
    }

    /// Normalised elliptical radius; < 1 inside the breast.
    #[inline]
    pub fn rho(&self, row: f64, col: f64) -> f64 {
        let a = (row - self.center_row) / self.semi_rows;
        let b = col / self.semi_cols;
        (a * a + b * b).sqrt()
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

const STREAM_META: u64 = 0;
const STREAM_GEOMETRY: u64 = 1;
const STREAM_TEXTURE: u64 = 2;
const STREAM_ASYMMETRY: u64 = 3;
const STREAM_LESIONS: u64 = 4;

fn view_tag(v: View) -> u64 {
    match v {
        View::Mlo => 0,
        View::Cc => 1,
    }
}

fn lat_tag(l: Laterality) -> u64 {
    match l {
        Laterality::Left => 0,
        Laterality::Right => 1,
    }
}

pub fn breast_geometry(config: &PhantomConfig, exam_index: u64, view: View) -> BreastGeometry {
    let mut rng = rng::stream(config.seed, &[exam_index, STREAM_GEOMETRY, view_tag(view)]);
    BreastGeometry::sample(&mut rng, config.image_height_px, config.image_width_px, view)
}

fn sample_blob(
    rng: &mut StreamRng,
    geometry: &BreastGeometry,
    radius_range: [f64; 2],
    contrast_range: [f64; 2],
    irregular_p: f64,
    height: usize,
    width: usize,
    avoid: &[Lesion],
) -> Lesion {
    let radius = rng.gen_range(radius_range[0]..=radius_range[1]);
    let contrast = rng.gen_range(contrast_range[0]..=contrast_range[1]);
    let irregular = rng.gen_bool(irregular_p);
    let aspect = rng.gen_range(0.7..1.4);
    let orientation = rng.gen_range(-PI..PI);
    let harmonics = if irregular {
        (2..=4)
            .map(|order| Harmonic {
                order,
                amplitude: rng.gen_range(0.04..0.1),
                phase: rng.gen_range(-PI..PI),
            })
            .collect()
    } else {
        Vec::new()
    };
    let margin = radius * 1.5;
    let mut center = [0usize; 2];
    for attempt in 0..200 {
        let r = rng.gen_range(margin..height as f64 - margin);
        let c = rng.gen_range(margin..(width as f64 - margin).max(margin + 1.0));
        center = [r as usize, c as usize];
        let inside = geometry.rho(r, c) < 0.72 && c + margin < width as f64;
        let clear = avoid.iter().all(|l| {
            let d = ((l.center_rc[0] as f64 - r).powi(2) + (l.center_rc[1] as f64 - c).powi(2)).sqrt();
            d > 1.2 * (l.radius_px + radius)
        });
        if inside && (clear || attempt > 150) {
            break;
        }
    }
    Lesion {
        lesion_id: 0,
        center_rc: center,
        radius_px: radius,
        shape: if irregular { LesionShape::Irregular } else { LesionShape::Oval },
        contrast,
        aspect,
        orientation,
        harmonics,
    }
}

/// Builds the exam list: vendors, labels, missing lateralities and lesion
/// ground truth. Pixels are produced separately by [`render_exam`].
pub fn generate_dataset(config: &PhantomConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let n = config.n_exams;
    let n_malignant = (config.malignant_fraction * n as f64).round() as usize;
    let n_missing = (config.missing_laterality_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(config.seed, &[u64::MAX, 0]));
    let mut malignant = vec![false; n];
    for &i in &order[..n_malignant] {
        malignant[i] = true;
    }
    order.shuffle(&mut rng::stream(config.seed, &[u64::MAX, 1]));
    let mut missing = vec![false; n];
    for &i in &order[..n_missing] {
        missing[i] = true;
    }

    let exams = (0..n)
        .map(|i| build_exam_record(config, i as u64, malignant[i], missing[i]))
        .collect();
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        provenance: None,
        config: config.clone(),
        exams,
    })
}

fn build_exam_record(config: &PhantomConfig, index: u64, malignant: bool, missing: bool) -> ExamRecord {
    let mut meta = rng::stream(config.seed, &[index, STREAM_META]);
    let u: f64 = meta.gen();
    let mut acc = 0.0;
    let mut vendor = Vendor::Hologic;
    for (v, w) in Vendor::ALL.iter().zip(config.vendor_weights) {
        acc += w;
        if u < acc {
            vendor = *v;
            break;
        }
    }
    let lateralities: Vec<Laterality> = if missing {
        vec![if meta.gen_bool(0.5) { Laterality::Left } else { Laterality::Right }]
    } else {
        vec![Laterality::Left, Laterality::Right]
    };
    let lesion_side = lateralities[meta.gen_range(0..lateralities.len())];
    let mass_count = meta.gen_range(config.mass_count_range[0]..=config.mass_count_range[1]);

    let exam_id = format!("E{index:05}");
    let (h, w) = (config.image_height_px, config.image_width_px);
    let mut images = Vec::new();
    for &lat in &lateralities {
        for view in View::ALL {
            let lesions = if malignant && lat == lesion_side {
                let geometry = breast_geometry(config, index, view);
                let mut lrng = rng::stream(config.seed, &[index, STREAM_LESIONS, view_tag(view)]);
                // radius and shape are properties of the physical lesion, shared by views
                let mut shared = rng::stream(config.seed, &[index, STREAM_LESIONS, 99]);
                let mut texture_rng = rng::stream(config.seed, &[index, STREAM_TEXTURE, view_tag(view)]);
                let mut avoid = ViewTexture::sample(&mut texture_rng, geometry, config).nodules;
                let mut canonical: Vec<Lesion> = Vec::new();
                for lesion_id in 0..mass_count as u32 {
                    let template = sample_blob(
                        &mut shared,
                        &geometry,
                        config.radius_range_px(),
                        config.lesion_contrast_range,
                        config.irregular_fraction,
                        h,
                        w,
                        &[],
                    );
                    let mut placed = sample_blob(
                        &mut lrng,
                        &geometry,
                        [template.radius_px, template.radius_px],
                        [template.contrast, template.contrast],
                        0.0,
                        h,
                        w,
                        &avoid,
                    );
                    placed.lesion_id = lesion_id;
                    placed.shape = template.shape;
                    placed.harmonics = template.harmonics;
                    placed.aspect = template.aspect;
                    avoid.push(placed.clone());
                    canonical.push(placed);
                }
                match lat {
                    Laterality::Left => canonical,
                    Laterality::Right => canonical.iter().map(|l| l.mirrored(w)).collect(),
                }
            } else {
                Vec::new()
            };
            images.push(ImageRecord {
                image_id: format!("{exam_id}_{}_{}", lat.code(), view.code()),
                laterality: lat,
                view,
                height: h,
                width: w,
                pixel_spacing_cm: config.pixel_spacing_cm,
                path: None,
                lesions,
            });
        }
    }
    ExamRecord {
        exam_id,
        patient_id: format!("P{index:05}"),
        index,
        vendor,
        label: if malignant { ExamLabel::Malignant } else { ExamLabel::Normal },
        split: None,
        images,
    }
}

/// Texture parameters of one view, drawn from the shared (bilateral) stream.
struct ViewTexture {
    blobs: Vec<(f64, f64, f64, f64)>,
    fine_blobs: Vec<(f64, f64, f64, f64)>,
    nodules: Vec<Lesion>,
}

impl ViewTexture {
    fn sample(
        rng: &mut StreamRng,
        geometry: BreastGeometry,
        config: &PhantomConfig,
    ) -> Self {
        let (h, w) = (config.image_height_px as f64, config.image_width_px as f64);
        let blobs = (0..16)
            .map(|_| {
                (
                    rng.gen_range(0.0..h),
                    rng.gen_range(0.0..w),
                    rng.gen_range(0.06..0.18) * h,
                    rng.gen_range(-0.07..0.07),
                )
            })
            .collect();
        let fine_blobs = (0..80)
            .map(|_| {
                (
                    rng.gen_range(0.0..h),
                    rng.gen_range(0.0..w),
                    rng.gen_range(0.012..0.035) * h,
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let n_nodules = rng.gen_range(config.nodule_count_range[0]..=config.nodule_count_range[1]);
        let mut nodules = Vec::with_capacity(n_nodules);
        for _ in 0..n_nodules {
            let nod = sample_blob(
                rng,
                &geometry,
                config.radius_range_px(),
                config.nodule_contrast_range,
                config.nodule_irregular_fraction,
                config.image_height_px,
                config.image_width_px,
                &nodules,
            );
            nodules.push(nod);
        }
        ViewTexture { blobs, fine_blobs, nodules }
    }
}

/// Smooth random field on a coarse grid, bilinearly upsampled.
fn smooth_field(h: usize, w: usize, step: usize, blobs: &[(f64, f64, f64, f64)]) -> Raster {
    let gh = h / step + 2;
    let gw = w / step + 2;
    let grid = Raster::from_fn(gh, gw, |gr, gc| {
        let (r, c) = ((gr * step) as f64, (gc * step) as f64);
        blobs
            .iter()
            .map(|&(br, bc, s, a)| a * (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
            .sum::<f64>() as f32
    });
    Raster::from_fn(h, w, |r, c| grid.bilinear(r as f64 / step as f64, c as f64 / step as f64))
}

/// Renders one breast image.
///
/// `texture_rng` must be the stream shared by both breasts of the view and
/// `asymmetry_rng` a per-breast stream. Lesions are given in image
/// coordinates of the requested laterality.
pub fn render_breast(
    texture_rng: &mut StreamRng,
    asymmetry_rng: &mut StreamRng,
    geometry: BreastGeometry,
    config: &PhantomConfig,
    vendor: Vendor,
    laterality: Laterality,
    lesions: &[Lesion],
) -> Raster {
    let (h, w) = (config.image_height_px, config.image_width_px);
    let texture = ViewTexture::sample(texture_rng, geometry, config);
    let low = smooth_field(h, w, 8, &texture.blobs);
    let fine = smooth_field(h, w, 3, &texture.fine_blobs);

    let mut tissue = Raster::from_fn(h, w, |r, c| {
        let rho = geometry.rho(r as f64, c as f64);
        let skin = smoothstep((1.0 - rho) / 0.05);
        if skin == 0.0 {
            return 0.0;
        }
        ((0.30 + 0.12 * (1.0 - rho * rho) + low.get(r, c) as f64 + fine.get(r, c) as f64) * skin) as f32
    });
    for nodule in &texture.nodules {
        nodule.add_to(&mut tissue, 1.0);
    }
    if config.asymmetry_texture_strength > 0.0 {
        let blobs: Vec<_> = (0..12)
            .map(|_| {
                (
                    asymmetry_rng.gen_range(0.0..h as f64),
                    asymmetry_rng.gen_range(0.0..w as f64),
                    asymmetry_rng.gen_range(0.04..0.12) * h as f64,
                    asymmetry_rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let field = smooth_field(h, w, 8, &blobs);
        for r in 0..h {
            for c in 0..w {
                let rho = geometry.rho(r as f64, c as f64);
                let skin = smoothstep((1.0 - rho) / 0.05);
                if skin > 0.0 {
                    let v = tissue.get(r, c) as f64
                        + config.asymmetry_texture_strength * field.get(r, c) as f64 * skin;
                    tissue.set(r, c, v as f32);
                }
            }
        }
    }
    let gamma = vendor.gamma();
    for v in tissue.data_mut() {
        *v = (v.clamp(0.0, 1.0) as f64).powf(gamma) as f32;
    }
    for lesion in lesions {
        let canonical = match laterality {
            Laterality::Left => lesion.clone(),
            Laterality::Right => lesion.mirrored(w),
        };
        canonical.add_to(&mut tissue, 1.0);
    }
    for v in tissue.data_mut() {
        // stored values are exactly representable in the 16-bit image files
        *v = dequantize_u16(quantize_u16(*v));
    }
    match laterality {
        Laterality::Left => tissue,
        Laterality::Right => tissue.flip_horizontal(),
    }
}

/// Renders every image of an exam record.
pub fn render_exam(config: &PhantomConfig, record: &ExamRecord) -> Exam {
    let images = record
        .images
        .iter()
        .map(|img| {
            let geometry = breast_geometry(config, record.index, img.view);
            let mut texture_rng = rng::stream(config.seed, &[record.index, STREAM_TEXTURE, view_tag(img.view)]);
            let mut asym_rng = rng::stream(
                config.seed,
                &[record.index, STREAM_ASYMMETRY, view_tag(img.view), lat_tag(img.laterality)],
            );
            let pixels = render_breast(
                &mut texture_rng,
                &mut asym_rng,
                geometry,
                config,
                record.vendor,
                img.laterality,
                &img.lesions,
            );
            BreastImage {
                image_id: img.image_id.clone(),
                pixels,
                laterality: img.laterality,
                view: img.view,
                pixel_spacing_cm: img.pixel_spacing_cm,
                lesions: img.lesions.clone(),
            }
        })
        .collect();
    Exam {
        exam_id: record.exam_id.clone(),
        patient_id: record.patient_id.clone(),
        vendor: record.vendor,
        label: record.label,
        images,
    }
}

/// Exam indices per split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patient-level split, stratified by vendor.
pub fn split_dataset(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", format!("{ratios:?} must be positive and sum to 1")));
    }
    // patient -> (vendor of first exam, exam indices), in first-seen order
    let mut patients: Vec<(String, Vendor, Vec<usize>)> = Vec::new();
    for (i, exam) in manifest.exams.iter().enumerate() {
        match patients.iter_mut().find(|p| p.0 == exam.patient_id) {
            Some(p) => p.2.push(i),
            None => patients.push((exam.patient_id.clone(), exam.vendor, vec![i])),
        }
    }
    if patients.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "splitting needs at least 3 patients, found {}",
            patients.len()
        )));
    }
    let mut rng = rng::stream(seed, &[rng::tag("split")]);
    let mut split = DatasetSplit::default();
    for vendor in Vendor::ALL {
        let mut group: Vec<&(String, Vendor, Vec<usize>)> =
            patients.iter().filter(|p| p.1 == vendor).collect();
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_train = (ratios[0] * n).round() as usize;
        let n_val = ((ratios[0] + ratios[1]) * n).round() as usize - n_train;
        for (k, p) in group.iter().enumerate() {
            let dest = if k < n_train {
                &mut split.train
            } else if k < n_train + n_val {
                &mut split.val
            } else {
                &mut split.test
            };
            dest.extend_from_slice(&p.2);
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PhantomConfig {
        PhantomConfig {
            n_exams: 20,
            image_height_px: 200,
            image_width_px: 150,
            pixel_spacing_cm: 0.06,
            seed: 3,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = PhantomConfig {
            malignant_fraction: 1.5,
            ..PhantomConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "malignant_fraction"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = PhantomConfig {
            vendor_weights: [0.5, 0.5, 0.5],
            ..PhantomConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field, .. }) if field == "vendor_weights"));
    }

    #[test]
    fn zero_malignant_fraction_has_no_lesions() {
        let cfg = PhantomConfig {
            malignant_fraction: 0.0,
            ..small_config()
        };
        let m = generate_dataset(&cfg).unwrap();
        assert!(m.exams.iter().all(|e| e.label == ExamLabel::Normal));
        assert_eq!(m.exams.iter().map(|e| e.lesion_count()).sum::<usize>(), 0);
    }

    #[test]
    fn label_matches_lesion_presence_and_missing_side_has_one_breast() {
        let m = generate_dataset(&small_config()).unwrap();
        for e in &m.exams {
            assert_eq!(e.label == ExamLabel::Malignant, e.lesion_count() > 0);
            let sides: std::collections::BTreeSet<_> = e.images.iter().map(|i| i.laterality).collect();
            assert!(e.images.len() == 2 * sides.len());
            for img in &e.images {
                for l in &img.lesions {
                    assert!(l.center_rc[0] < img.height && l.center_rc[1] < img.width);
                    assert!(l.radius_px > 0.0);
                }
            }
        }
        let missing = m.exams.iter().filter(|e| e.images.len() == 2).count();
        assert_eq!(missing, (0.183f64 * 20.0).round() as usize);
    }

    #[test]
    fn lesions_are_unilateral() {
        let m = generate_dataset(&small_config()).unwrap();
        for e in m.exams.iter().filter(|e| e.label == ExamLabel::Malignant) {
            let sides: std::collections::BTreeSet<_> = e
                .images
                .iter()
                .filter(|i| !i.lesions.is_empty())
                .map(|i| i.laterality)
                .collect();
            assert_eq!(sides.len(), 1);
        }
    }

    #[test]
    fn mirrored_lesion_support_is_the_mirror_image() {
        let l = Lesion {
            lesion_id: 0,
            center_rc: [40, 30],
            radius_px: 12.0,
            shape: LesionShape::Irregular,
            contrast: 0.3,
            aspect: 1.3,
            orientation: 0.4,
            harmonics: vec![
                Harmonic { order: 2, amplitude: 0.08, phase: 0.3 },
                Harmonic { order: 3, amplitude: 0.06, phase: -1.1 },
            ],
        };
        let w = 90;
        let m = l.mirrored(w);
        for r in 20..60 {
            for c in 10..50 {
                assert_eq!(l.contains(r as f64, c as f64), m.contains(r as f64, (w - 1 - c) as f64));
                assert!((l.profile(r as f64, c as f64) - m.profile(r as f64, (w - 1 - c) as f64)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_render_without_asymmetry_or_lesions() {
        let cfg = PhantomConfig {
            asymmetry_texture_strength: 0.0,
            ..small_config()
        };
        let geometry = breast_geometry(&cfg, 0, View::Cc);
        let render = |lat| {
            render_breast(
                &mut rng::stream(1, &[5]),
                &mut rng::stream(2, &[lat_tag(lat)]),
                geometry,
                &cfg,
                Vendor::Ge,
                lat,
                &[],
            )
        };
        let left = render(Laterality::Left);
        let right = render(Laterality::Right);
        assert_eq!(left.flip_horizontal(), right);
        assert!(left.min() >= 0.0 && left.max() <= 1.0);
    }

    #[test]
    fn lesion_raises_local_intensity() {
        let cfg = PhantomConfig {
            nodule_count_range: [0, 0],
            ..small_config()
        };
        let geometry = breast_geometry(&cfg, 0, View::Mlo);
        let lesion = Lesion {
            lesion_id: 0,
            center_rc: [geometry.center_row as usize, 50],
            radius_px: 12.0,
            shape: LesionShape::Oval,
            contrast: 0.4,
            aspect: 1.0,
            orientation: 0.0,
            harmonics: vec![],
        };
        let img = render_breast(
            &mut rng::stream(1, &[0]),
            &mut rng::stream(1, &[1]),
            geometry,
            &cfg,
            Vendor::Ge,
            Laterality::Left,
            std::slice::from_ref(&lesion),
        );
        let (mut inside, mut n_in, mut ring, mut n_ring) = (0.0, 0, 0.0, 0);
        for r in 0..img.height() {
            for c in 0..img.width() {
                let d = ((r as f64 - lesion.center_rc[0] as f64).powi(2) + (c as f64 - 50.0).powi(2)).sqrt();
                if lesion.contains(r as f64, c as f64) {
                    inside += img.get(r, c) as f64;
                    n_in += 1;
                } else if d > 15.0 && d < 22.0 {
                    ring += img.get(r, c) as f64;
                    n_ring += 1;
                }
            }
        }
        assert!(inside / n_in as f64 - ring / n_ring as f64 >= 0.2);
    }

    #[test]
    fn split_sizes_and_patient_grouping() {
        let mut m = generate_dataset(&PhantomConfig {
            n_exams: 1000,
            ..small_config()
        })
        .unwrap();
        let s = split_dataset(&m, [0.5, 0.1, 0.4], 1).unwrap();
        assert!((s.train.len() as i64 - 500).abs() <= 2);
        assert!((s.val.len() as i64 - 100).abs() <= 2);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 1000);
        assert_eq!(s, split_dataset(&m, [0.5, 0.1, 0.4], 1).unwrap());

        // two exams of one patient end up together
        m.exams[1].patient_id = m.exams[0].patient_id.clone();
        m.exams[1].vendor = m.exams[0].vendor;
        let s = split_dataset(&m, [0.5, 0.1, 0.4], 9).unwrap();
        let which = |i| [&s.train, &s.val, &s.test].iter().position(|v| v.contains(&i)).unwrap();
        assert_eq!(which(0), which(1));
    }

    #[test]
    fn split_needs_three_patients() {
        let m = generate_dataset(&PhantomConfig {
            n_exams: 2,
            ..small_config()
        })
        .unwrap();
        assert!(matches!(split_dataset(&m, [0.5, 0.1, 0.4], 0), Err(Error::InsufficientData(_))));
        assert!(split_dataset(&m, [0.5, 0.2, 0.4], 0).is_err());
    }
}
