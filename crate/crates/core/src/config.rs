//! Line-oriented pipeline configuration.
//!
//! ```text
//! # comment
//! seed = 7
//! phantom.n_exams: int = 200
//! split.ratios = [0.6, 0.2, 0.2]
//! eval.split = "test"
//! ```
//!
//! Keys are `section.key`; an optional `: type` annotation (`int`, `float`,
//! `bool`, `str`, `list`) is checked against the key's schema. Unlisted keys
//! keep their defaults, except `seed`, which is required.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::candidates::{DetectorConfig, LikelihoodParams};
use crate::error::{Error, Result};
use crate::eval::BootstrapConfig;
use crate::nnet::{ModelKind, NetworkSpec};
use crate::patches::{AugmentConfig, NegativeSampling};
use crate::phantom::{PhantomConfig, Split};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Int,
    Float,
    Bool,
    Str,
    List,
}

impl Ty {
    fn name(self) -> &'static str {
        match self {
            Ty::Int => "int",
            Ty::Float => "float",
            Ty::Bool => "bool",
            Ty::Str => "str",
            Ty::List => "list",
        }
    }

    fn parse(s: &str) -> Option<Ty> {
        Some(match s {
            "int" => Ty::Int,
            "float" => Ty::Float,
            "bool" => Ty::Bool,
            "str" => Ty::Str,
            "list" => Ty::List,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomConfig,
    /// Write rendered images as 16-bit PGM; otherwise later stages re-render
    /// them from the manifest (bit-identical).
    pub write_images: bool,
    pub split_ratios: [f64; 3],
    pub detector: DetectorConfig,
    /// Window cut around each candidate, in image pixels.
    pub patch_window_px: usize,
    pub negative_sampling: NegativeSampling,
    /// Augmentation ranges in image pixels; rescaled to the network input.
    pub augment: AugmentConfig,
    pub network: NetworkSpec,
    pub batch_size: usize,
    pub momentum: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub initial_lr: [f64; 2],
    /// Explicit decay per model; `None` means `initial_lr / 200`.
    pub decay: [Option<f64>; 2],
    pub transfer: bool,
    pub bootstrap_n: usize,
    pub ci_level: f64,
    pub eval_split: Split,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            write_images: true,
            split_ratios: [0.6, 0.2, 0.2],
            detector: DetectorConfig {
                likelihood: LikelihoodParams::for_radius_range(phantom.mass_radius_range_cm, phantom.pixel_spacing_cm),
                threshold: DEFAULT_CANDIDATE_THRESHOLD,
                min_separation_px: 70.0,
                max_per_image: 25,
            },
            phantom,
            patch_window_px: 192,
            negative_sampling: NegativeSampling::default(),
            augment: AugmentConfig::default(),
            network: NetworkSpec {
                input_size_px: 96,
                conv_filters: vec![8, 16, 16],
                ..NetworkSpec::full_scale(ModelKind::Baseline)
            },
            batch_size: 64,
            momentum: 0.9,
            patience_epochs: 20,
            max_epochs: 30,
            initial_lr: [1e-2, 1e-3],
            decay: [None, None],
            transfer: true,
            bootstrap_n: 1000,
            ci_level: 0.95,
            eval_split: Split::Test,
        }
    }
}

/// Candidate likelihood threshold chosen on the validation split of the
/// default phantom (see the README).
pub const DEFAULT_CANDIDATE_THRESHOLD: f64 = 0.5;

fn kind_index(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Baseline => 0,
        ModelKind::Symmetry => 1,
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list<T: std::fmt::Debug>(v: &[T]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", parts.join(", "))
}

fn parse_int(key: &str, raw: &str) -> Result<u64> {
    raw.parse::<u64>()
        .map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{raw}`")))
}

fn parse_float(key: &str, raw: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::config(key, format!("expected a finite number, got `{raw}`"))),
    }
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{raw}`"))),
    }
}

fn parse_str(key: &str, raw: &str) -> Result<String> {
    let s = raw.trim();
    if let Some(inner) = s.strip_prefix('"') {
        return inner
            .strip_suffix('"')
            .map(str::to_string)
            .ok_or_else(|| Error::config(key, "unterminated string"));
    }
    if s.is_empty() {
        return Err(Error::config(key, "empty value"));
    }
    Ok(s.to_string())
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<String>> {
    let inner = raw
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::config(key, format!("expected a list like [1, 2], got `{raw}`")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(inner.split(',').map(|s| s.trim().to_string()).collect())
}

fn floats<const N: usize>(key: &str, raw: &str) -> Result<[f64; N]> {
    let items = parse_list(key, raw)?;
    if items.len() != N {
        return Err(Error::config(key, format!("expected {N} numbers, got {}", items.len())));
    }
    let mut out = [0.0; N];
    for (o, s) in out.iter_mut().zip(&items) {
        *o = parse_float(key, s)?;
    }
    Ok(out)
}

fn ints(key: &str, raw: &str) -> Result<Vec<usize>> {
    parse_list(key, raw)?
        .iter()
        .map(|s| parse_int(key, s).map(|v| v as usize))
        .collect()
}

impl PipelineConfig {
    /// Every key with its type and current value, in canonical order.
    fn entries(&self) -> Vec<(&'static str, Ty, String)> {
        let p = &self.phantom;
        let d = &self.detector;
        let a = &self.augment;
        let n = &self.network;
        let mut e = vec![
            ("seed", Ty::Int, self.seed.to_string()),
            ("paths.out", Ty::Str, format!("{:?}", self.out_dir.display().to_string())),
            ("phantom.n_exams", Ty::Int, p.n_exams.to_string()),
            ("phantom.malignant_fraction", Ty::Float, fmt_f(p.malignant_fraction)),
            ("phantom.missing_laterality_fraction", Ty::Float, fmt_f(p.missing_laterality_fraction)),
            ("phantom.vendor_weights", Ty::List, fmt_list(&p.vendor_weights)),
            ("phantom.image_height_px", Ty::Int, p.image_height_px.to_string()),
            ("phantom.image_width_px", Ty::Int, p.image_width_px.to_string()),
            ("phantom.pixel_spacing_cm", Ty::Float, fmt_f(p.pixel_spacing_cm)),
            ("phantom.mass_count_range", Ty::List, fmt_list(&p.mass_count_range)),
            ("phantom.mass_radius_range_cm", Ty::List, fmt_list(&p.mass_radius_range_cm)),
            ("phantom.lesion_contrast_range", Ty::List, fmt_list(&p.lesion_contrast_range)),
            ("phantom.irregular_fraction", Ty::Float, fmt_f(p.irregular_fraction)),
            ("phantom.nodule_count_range", Ty::List, fmt_list(&p.nodule_count_range)),
            ("phantom.nodule_contrast_range", Ty::List, fmt_list(&p.nodule_contrast_range)),
            ("phantom.nodule_irregular_fraction", Ty::Float, fmt_f(p.nodule_irregular_fraction)),
            ("phantom.asymmetry_texture_strength", Ty::Float, fmt_f(p.asymmetry_texture_strength)),
            ("phantom.write_images", Ty::Bool, self.write_images.to_string()),
            ("split.ratios", Ty::List, fmt_list(&self.split_ratios)),
            ("candidates.threshold", Ty::Float, fmt_f(d.threshold)),
            ("candidates.min_separation_px", Ty::Float, fmt_f(d.min_separation_px)),
            ("candidates.max_per_image", Ty::Int, d.max_per_image.to_string()),
            ("candidates.n_directions", Ty::Int, d.likelihood.n_directions.to_string()),
            ("candidates.n_radii", Ty::Int, d.likelihood.n_radii.to_string()),
            ("candidates.angle_tolerance_deg", Ty::Float, fmt_f(d.likelihood.angle_tolerance_deg)),
            ("candidates.gradient_min", Ty::Float, fmt_f(d.likelihood.gradient_min)),
            ("candidates.curvature_weight", Ty::Float, fmt_f(d.likelihood.curvature_weight)),
            ("patches.window_px", Ty::Int, self.patch_window_px.to_string()),
            ("patches.input_px", Ty::Int, n.input_size_px.to_string()),
            ("patches.min_lesion_dist_cm", Ty::Float, fmt_f(self.negative_sampling.min_lesion_dist_cm)),
            ("patches.min_inter_dist_cm", Ty::Float, fmt_f(self.negative_sampling.min_inter_dist_cm)),
            ("augment.blur_sigma_range", Ty::List, fmt_list(&a.blur_sigma_range)),
            ("augment.apply_probability", Ty::Float, fmt_f(a.apply_probability)),
            ("augment.scale_range", Ty::List, fmt_list(&a.scale_range)),
            ("augment.translate_range_px", Ty::List, fmt_list(&a.translate_range_px)),
            ("augment.rotate_range_deg", Ty::List, fmt_list(&a.rotate_range_deg)),
            ("network.conv_filters", Ty::List, fmt_list(&n.conv_filters)),
            ("network.conv_kernel", Ty::Int, n.conv_kernel.to_string()),
            ("network.pool_window", Ty::Int, n.pool_window.to_string()),
            ("network.pool_stride", Ty::Int, n.pool_stride.to_string()),
            ("network.dense_units", Ty::List, fmt_list(&n.dense_units)),
            ("network.dropout_rate", Ty::Float, fmt_f(n.dropout_rate)),
            ("train.batch_size", Ty::Int, self.batch_size.to_string()),
            ("train.momentum", Ty::Float, fmt_f(self.momentum)),
            ("train.patience_epochs", Ty::Int, self.patience_epochs.to_string()),
            ("train.max_epochs", Ty::Int, self.max_epochs.to_string()),
            ("train.baseline.initial_lr", Ty::Float, fmt_f(self.initial_lr[0])),
            ("train.symmetry.initial_lr", Ty::Float, fmt_f(self.initial_lr[1])),
        ];
        if let Some(v) = self.decay[0] {
            e.push(("train.baseline.decay", Ty::Float, fmt_f(v)));
        }
        if let Some(v) = self.decay[1] {
            e.push(("train.symmetry.decay", Ty::Float, fmt_f(v)));
        }
        e.extend([
            ("train.transfer", Ty::Bool, self.transfer.to_string()),
            ("eval.bootstrap_n", Ty::Int, self.bootstrap_n.to_string()),
            ("eval.ci_level", Ty::Float, fmt_f(self.ci_level)),
            ("eval.split", Ty::Str, format!("\"{}\"", self.eval_split)),
        ]);
        e
    }

    fn key_type(key: &str) -> Option<Ty> {
        match key {
            "train.baseline.decay" | "train.symmetry.decay" => Some(Ty::Float),
            _ => PipelineConfig::default()
                .entries()
                .into_iter()
                .find(|(k, _, _)| *k == key)
                .map(|(_, t, _)| t),
        }
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let int = |raw: &str| parse_int(key, raw);
        let uint = |raw: &str| parse_int(key, raw).map(|v| v as usize);
        let float = |raw: &str| parse_float(key, raw);
        let p = &mut self.phantom;
        let d = &mut self.detector;
        let a = &mut self.augment;
        let n = &mut self.network;
        match key {
            "seed" => self.seed = int(raw)?,
            "paths.out" => self.out_dir = PathBuf::from(parse_str(key, raw)?),
            "phantom.n_exams" => p.n_exams = uint(raw)?,
            "phantom.malignant_fraction" => p.malignant_fraction = float(raw)?,
            "phantom.missing_laterality_fraction" => p.missing_laterality_fraction = float(raw)?,
            "phantom.vendor_weights" => p.vendor_weights = floats(key, raw)?,
            "phantom.image_height_px" => p.image_height_px = uint(raw)?,
            "phantom.image_width_px" => p.image_width_px = uint(raw)?,
            "phantom.pixel_spacing_cm" => p.pixel_spacing_cm = float(raw)?,
            "phantom.mass_count_range" => {
                let v = ints(key, raw)?;
                p.mass_count_range = v.try_into().map_err(|_| Error::config(key, "expected 2 integers"))?;
            }
            "phantom.mass_radius_range_cm" => p.mass_radius_range_cm = floats(key, raw)?,
            "phantom.lesion_contrast_range" => p.lesion_contrast_range = floats(key, raw)?,
            "phantom.irregular_fraction" => p.irregular_fraction = float(raw)?,
            "phantom.nodule_count_range" => {
                let v = ints(key, raw)?;
                p.nodule_count_range = v.try_into().map_err(|_| Error::config(key, "expected 2 integers"))?;
            }
            "phantom.nodule_contrast_range" => p.nodule_contrast_range = floats(key, raw)?,
            "phantom.nodule_irregular_fraction" => p.nodule_irregular_fraction = float(raw)?,
            "phantom.asymmetry_texture_strength" => p.asymmetry_texture_strength = float(raw)?,
            "phantom.write_images" => self.write_images = parse_bool(key, raw)?,
            "split.ratios" => self.split_ratios = floats(key, raw)?,
            "candidates.threshold" => d.threshold = float(raw)?,
            "candidates.min_separation_px" => d.min_separation_px = float(raw)?,
            "candidates.max_per_image" => d.max_per_image = uint(raw)?,
            "candidates.n_directions" => d.likelihood.n_directions = uint(raw)?,
            "candidates.n_radii" => d.likelihood.n_radii = uint(raw)?,
            "candidates.angle_tolerance_deg" => d.likelihood.angle_tolerance_deg = float(raw)?,
            "candidates.gradient_min" => d.likelihood.gradient_min = float(raw)?,
            "candidates.curvature_weight" => d.likelihood.curvature_weight = float(raw)?,
            "patches.window_px" => self.patch_window_px = uint(raw)?,
            "patches.input_px" => n.input_size_px = uint(raw)?,
            "patches.min_lesion_dist_cm" => self.negative_sampling.min_lesion_dist_cm = float(raw)?,
            "patches.min_inter_dist_cm" => self.negative_sampling.min_inter_dist_cm = float(raw)?,
            "augment.blur_sigma_range" => a.blur_sigma_range = floats(key, raw)?,
            "augment.apply_probability" => a.apply_probability = float(raw)?,
            "augment.scale_range" => a.scale_range = floats(key, raw)?,
            "augment.translate_range_px" => a.translate_range_px = floats(key, raw)?,
            "augment.rotate_range_deg" => a.rotate_range_deg = floats(key, raw)?,
            "network.conv_filters" => n.conv_filters = ints(key, raw)?,
            "network.conv_kernel" => n.conv_kernel = uint(raw)?,
            "network.pool_window" => n.pool_window = uint(raw)?,
            "network.pool_stride" => n.pool_stride = uint(raw)?,
            "network.dense_units" => n.dense_units = ints(key, raw)?,
            "network.dropout_rate" => n.dropout_rate = float(raw)?,
            "train.batch_size" => self.batch_size = uint(raw)?,
            "train.momentum" => self.momentum = float(raw)?,
            "train.patience_epochs" => self.patience_epochs = uint(raw)?,
            "train.max_epochs" => self.max_epochs = uint(raw)?,
            "train.baseline.initial_lr" => self.initial_lr[0] = float(raw)?,
            "train.symmetry.initial_lr" => self.initial_lr[1] = float(raw)?,
            "train.baseline.decay" => self.decay[0] = Some(float(raw)?),
            "train.symmetry.decay" => self.decay[1] = Some(float(raw)?),
            "train.transfer" => self.transfer = parse_bool(key, raw)?,
            "eval.bootstrap_n" => self.bootstrap_n = uint(raw)?,
            "eval.ci_level" => self.ci_level = float(raw)?,
            "eval.split" => {
                self.eval_split = match parse_str(key, raw)?.as_str() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    other => return Err(Error::config(key, format!("expected train, val or test, got `{other}`"))),
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        PipelineConfig::parse_with(text, None)
    }

    /// Parses `text`, then applies a seed given outside the file (which
    /// satisfies the `seed` requirement on its own).
    pub fn parse_with(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, value) = line.split_once('=').ok_or_else(|| {
                Error::format("config", format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let (key, ann) = match lhs.split_once(':') {
                Some((k, t)) => (k.trim(), Some(t.trim())),
                None => (lhs.trim(), None),
            };
            let expected = PipelineConfig::key_type(key).ok_or_else(|| Error::config(key, "unknown key"))?;
            if let Some(ann) = ann {
                let ty = Ty::parse(ann).ok_or_else(|| Error::config(key, format!("unknown type `{ann}`")))?;
                if ty != expected {
                    return Err(Error::config(
                        key,
                        format!("declared as {ann}, but the key holds a {}", expected.name()),
                    ));
                }
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "set more than once"));
            }
            cfg.set(key, value.trim())?;
        }
        match seed_override {
            Some(seed) => cfg.seed = seed,
            None if !seen.contains("seed") => return Err(Error::MissingKey("seed".into())),
            None => {}
        }
        cfg.sync_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::parse_with(&text, seed_override)
    }

    /// The canonical text without output paths, so relocating a run does
    /// not change its provenance.
    pub fn hash_text(&self) -> String {
        self.to_text().lines().filter(|l| !l.starts_with("paths.")).map(|l| format!("{l}\n")).collect()
    }

    /// Canonical text form: every key, annotated, in a fixed order. Hashing
    /// this text identifies the effective configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, ty, v) in self.entries() {
            out.push_str(&format!("{k}: {} = {v}\n", ty.name()));
        }
        out
    }

    /// Propagates the root seed to the stage configs that carry their own and
    /// rescales the detector's pixel radii to the phantom geometry.
    pub fn sync_derived(&mut self) {
        let scaled = LikelihoodParams::for_radius_range(self.phantom.mass_radius_range_cm, self.phantom.pixel_spacing_cm);
        self.detector.likelihood.radius_range_px = scaled.radius_range_px;
        self.detector.likelihood.smoothing_sigma_px = scaled.smoothing_sigma_px;
        self.phantom.seed = self.seed;
        self.augment.seed = crate::rng::derive_seed(self.seed, &[crate::rng::tag("augment")]);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_derived();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                    field: format!("{section}.{field}"),
                    reason,
                },
                other => other,
            })
        };
        prefixed("phantom", self.phantom.validate())?;
        if self.split_ratios.iter().any(|&r| !(r > 0.0)) || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.ratios", "must be positive and sum to 1"));
        }
        if !(self.detector.threshold > 0.0 && self.detector.threshold <= 1.0) {
            return Err(Error::config("candidates.threshold", "must lie in (0, 1]"));
        }
        if self.detector.min_separation_px < 0.0 {
            return Err(Error::config("candidates.min_separation_px", "must be >= 0"));
        }
        if self.patch_window_px < 8 {
            return Err(Error::config("patches.window_px", "must be at least 8"));
        }
        if self.network.input_size_px > self.patch_window_px {
            return Err(Error::config("patches.input_px", "must not exceed patches.window_px"));
        }
        if !(self.negative_sampling.min_lesion_dist_cm >= 0.0 && self.negative_sampling.min_inter_dist_cm >= 0.0) {
            return Err(Error::config("patches.min_inter_dist_cm", "distances must be >= 0"));
        }
        prefixed("augment", self.augment.validate())?;
        prefixed("network", self.network.validate())?;
        for kind in [ModelKind::Baseline, ModelKind::Symmetry] {
            prefixed(&format!("train.{kind}"), self.train_config(kind).validate())?;
        }
        if self.bootstrap_n == 0 {
            return Err(Error::config("eval.bootstrap_n", "must be positive"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::config("eval.ci_level", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn network_spec(&self, kind: ModelKind) -> NetworkSpec {
        self.network.with_kind(kind)
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let i = kind_index(kind);
        TrainConfig {
            initial_lr: self.initial_lr[i],
            momentum: self.momentum,
            decay: self.decay[i].unwrap_or(self.initial_lr[i] / 200.0),
            batch_size: self.batch_size,
            patience_epochs: self.patience_epochs,
            max_epochs: self.max_epochs,
            seed: crate::rng::derive_seed(self.seed, &[crate::rng::tag("train"), i as u64]),
        }
    }

    /// Augmentation ranges converted from image pixels to network-input pixels.
    pub fn augment_for_network(&self) -> AugmentConfig {
        self.augment
            .rescaled(self.network.input_size_px as f64 / self.patch_window_px as f64)
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            n_resamples: self.bootstrap_n,
            level: self.ci_level,
            seed: crate::rng::derive_seed(self.seed, &[crate::rng::tag("bootstrap")]),
            ..BootstrapConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = PipelineConfig::default().with_seed(42);
        cfg.decay[1] = Some(1e-6);
        cfg.network.conv_filters = vec![4, 8, 8];
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn minimal_config_needs_only_seed() {
        let cfg = PipelineConfig::parse("seed = 3\n").unwrap();
        assert_eq!(cfg, PipelineConfig::default().with_seed(3));
        assert_eq!(cfg.train_config(ModelKind::Symmetry).decay, 1e-3 / 200.0);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("phantom.n_exams = 10\n", "seed"),
            ("seed = 1\nphantom.n_exams = -3\n", "phantom.n_exams"),
            ("seed = 1\nphantom.bogus = 1\n", "phantom.bogus"),
            ("seed = 1\nsplit.ratios = [0.5, 0.5]\n", "split.ratios"),
            ("seed = 1\ntrain.batch_size = 63\n", "train.baseline.batch_size"),
            ("seed = 1\nphantom.malignant_fraction = 2\n", "phantom.malignant_fraction"),
            ("seed = 1\nnetwork.conv_filters: int = [1]\n", "network.conv_filters"),
            ("seed = 1\nseed = 2\n", "seed"),
            ("seed = 1\npatches.input_px = 10\n", "input_size_px"),
        ];
        for (text, key) in cases {
            let err = PipelineConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{text:?}: {err}");
        }
    }

    #[test]
    fn annotations_and_comments() {
        let text = "# desk run\nseed: int = 9\neval.split: str = \"val\"\nphantom.write_images: bool = false\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.eval_split, Split::Val);
        assert!(!cfg.write_images);
        assert!(PipelineConfig::parse("seed = 1\nnot a line\n").is_err());
        let cfg = PipelineConfig::parse_with("paths.out = runs/a\n", Some(5)).unwrap();
        assert_eq!((cfg.seed, cfg.phantom.seed), (5, 5));
        let moved = PipelineConfig { out_dir: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(moved.hash_text(), cfg.hash_text());
    }
}
