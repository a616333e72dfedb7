//! File-based pipeline stages.
//!
//! ```text
//! <out>/phantom/manifest.json        dataset manifest (+ images/*.pgm)
//! <out>/candidates/{split}.csv       detector output per split
//! <out>/patches/{split}.bin          patch archive (+ {split}.index.json)
//! <out>/models/{kind}.ckpt           best checkpoint (+ {kind}.log.ndjson)
//! <out>/eval/report.json             metrics, intervals, comparisons
//! <out>/eval/*.csv                   per-candidate scores and curves
//! ```
//!
//! Every stage reads only what earlier stages persisted, so any stage can be
//! rerun on its own. Outputs carry the provenance of the effective config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::candidates::{detect, label_candidates, read_candidates_csv, write_candidates_csv, Candidate, CandidateLabel};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_models, roc_curve, truth_from_manifest, write_curve_csv, write_scored_csv, EvalReport, EvalSet,
    FrocUnit, ScoredRow,
};
use crate::nnet::{glorot_init, read_checkpoint, write_checkpoint, Checkpoint, ModelKind};
use crate::patches::{extract_pair, read_archive, sample_negatives, write_archive, ArchiveIndex, PatchLabel, PatchPair};
use crate::phantom::{
    generate_dataset, render_exam, split_dataset, BreastImage, DatasetManifest, Exam, ExamRecord, Split,
};
use crate::provenance::Provenance;
use crate::raster::Raster;
use crate::rng;
use crate::trainer::{score_pairs, train, transfer_from_baseline, EpochRecord};

pub const CANDIDATE_SCHEMA_VERSION: u32 = 1;
const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Paths of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.root.join("phantom")
    }

    pub fn manifest(&self) -> PathBuf {
        self.phantom_dir().join("manifest.json")
    }

    pub fn candidates(&self, split: Split) -> PathBuf {
        self.root.join("candidates").join(format!("{split}.csv"))
    }

    pub fn patches(&self, split: Split) -> (PathBuf, PathBuf) {
        let dir = self.root.join("patches");
        (dir.join(format!("{split}.bin")), dir.join(format!("{split}.index.json")))
    }

    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.ckpt"))
    }

    pub fn train_log(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.log.ndjson"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InsufficientData(format!(
            "{} does not exist; run the `{stage}` stage first",
            path.display()
        )))
    }
}

pub fn provenance(cfg: &PipelineConfig) -> Provenance {
    Provenance::new(&cfg.hash_text(), cfg.seed)
}

/// Loads the manifest and checks that it was generated from this config's
/// phantom section.
pub fn load_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = Layout::new(&cfg.out_dir).manifest();
    require(&path, "phantom")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::from_json(&text)?;
    if manifest.config != cfg.phantom {
        return Err(Error::config(
            "phantom",
            format!("section differs from the one that produced {}; rerun the phantom stage", path.display()),
        ));
    }
    Ok(manifest)
}

/// Reads an exam's images from disk when they were written, otherwise
/// renders them again from the manifest.
pub fn load_exam(layout: &Layout, manifest: &DatasetManifest, record: &ExamRecord) -> Result<Exam> {
    if record.images.iter().any(|i| i.path.is_none()) {
        return Ok(render_exam(&manifest.config, record));
    }
    let images = record
        .images
        .iter()
        .map(|img| {
            let path = layout.phantom_dir().join(img.path.as_deref().unwrap_or_default());
            let pixels = Raster::read_pgm16(&path)?;
            if pixels.shape() != (img.height, img.width) {
                return Err(Error::Shape(format!(
                    "{} is {:?}, manifest says {}x{}",
                    path.display(),
                    pixels.shape(),
                    img.height,
                    img.width
                )));
            }
            Ok(BreastImage {
                image_id: img.image_id.clone(),
                pixels,
                laterality: img.laterality,
                view: img.view,
                pixel_spacing_cm: img.pixel_spacing_cm,
                lesions: img.lesions.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Exam {
        exam_id: record.exam_id.clone(),
        patient_id: record.patient_id.clone(),
        vendor: record.vendor,
        label: record.label,
        images,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSummary {
    pub exams: [usize; 3],
    pub images: usize,
    pub lesions: usize,
}

pub fn run_phantom(cfg: &PipelineConfig) -> Result<PhantomSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let prov = provenance(cfg);
    let mut manifest = generate_dataset(&cfg.phantom)?;
    let split = split_dataset(&manifest, cfg.split_ratios, cfg.seed)
        .map_err(|e| match e {
            Error::InvalidConfig { reason, .. } => Error::config("split.ratios", reason),
            other => other,
        })?;
    manifest.assign_splits(&split);
    manifest.provenance = Some(prov.clone());
    mkdir(&layout.phantom_dir())?;
    if cfg.write_images {
        let dir = layout.phantom_dir().join("images");
        mkdir(&dir)?;
        let paths = manifest
            .exams
            .par_iter()
            .map(|record| {
                let exam = render_exam(&manifest.config, record);
                exam.images
                    .iter()
                    .map(|img| {
                        let rel = format!("images/{}.pgm", img.image_id);
                        img.pixels.write_pgm16(&layout.phantom_dir().join(&rel), &prov.line())?;
                        Ok(rel)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (record, paths) in manifest.exams.iter_mut().zip(paths) {
            for (img, p) in record.images.iter_mut().zip(paths) {
                img.path = Some(p);
            }
        }
    }
    let path = layout.manifest();
    fs::write(&path, manifest.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(PhantomSummary {
        exams: [split.train.len(), split.val.len(), split.test.len()],
        images: manifest.exams.iter().map(|e| e.images.len()).sum(),
        lesions: manifest.exams.iter().map(|e| e.lesion_count()).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSummary {
    pub split: Split,
    pub images: usize,
    pub candidates: usize,
    /// Lesion appearances (one per image a lesion is visible in).
    pub lesions: usize,
    /// Lesion appearances hit by at least one candidate.
    pub lesions_hit: usize,
}

impl CandidateSummary {
    pub fn recall(&self) -> f64 {
        if self.lesions == 0 {
            f64::NAN
        } else {
            self.lesions_hit as f64 / self.lesions as f64
        }
    }

    pub fn per_image(&self) -> f64 {
        self.candidates as f64 / self.images.max(1) as f64
    }
}

fn candidate_comment(prov: &Provenance) -> String {
    format!("candidates schema={CANDIDATE_SCHEMA_VERSION}\n{}", prov.line())
}

/// Reads one split's candidates, checking the schema line, and relabels
/// them against the manifest so positives carry their lesion ids.
pub fn load_candidates(layout: &Layout, manifest: &DatasetManifest, split: Split) -> Result<Vec<Candidate>> {
    let path = layout.candidates(split);
    require(&path, "candidates")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let first = text.lines().next().unwrap_or_default();
    let found = first
        .strip_prefix("# candidates schema=")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .unwrap_or(0);
    if found != CANDIDATE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            artifact: format!("candidate file {}", path.display()),
            found,
            expected: CANDIDATE_SCHEMA_VERSION,
        });
    }
    let cands = read_candidates_csv(&path)?;
    let mut out = Vec::with_capacity(cands.len());
    let mut i = 0;
    while i < cands.len() {
        let image_id = &cands[i].image_id;
        let j = i + cands[i..].iter().take_while(|c| &c.image_id == image_id).count();
        let img = manifest
            .exams
            .iter()
            .find(|e| e.exam_id == cands[i].exam_id)
            .and_then(|e| e.images.iter().find(|im| &im.image_id == image_id))
            .ok_or_else(|| Error::format(format!("candidate file {}", path.display()), format!("unknown image {image_id}")))?;
        let relabeled = label_candidates(&cands[i..j], &img.lesions);
        if relabeled.iter().zip(&cands[i..j]).any(|(a, b)| a.label != b.label) {
            return Err(Error::format(
                format!("candidate file {}", path.display()),
                format!("labels for {image_id} disagree with the manifest"),
            ));
        }
        out.extend(relabeled);
        i = j;
    }
    Ok(out)
}

pub fn run_candidates(cfg: &PipelineConfig) -> Result<Vec<CandidateSummary>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let manifest = load_manifest(cfg)?;
    let prov = provenance(cfg);
    mkdir(&layout.root.join("candidates"))?;
    let mut summaries = Vec::new();
    for split in SPLITS {
        let records: Vec<&ExamRecord> = manifest.exams_in(split).collect();
        let per_exam = records
            .par_iter()
            .map(|record| {
                let exam = load_exam(&layout, &manifest, record)?;
                let mut all = Vec::new();
                let mut stats = [0usize; 2];
                for img in &exam.images {
                    let cands = detect(img, &exam.exam_id, &cfg.detector)?;
                    stats[0] += img.lesions.len();
                    stats[1] += img
                        .lesions
                        .iter()
                        .filter(|l| cands.iter().any(|c| c.lesion_id == Some(l.lesion_id)))
                        .count();
                    all.extend(cands);
                }
                Ok((all, stats, exam.images.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut summary = CandidateSummary {
            split,
            images: 0,
            candidates: 0,
            lesions: 0,
            lesions_hit: 0,
        };
        let mut all = Vec::new();
        for (cands, [lesions, hit], images) in per_exam {
            summary.images += images;
            summary.candidates += cands.len();
            summary.lesions += lesions;
            summary.lesions_hit += hit;
            all.extend(cands);
        }
        write_candidates_csv(&layout.candidates(split), &all, &candidate_comment(&prov))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSummary {
    pub split: Split,
    pub pairs: usize,
    pub positives: usize,
    pub missing_contralateral: usize,
}

/// Training patches keep every positive plus negatives thinned by the
/// distance rules; validation and test keep every candidate.
pub fn run_patches(cfg: &PipelineConfig) -> Result<Vec<PatchSummary>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let manifest = load_manifest(cfg)?;
    let prov = provenance(cfg);
    mkdir(&layout.root.join("patches"))?;
    let mut summaries = Vec::new();
    for split in SPLITS {
        let cands = load_candidates(&layout, &manifest, split)?;
        let records: Vec<&ExamRecord> = manifest.exams_in(split).collect();
        let per_exam = records
            .par_iter()
            .map(|record| {
                let exam = load_exam(&layout, &manifest, record)?;
                let mut pairs = Vec::new();
                for (k, img) in exam.images.iter().enumerate() {
                    let mine: Vec<Candidate> = cands
                        .iter()
                        .filter(|c| c.exam_id == exam.exam_id && c.image_id == img.image_id)
                        .cloned()
                        .collect();
                    let chosen = if split == Split::Train {
                        let mut rng = rng::stream(cfg.seed, &[rng::tag("negatives"), record.index, k as u64]);
                        let negatives =
                            sample_negatives(&mine, &img.lesions, img.pixel_spacing_cm, cfg.negative_sampling, &mut rng);
                        let mut chosen: Vec<Candidate> =
                            mine.into_iter().filter(|c| c.label == CandidateLabel::Positive).collect();
                        chosen.extend(negatives);
                        chosen
                    } else {
                        mine
                    };
                    let contra = exam.contralateral(img);
                    for c in &chosen {
                        let pair = extract_pair(img, contra, c, cfg.patch_window_px)?;
                        pairs.push(pair.resized(cfg.network.input_size_px));
                    }
                }
                Ok(pairs)
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<PatchPair> = per_exam.into_iter().flatten().collect();
        let (bin, index) = layout.patches(split);
        write_archive(&bin, &index, &pairs, cfg.patch_window_px, Some(prov.clone()))?;
        summaries.push(PatchSummary {
            split,
            pairs: pairs.len(),
            positives: pairs.iter().filter(|p| p.label.is_positive()).count(),
            missing_contralateral: pairs.iter().filter(|p| !p.has_contralateral).count(),
        });
    }
    Ok(summaries)
}

/// Reads one split's patch archive and checks it matches the network input.
pub fn load_patches(cfg: &PipelineConfig, split: Split) -> Result<(Vec<PatchPair>, ArchiveIndex)> {
    let (bin, index) = Layout::new(&cfg.out_dir).patches(split);
    require(&index, "patches")?;
    let (pairs, idx) = read_archive(&bin, &index)?;
    if !pairs.is_empty() && idx.patch_size != cfg.network.input_size_px {
        return Err(Error::config(
            "patches.input_px",
            format!("{} holds {}px patches; rerun the patches stage", bin.display(), idx.patch_size),
        ));
    }
    Ok((pairs, idx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub epochs_run: usize,
}

pub fn run_train(
    cfg: &PipelineConfig,
    kind: ModelKind,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let spec = cfg.network_spec(kind);
    let tcfg = cfg.train_config(kind);
    let (train_pairs, _) = load_patches(cfg, Split::Train)?;
    let (val_pairs, _) = load_patches(cfg, Split::Val)?;
    let mut init_rng = rng::stream(tcfg.seed, &[rng::tag("init")]);
    let init = match kind {
        ModelKind::Symmetry if cfg.transfer => {
            let path = layout.checkpoint(ModelKind::Baseline);
            require(&path, "train --model baseline")?;
            let base = read_checkpoint(&path)?;
            if base.spec != cfg.network_spec(ModelKind::Baseline) {
                return Err(Error::config(
                    "network",
                    format!("{} was trained with a different network section", path.display()),
                ));
            }
            transfer_from_baseline(&base.params, &spec, &mut init_rng)?
        }
        _ => glorot_init(&spec, &mut init_rng)?,
    };
    let prov = provenance(cfg);
    mkdir(&layout.root.join("models"))?;
    let log_path = layout.train_log(kind);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", serde_json::json!({ "provenance": prov, "train": tcfg })).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(
        &spec,
        init,
        &train_pairs,
        &val_pairs,
        &tcfg,
        &cfg.augment_for_network(),
        &mut |rec| {
            writeln!(log, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&log_path, e))?;
            on_epoch(rec);
            Ok(())
        },
    )?;
    write_checkpoint(
        &layout.checkpoint(kind),
        &Checkpoint {
            spec,
            epoch: outcome.best_epoch,
            validation_auc: Some(outcome.best_val_auc),
            provenance: Some(prov),
            params: outcome.best_params,
        },
    )?;
    Ok(TrainSummary {
        kind,
        best_epoch: outcome.best_epoch,
        best_val_auc: outcome.best_val_auc,
        epochs_run: outcome.history.len(),
    })
}

/// Scores the evaluation split with each checkpoint (the first is the
/// reference for paired comparisons) and writes the report and CSVs.
pub fn run_eval(cfg: &PipelineConfig, checkpoints: &[PathBuf]) -> Result<EvalReport> {
    cfg.validate()?;
    if cfg.eval_split == Split::Train {
        return Err(Error::config(
            "eval.split",
            "the training archive holds sampled negatives only; evaluate on val or test",
        ));
    }
    let layout = Layout::new(&cfg.out_dir);
    let defaults: Vec<PathBuf>;
    let checkpoints = if checkpoints.is_empty() {
        defaults = [ModelKind::Baseline, ModelKind::Symmetry]
            .into_iter()
            .map(|k| layout.checkpoint(k))
            .filter(|p| p.exists())
            .collect();
        if defaults.is_empty() {
            return Err(Error::InsufficientData("no checkpoints found; run the `train` stage first".into()));
        }
        &defaults[..]
    } else {
        checkpoints
    };
    let manifest = load_manifest(cfg)?;
    let truth = truth_from_manifest(&manifest, cfg.eval_split);
    let (pairs, index) = load_patches(cfg, cfg.eval_split)?;
    let prov = provenance(cfg);
    mkdir(&layout.eval_dir())?;

    let mut models = Vec::new();
    for path in checkpoints {
        require(path, "train")?;
        let ckpt = read_checkpoint(path)?;
        if !pairs.is_empty() && ckpt.spec.input_size_px != index.patch_size {
            return Err(Error::Shape(format!(
                "{} expects {}px inputs, the {} archive holds {}px patches",
                path.display(),
                ckpt.spec.input_size_px,
                cfg.eval_split,
                index.patch_size
            )));
        }
        let name = ckpt.spec.kind.to_string();
        if models.iter().any(|(n, _): &(String, EvalSet)| *n == name) {
            return Err(Error::config("checkpoints", format!("two checkpoints of kind {name}")));
        }
        let scores = score_pairs(&ckpt.spec, &ckpt.params, &pairs, cfg.batch_size)?;
        let rows: Vec<ScoredRow> = index
            .entries
            .iter()
            .zip(&scores)
            .map(|(e, &s)| ScoredRow {
                exam_id: e.exam_id.clone(),
                image_id: e.image_id.clone(),
                row: e.center_rc[0],
                col: e.center_rc[1],
                score: e.candidate_score,
                label: match e.label {
                    PatchLabel::Positive => CandidateLabel::Positive,
                    PatchLabel::Negative => CandidateLabel::Negative,
                },
                lesion_id: e.lesion_id,
                has_contralateral: e.has_contralateral,
                model_score: s,
            })
            .collect();
        let dir = layout.eval_dir();
        write_scored_csv(&dir.join(format!("scores_{name}.csv")), &rows, &prov.line())?;
        let cands: Vec<_> = rows.iter().map(ScoredRow::to_scored).collect();
        let set = EvalSet::build(&cands, &truth)?;

        let (pos, neg): (Vec<_>, Vec<_>) = cands.iter().partition(|c| c.positive);
        let pos: Vec<f64> = pos.iter().map(|c| c.score).collect();
        let neg: Vec<f64> = neg.iter().map(|c| c.score).collect();
        if let Ok(roc) = roc_curve(&pos, &neg) {
            let pts: Vec<_> = roc.iter().map(|p| (p.threshold, p.fpr, p.tpr)).collect();
            write_curve_csv(&dir.join(format!("roc_{name}.csv")), &pts, &format!("{}\nthreshold,fpr,tpr", prov.line()))?;
        }
        for (unit, label) in [(FrocUnit::Image, "image"), (FrocUnit::Exam, "exam")] {
            if let Ok(curve) = crate::eval::froc_blocks(&set.view(), unit) {
                write_curve_csv(
                    &dir.join(format!("froc_{label}_{name}.csv")),
                    &curve.csv_points(),
                    &format!("{}\nthreshold,fp_per_{label},sensitivity", prov.line()),
                )?;
            }
        }
        models.push((name, set));
    }
    let report = evaluate_models(&models, &cfg.eval_split.to_string(), &cfg.bootstrap(), Some(prov))?;
    let path = layout.report();
    fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Runs every stage in order, reporting progress through `log`.
pub fn run_pipeline(cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<EvalReport> {
    let p = run_phantom(cfg)?;
    log(&format!(
        "phantom: {} images, {} lesions; exams train/val/test = {}/{}/{}",
        p.images, p.lesions, p.exams[0], p.exams[1], p.exams[2]
    ));
    for s in run_candidates(cfg)? {
        log(&format!(
            "candidates[{}]: {:.2} per image, lesion recall {:.3}",
            s.split,
            s.per_image(),
            s.recall()
        ));
    }
    for s in run_patches(cfg)? {
        log(&format!(
            "patches[{}]: {} pairs, {} positive, {} without contra-lateral",
            s.split, s.pairs, s.positives, s.missing_contralateral
        ));
    }
    for kind in [ModelKind::Baseline, ModelKind::Symmetry] {
        let t = run_train(cfg, kind, &mut |r| {
            log(&format!(
                "train[{kind}] epoch {}: loss {:.4}, val AUC {:.4}",
                r.epoch, r.mean_loss, r.val_auc
            ))
        })?;
        log(&format!(
            "train[{kind}]: best epoch {} of {}, val AUC {:.4}",
            t.best_epoch, t.epochs_run, t.best_val_auc
        ));
    }
    run_eval(cfg, &[])
}
