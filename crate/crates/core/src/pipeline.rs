//! End-to-end processing (prechecks, segmentation, boundary fit, quality
//! gate, normalization, encoding) and the file-based enrollment gallery.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{build_pairs, report, score_pairs, DatasetRecord, EvalReport, Eye, Protocol, RocCurve};
use crate::gabor::{build_bank, encode, GaborBank, IrisTemplate, DEFAULT_WAVELENGTH};
use crate::gattu::{self, NetworkWeights, BAND_HIGH, BAND_LOW, BAND_TOPOLOGY};
use crate::geometry::{
    fit_boundaries_with, rubber_sheet, rubber_sheet_mask, HoughConfig, IrisBoundaries, NormalizedIris,
    NormalizedMask,
};
use crate::imaging::{load_gray, EyeImage, MaskImage};
use crate::matcher::{decide, match_shifted, Decision, DecisionThreshold, MatchResult, DEFAULT_MAX_SHIFT};
use crate::quality::{compute_metrics_with, gate, precheck, GateResult, QualityReport, QualityThresholds, SharpnessPrecheck};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaborConfig {
    pub wavelengths: Vec<f64>,
}

impl Default for GaborConfig {
    fn default() -> Self {
        Self {
            wavelengths: vec![DEFAULT_WAVELENGTH],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// GAUW weights file; when absent the hand-set intensity-band network is used.
    pub weights: Option<PathBuf>,
    pub max_shift: usize,
    pub thresholds: QualityThresholds,
    pub gabor: GaborConfig,
    pub matcher: DecisionThreshold,
    pub hough: HoughConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: None,
            max_shift: DEFAULT_MAX_SHIFT,
            thresholds: QualityThresholds::default(),
            gabor: GaborConfig::default(),
            matcher: DecisionThreshold::default(),
            hough: HoughConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // weights are relative to the config file
        if let (Some(w), Some(dir)) = (&cfg.weights, path.parent()) {
            if w.is_relative() {
                cfg.weights = Some(dir.join(w));
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.matcher.validate()?;
        build_bank(&self.gabor.wavelengths)?;
        if self.max_shift >= crate::geometry::NORM_WIDTH {
            return Err(Error::Config(format!("max_shift {} is not below 512", self.max_shift)));
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        match &self.weights {
            Some(w) if !w.is_file() => Err(Error::Config(format!("weights file {} does not exist", w.display()))),
            _ => Ok(()),
        }
    }

    pub fn bank(&self) -> Result<GaborBank> {
        build_bank(&self.gabor.wavelengths)
    }

    pub fn network(&self) -> Result<NetworkWeights> {
        match &self.weights {
            Some(p) => NetworkWeights::load(p),
            None => band_network(),
        }
    }
}

pub fn band_network() -> Result<NetworkWeights> {
    NetworkWeights::band(BAND_TOPOLOGY, BAND_LOW, BAND_HIGH)
}

/// Loaded models and parameters, reusable across images.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub network: NetworkWeights,
    pub bank: GaborBank,
}

#[derive(Debug, Clone)]
pub struct Processed {
    pub precheck: SharpnessPrecheck,
    pub mask: MaskImage,
    pub bounds: IrisBoundaries,
    pub quality: QualityReport,
    pub gate: GateResult,
    pub normalized: NormalizedIris,
    pub normalized_mask: NormalizedMask,
    pub template: IrisTemplate,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        config.check_files()?;
        let network = config.network()?;
        let bank = config.bank()?;
        Ok(Self { config, network, bank })
    }

    pub fn segment(&self, eye: &EyeImage) -> Result<MaskImage> {
        gattu::forward(eye, &self.network)
            .map(|o| o.into_mask())
            .map_err(|e| e.at_stage("segment"))
    }

    /// Runs every stage. A failed gate is reported in `gate`, not as an
    /// error; callers decide whether to stop.
    pub fn process(&self, eye: &EyeImage) -> Result<Processed> {
        let pre = precheck(eye.image()).map_err(|e| e.at_stage("precheck"))?;
        let mask = self.segment(eye)?;
        let bounds = fit_boundaries_with(&mask, &self.config.hough).map_err(|e| e.at_stage("fit"))?;
        let quality = compute_metrics_with(eye, &bounds, &mask, &self.config.thresholds)
            .map_err(|e| e.at_stage("quality"))?;
        let gate_result = gate(&quality, &self.config.thresholds);
        let normalized = rubber_sheet(eye.image(), &bounds).map_err(|e| e.at_stage("normalize"))?;
        let normalized_mask = rubber_sheet_mask(&mask, &bounds).map_err(|e| e.at_stage("normalize"))?;
        let template = encode(&normalized, &normalized_mask, &self.bank).map_err(|e| e.at_stage("encode"))?;
        Ok(Processed {
            precheck: pre,
            mask,
            bounds,
            quality,
            gate: gate_result,
            normalized,
            normalized_mask,
            template,
        })
    }

    /// `process` with the gate enforced.
    pub fn template_for(&self, eye: &EyeImage) -> Result<Processed> {
        let p = self.process(eye)?;
        p.gate.clone().into_result()?;
        Ok(p)
    }

    pub fn load_eye(path: &Path) -> Result<EyeImage> {
        load_gray(path).and_then(EyeImage::new).map_err(|e| e.at_stage("load"))
    }
}

/// Templates for manifest records: `.irt` paths are read directly, anything
/// else is treated as an eye image and run through the pipeline.
pub fn evaluate(
    p: &Pipeline,
    records: &[DatasetRecord],
    protocol: Protocol,
    seed: u64,
    enforce_gate: bool,
) -> Result<(RocCurve, EvalReport)> {
    let pairs = build_pairs(records, protocol, seed)?;
    let mut gate_failures = 0;
    let scores = score_pairs(&pairs, p.config.max_shift, |i| {
        let path = &records[i].template_path;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("irt")) {
            return IrisTemplate::load(path);
        }
        let processed = p.process(&Pipeline::load_eye(path)?)?;
        if !processed.gate.passed {
            gate_failures += 1;
            if enforce_gate {
                return Err(Error::QualityGate(processed.gate.failures));
            }
        }
        Ok(processed.template)
    });
    let (curve, mut rep) = report(records, &scores, protocol, seed)?;
    rep.gate_failures = gate_failures;
    Ok((curve, rep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub subject_id: String,
    pub eye: Eye,
    /// File name inside the gallery directory.
    pub template_path: PathBuf,
    pub created_at: String,
    pub quality: QualityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub subject_id: String,
    pub eye: Eye,
    pub decision: Decision,
    pub result: MatchResult,
}

pub const INDEX_FILE: &str = "index.json";
pub const LOCK_FILE: &str = ".lock";

/// Directory of `.irt` templates plus a JSON index.
#[derive(Debug, Clone)]
pub struct Gallery {
    dir: PathBuf,
}

/// Held while the gallery is being modified; removes the lock file on drop.
struct WriteLock {
    path: PathBuf,
    _file: File,
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn check_subject(subject: &str) -> Result<()> {
    let ok = !subject.is_empty()
        && subject.len() <= 64
        && subject.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !subject.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Gallery(format!(
            "subject id '{subject}' must be 1-64 characters of [A-Za-z0-9_.], not starting with '.'"
        )))
    }
}

impl Gallery {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> Result<WriteLock> {
        let path = self.dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(WriteLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Gallery(format!(
                "{} exists: another writer holds the gallery",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn entries(&self) -> Result<Vec<GalleryEntry>> {
        let path = self.dir.join(INDEX_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Gallery(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn write_entries(&self, entries: &[GalleryEntry]) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        let text = serde_json::to_string_pretty(entries).expect("entries serialize");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn find(&self, subject: &str, eye: Eye) -> Result<Option<GalleryEntry>> {
        Ok(self.entries()?.into_iter().find(|e| e.subject_id == subject && e.eye == eye))
    }

    pub fn template_path(&self, entry: &GalleryEntry) -> PathBuf {
        self.dir.join(&entry.template_path)
    }

    /// Stores an already-gated template.
    pub fn insert(
        &self,
        subject: &str,
        eye: Eye,
        template: &IrisTemplate,
        quality: QualityReport,
        replace: bool,
    ) -> Result<GalleryEntry> {
        check_subject(subject)?;
        let _lock = self.lock()?;
        let mut entries = self.entries()?;
        let existing = entries.iter().position(|e| e.subject_id == subject && e.eye == eye);
        if existing.is_some() && !replace {
            return Err(Error::Duplicate {
                subject: subject.into(),
                eye: eye.to_string(),
            });
        }
        let file = PathBuf::from(format!("{subject}-{eye}.irt"));
        template.save(self.dir.join(&file))?;
        let entry = GalleryEntry {
            subject_id: subject.into(),
            eye,
            template_path: file,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            quality,
        };
        match existing {
            Some(i) => entries[i] = entry.clone(),
            None => entries.push(entry.clone()),
        }
        self.write_entries(&entries)?;
        Ok(entry)
    }

    pub fn enroll(&self, p: &Pipeline, eye_img: &EyeImage, subject: &str, eye: Eye, replace: bool) -> Result<GalleryEntry> {
        check_subject(subject)?;
        if !replace && self.find(subject, eye)?.is_some() {
            return Err(Error::Duplicate {
                subject: subject.into(),
                eye: eye.to_string(),
            });
        }
        let processed = p.template_for(eye_img)?;
        self.insert(subject, eye, &processed.template, processed.quality, replace)
    }

    pub fn verify(&self, p: &Pipeline, eye_img: &EyeImage, subject: &str, eye: Eye) -> Result<Verification> {
        let entry = self.find(subject, eye)?.ok_or_else(|| Error::NotEnrolled {
            subject: subject.into(),
            eye: eye.to_string(),
        })?;
        let stored = IrisTemplate::load(self.template_path(&entry)).map_err(|e| e.at_stage("gallery"))?;
        let probe = p.template_for(eye_img)?;
        let result = match_shifted(&probe.template, &stored, p.config.max_shift).map_err(|e| e.at_stage("match"))?;
        Ok(Verification {
            subject_id: subject.into(),
            eye,
            decision: decide(&result, &p.config.matcher),
            result,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("[thresholds]"));
        assert!(text.contains("hd_threshold = 0.32"));
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[gabor]\nwavelengths = [0.0]").is_err());
        assert!(PipelineConfig::from_toml("[matcher]\nhd_threshold = 2.0").is_err());
        let missing = PipelineConfig {
            weights: Some("/nonexistent/w.gauw".into()),
            ..cfg
        };
        assert!(missing.check_files().is_err());
    }

    #[test]
    fn subject_ids() {
        assert!(check_subject("s001").is_ok());
        for bad in ["", "a/b", "..", "a-b", ".hidden"] {
            assert!(check_subject(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn gallery_insert_and_lock() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gallery::open(dir.path()).unwrap();
        let t = IrisTemplate::from_words(1, 64, 1, vec![5], vec![!0]).unwrap();
        let q = crate::quality::QualityReport {
            overall_quality: 80.0,
            grayscale_utilization: 7.0,
            iris_pupil_contrast: 60.0,
            iris_pupil_concentricity: 100.0,
            iris_pupil_ratio: 35.0,
            iris_sclera_contrast: 30.0,
            margin_adequacy: 100.0,
            pupil_boundary_circularity: 95.0,
            sharpness: 90.0,
            usable_iris_area: 95.0,
        };
        let e = g.insert("s1", Eye::Left, &t, q, false).unwrap();
        assert_eq!(IrisTemplate::load(g.template_path(&e)).unwrap(), t);
        assert!(matches!(g.insert("s1", Eye::Left, &t, q, false), Err(Error::Duplicate { .. })));
        g.insert("s1", Eye::Left, &t, q, true).unwrap();
        g.insert("s1", Eye::Right, &t, q, false).unwrap();
        assert_eq!(g.entries().unwrap().len(), 2);
        assert!(!dir.path().join(LOCK_FILE).exists());
        let held = g.lock().unwrap();
        assert!(g.insert("s2", Eye::Left, &t, q, false).unwrap_err().to_string().contains("another writer"));
        drop(held);
        assert!(g.find("s2", Eye::Left).unwrap().is_none());
    }
}
