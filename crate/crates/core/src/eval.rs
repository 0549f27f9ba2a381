//! Manifests, feature extraction with an on-disk cache, the cross-dataset
//! protocol and report writers.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{build_single_dictionary, Codebook, KmeansConfig};
use crate::encoder::{encode_image, EncodingMode};
use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};
use crate::imgcore::{load_image, resize_to_height, RgbImage, STANDARD_HEIGHT};
use crate::preprocess::{prepare_channels, NormalizationParams};
use crate::surf::HessianConfig;
use crate::svm::{best_c, cv_curve, train_multiclass, CvConfig, Prediction, SvmModel};
use crate::{hog, lbp, surf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Drusen,
    Exudate,
}

impl Label {
    /// Fixed class order used by every matrix and model.
    pub const ALL: [Label; 3] = [Label::Normal, Label::Drusen, Label::Exudate];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Drusen => "drusen",
            Label::Exudate => "exudate",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "drusen" => Ok(Label::Drusen),
            "exudate" | "exudates" => Ok(Label::Exudate),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Label,
    pub dataset: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

#[derive(Deserialize)]
struct RawRecord {
    path: String,
    label: String,
    dataset: String,
    split: String,
}

impl DatasetManifest {
    /// Validates labels, splits and path uniqueness.
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.path.clone()) {
                return Err(Error::Manifest(format!("duplicate path {}", r.path.display())));
            }
            if r.split != "A" && r.split != "B" {
                return Err(Error::Manifest(format!("split must be A or B, got {:?}", r.split)));
            }
        }
        Ok(Self { records })
    }

    /// Parses CSV (`path,label,dataset,split`) or a JSON array of the same
    /// fields. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let trimmed = text.trim_start();
        let raw: Vec<RawRecord> = if trimmed.starts_with('[') {
            serde_json::from_str(trimmed)?
        } else {
            let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(trimmed.as_bytes());
            let headers = rd.headers()?.clone();
            if headers.iter().collect::<Vec<_>>() != ["path", "label", "dataset", "split"] {
                return Err(Error::Manifest(format!("expected header path,label,dataset,split, got {headers:?}")));
            }
            rd.deserialize().collect::<std::result::Result<_, _>>()?
        };
        let records = raw
            .into_iter()
            .map(|r| {
                let p = PathBuf::from(&r.path);
                Ok(ManifestRecord {
                    path: if p.is_absolute() { p } else { base.join(p) },
                    label: r.label.parse()?,
                    dataset: r.dataset,
                    split: r.split.trim().to_ascii_uppercase(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn records_in(&self, split: &str) -> impl Iterator<Item = (usize, &ManifestRecord)> + '_ {
        let split = split.to_string();
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Image counts per split and label.
    pub fn counts(&self) -> BTreeMap<String, [usize; 3]> {
        let mut out: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.split.clone()).or_default()[r.label.index()] += 1;
        }
        out
    }

    pub fn check_files_exist(&self) -> Result<()> {
        for r in &self.records {
            if !r.path.is_file() {
                return Err(Error::Manifest(format!("missing image {}", r.path.display())));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "dataset", "split"])?;
        for r in &self.records {
            w.write_record([r.path.to_string_lossy().as_ref(), r.label.name(), &r.dataset, &r.split])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    DatasetManifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Rows are actual classes, columns predicted, both in [`Label::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[usize; 3]; 3]);

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sums(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.0[i].iter().sum())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual\\predicted,normal,drusen,exudate\n");
        for (l, row) in Label::ALL.iter().zip(&self.0) {
            s.push_str(&format!("{},{},{},{}\n", l, row[0], row[1], row[2]));
        }
        s
    }
}

pub fn confusion(preds: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, l) in preds.iter().zip(labels) {
        cm.0[l.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// Percentage of correctly classified images.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    Ok(100.0 * cm.trace() as f64 / total as f64)
}

/// Abnormal images (drusen or exudate) predicted normal.
pub fn false_negative_count(cm: &ConfusionMatrix) -> usize {
    cm.0[Label::Drusen.index()][Label::Normal.index()] + cm.0[Label::Exudate.index()][Label::Normal.index()]
}

/// Bump when any extractor changes its output for the same input.
pub const EXTRACTOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub kinds: Vec<DescriptorKind>,
    pub normalization: NormalizationParams,
    pub hessian: HessianConfig,
    pub height: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            kinds: DescriptorKind::ALL.to_vec(),
            normalization: NormalizationParams::default(),
            hessian: HessianConfig::default(),
            height: STANDARD_HEIGHT,
        }
    }
}

impl ExtractionConfig {
    /// Disables sub-pixel keypoint refinement.
    pub fn without_refinement(mut self) -> Self {
        self.hessian.refine = false;
        self
    }
}

/// Resize, normalize and run every requested extractor.
pub fn extract_image(img: &RgbImage, cfg: &ExtractionConfig) -> Result<FeatureSet> {
    let resized = resize_to_height(img, cfg.height)?;
    let prepared = prepare_channels(&resized, cfg.normalization)?;
    let mut set = FeatureSet::new();
    for &kind in &cfg.kinds {
        set.insert(match kind {
            DescriptorKind::Surf => surf::sparse_surf(&prepared, &cfg.hessian)?,
            DescriptorKind::Dsurf => surf::dense_surf(&prepared)?,
            DescriptorKind::Hog => hog::hog_image(&prepared)?,
            DescriptorKind::Lbp => lbp::lbp_image(&prepared)?,
        });
    }
    Ok(set)
}

/// Cache key for one image file: content hash, extractor version and
/// parameters.
pub fn cache_key(file_bytes: &[u8], cfg: &ExtractionConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(file_bytes);
    h.update(EXTRACTOR_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(&(&cfg.normalization, &cfg.hessian, cfg.height))?);
    Ok(hex::encode(h.finalize()))
}

fn cache_file(dir: &Path, kind: DescriptorKind) -> PathBuf {
    dir.join(format!("{kind}.rbfm"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Whether features came from the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    Disabled,
}

/// Loads one image and extracts its features, reusing cached matrices under
/// `cache_root` when the key matches.
pub fn extract_file(path: &Path, cfg: &ExtractionConfig, cache_root: Option<&Path>) -> Result<(FeatureSet, CacheStatus)> {
    let Some(root) = cache_root else {
        return Ok((extract_image(&load_image(path)?, cfg)?, CacheStatus::Disabled));
    };
    let bytes = fs::read(path)?;
    let dir = root.join(cache_key(&bytes, cfg)?);
    if cfg.kinds.iter().all(|&k| cache_file(&dir, k).is_file()) {
        let mut set = FeatureSet::new();
        for &k in &cfg.kinds {
            let m = FeatureMatrix::read_from(std::io::BufReader::new(fs::File::open(cache_file(&dir, k))?))?;
            if m.kind() != k {
                return Err(Error::Integrity(format!("cache entry {} holds {}", dir.display(), m.kind())));
            }
            set.insert(m);
        }
        return Ok((set, CacheStatus::Hit));
    }
    let img = crate::imgcore::from_dynamic(&image::load_from_memory(&bytes).map_err(|source| Error::ImageRead {
        path: path.to_path_buf(),
        source,
    })?)?;
    let set = extract_image(&img, cfg)?;
    fs::create_dir_all(&dir)?;
    for &k in &cfg.kinds {
        let mut buf = Vec::new();
        set.require(k)?.write_to(&mut buf)?;
        write_atomic(&cache_file(&dir, k), &buf)?;
    }
    Ok((set, CacheStatus::Miss))
}

/// Per-record extraction outcome, aligned with the manifest.
#[derive(Debug, Default)]
pub struct Corpus {
    pub features: Vec<std::result::Result<FeatureSet, String>>,
    pub cache_hits: usize,
}

impl Corpus {
    pub fn failures(&self) -> usize {
        self.features.iter().filter(|f| f.is_err()).count()
    }
}

pub fn extract_corpus(manifest: &DatasetManifest, cfg: &ExtractionConfig, cache_root: Option<&Path>) -> Corpus {
    let results: Vec<_> = manifest
        .records
        .par_iter()
        .map(|r| extract_file(&r.path, cfg, cache_root))
        .collect();
    let mut corpus = Corpus::default();
    for (r, res) in manifest.records.iter().zip(results) {
        match res {
            Ok((set, status)) => {
                corpus.cache_hits += (status == CacheStatus::Hit) as usize;
                corpus.features.push(Ok(set));
            }
            Err(e) => {
                log::warn!("excluding {}: {e}", r.path.display());
                corpus.features.push(Err(e.to_string()));
            }
        }
    }
    corpus
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub modes: Vec<EncodingMode>,
    pub k_grid: Vec<usize>,
    pub train_split: String,
    pub test_split: String,
    pub kmeans: KmeansConfig,
    pub cv: CvConfig,
    /// At most this many descriptors per image enter k-means (evenly spaced).
    pub per_image_cap: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modes: EncodingMode::ALL.to_vec(),
            k_grid: (1..=10).map(|i| 10 * i).collect(),
            train_split: "A".into(),
            test_split: "B".into(),
            kmeans: KmeansConfig::default(),
            cv: CvConfig::default(),
            per_image_cap: None,
        }
    }
}

impl ExperimentConfig {
    /// Same settings with the splits swapped.
    pub fn reversed(&self) -> Self {
        Self {
            train_split: self.test_split.clone(),
            test_split: self.train_split.clone(),
            ..self.clone()
        }
    }

    /// Checks the configuration against a manifest before any extraction.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.modes.is_empty() || self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::InvalidParameter("need at least one mode and positive K values".into()));
        }
        if self.train_split == self.test_split {
            return Err(Error::InvalidParameter("train and test split must differ".into()));
        }
        for split in [&self.train_split, &self.test_split] {
            if manifest.records_in(split).next().is_none() {
                return Err(Error::Manifest(format!("split {split} is empty")));
            }
        }
        let train: HashSet<&Path> = manifest.records_in(&self.train_split).map(|(_, r)| r.path.as_path()).collect();
        if manifest.records_in(&self.test_split).any(|(_, r)| train.contains(r.path.as_path())) {
            return Err(Error::Manifest("an image appears in both splits".into()));
        }
        Ok(())
    }

    /// Descriptor kinds needed by the configured modes.
    pub fn kinds(&self) -> Vec<DescriptorKind> {
        let mut kinds: Vec<DescriptorKind> = self.modes.iter().flat_map(|m| m.kinds()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
    }
}

/// Codebooks plus the classifier trained on their histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPipeline {
    pub mode: EncodingMode,
    pub k: usize,
    pub codebooks: Vec<Codebook>,
    pub model: SvmModel,
    pub cv_curve: Vec<(f64, f64)>,
}

impl TrainedPipeline {
    pub fn predict(&self, features: &FeatureSet) -> Result<(Label, Prediction)> {
        let h = encode_image(features, &self.codebooks, self.mode)?;
        let p = self.model.predict_detailed(&h.values)?;
        let label = Label::from_index(p.class).ok_or_else(|| Error::Integrity(format!("model class {}", p.class)))?;
        Ok((label, p))
    }
}

/// One dictionary per kind, each from the pooled training descriptors.
pub fn build_codebooks(
    train: &[&FeatureSet],
    kinds: &[DescriptorKind],
    k: usize,
    kmeans: &KmeansConfig,
    per_image_cap: Option<usize>,
) -> Result<Vec<Codebook>> {
    kinds
        .iter()
        .map(|&kind| {
            let mats = train.iter().map(|s| s.require(kind)).collect::<Result<Vec<_>>>()?;
            build_single_dictionary(&mats, kind, k, kmeans, per_image_cap)
        })
        .collect()
}

pub fn encode_all(sets: &[&FeatureSet], codebooks: &[Codebook], mode: EncodingMode) -> Result<Vec<Vec<f64>>> {
    sets.par_iter()
        .map(|s| Ok(encode_image(s, codebooks, mode)?.values))
        .collect()
}

/// Grid-searches C by cross-validation, then trains on all of `x`.
pub fn fit_classifier(x: &[Vec<f64>], y: &[Label], cv: &CvConfig) -> Result<(SvmModel, Vec<(f64, f64)>)> {
    let ids: Vec<usize> = y.iter().map(|l| l.index()).collect();
    let curve = cv_curve(x, &ids, cv)?;
    let mut model = train_multiclass(x, &ids, best_c(&curve))?;
    model.class_names = Label::ALL.iter().map(|l| l.name().to_string()).collect();
    Ok((model, curve))
}

/// Trains a complete pipeline for one mode and K.
pub fn train_pipeline(
    train: &[&FeatureSet],
    labels: &[Label],
    mode: EncodingMode,
    k: usize,
    kmeans: &KmeansConfig,
    cv: &CvConfig,
    per_image_cap: Option<usize>,
) -> Result<TrainedPipeline> {
    let codebooks = build_codebooks(train, &mode.kinds(), k, kmeans, per_image_cap)?;
    let x = encode_all(train, &codebooks, mode)?;
    let (mut model, cv_curve) = fit_classifier(&x, labels, cv)?;
    model.codebook_hashes = codebooks.iter().map(Codebook::content_hash).collect::<Result<_>>()?;
    Ok(TrainedPipeline {
        mode,
        k,
        codebooks,
        model,
        cv_curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: EncodingMode,
    pub k: usize,
    pub accuracy: f64,
    pub bestc: f64,
    pub cv_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub false_negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMax {
    pub mode: EncodingMode,
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedImage {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub train_split: String,
    pub test_split: String,
    pub train_counts: [usize; 3],
    pub test_counts: [usize; 3],
    pub k_grid: Vec<usize>,
    pub modes: Vec<EncodingMode>,
    pub rows: Vec<ReportRow>,
    pub max: Vec<ModeMax>,
    pub excluded: Vec<ExcludedImage>,
}

/// Wall-clock seconds per stage; kept out of [`Report`] so reports stay
/// byte-identical across runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub extract: f64,
    pub codebook: f64,
    pub encode: f64,
    pub train: f64,
    pub test: f64,
}

impl Report {
    pub fn row(&self, mode: EncodingMode, k: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.k == k)
    }

    pub fn max_for(&self, mode: EncodingMode) -> Option<&ModeMax> {
        self.max.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }

    /// K rows by mode columns, then a `Max` row; accuracies with 4 decimals.
    pub fn accuracy_csv(&self) -> String {
        let mut s = String::from("K");
        for m in &self.modes {
            s.push_str(&format!(",{m}"));
        }
        s.push('\n');
        for &k in &self.k_grid {
            s.push_str(&k.to_string());
            for &m in &self.modes {
                match self.row(m, k) {
                    Some(r) => s.push_str(&format!(",{:.4}", r.accuracy)),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s.push_str("Max");
        for &m in &self.modes {
            match self.max_for(m) {
                Some(r) => s.push_str(&format!(",{:.4}", r.accuracy)),
                None => s.push(','),
            }
        }
        s.push('\n');
        s
    }

    /// Writes `report.json`, `accuracy.csv`, `accuracy.svg` and one
    /// confusion CSV per cell into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("accuracy.csv"), self.accuracy_csv())?;
        fs::write(dir.join("accuracy.svg"), render_accuracy_svg(self))?;
        for r in &self.rows {
            fs::write(dir.join(format!("confusion_{}_k{}.csv", r.mode, r.k)), r.confusion.to_csv())?;
        }
        Ok(())
    }
}

fn split_members<'a>(manifest: &'a DatasetManifest, corpus: &'a Corpus, split: &str, excluded: &mut Vec<ExcludedImage>) -> (Vec<&'a FeatureSet>, Vec<Label>) {
    let mut sets = Vec::new();
    let mut labels = Vec::new();
    for (i, r) in manifest.records_in(split) {
        match &corpus.features[i] {
            Ok(s) => {
                sets.push(s);
                labels.push(r.label);
            }
            Err(e) => excluded.push(ExcludedImage {
                path: r.path.clone(),
                reason: e.clone(),
            }),
        }
    }
    (sets, labels)
}

fn counts(labels: &[Label]) -> [usize; 3] {
    let mut c = [0; 3];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

/// Runs every (mode, K) cell: dictionaries on the training split, C by
/// cross-validation, final model on the full training split, evaluation on
/// the test split.
pub fn run_experiment(cfg: &ExperimentConfig, manifest: &DatasetManifest, corpus: &Corpus) -> Result<(Report, Timing)> {
    cfg.validate(manifest)?;
    if corpus.features.len() != manifest.records.len() {
        return Err(Error::LengthMismatch(corpus.features.len(), manifest.records.len()));
    }
    let mut excluded = Vec::new();
    let (train, train_labels) = split_members(manifest, corpus, &cfg.train_split, &mut excluded);
    let (test, test_labels) = split_members(manifest, corpus, &cfg.test_split, &mut excluded);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Manifest("no usable images left in a split".into()));
    }
    let mut timing = Timing::default();
    let mut rows = Vec::new();
    for &k in &cfg.k_grid {
        let t = Instant::now();
        let kinds = cfg.kinds();
        let books = build_codebooks(&train, &kinds, k, &cfg.kmeans, cfg.per_image_cap)?;
        timing.codebook += t.elapsed().as_secs_f64();
        for &mode in &cfg.modes {
            let mine: Vec<Codebook> = books.iter().filter(|b| mode.kinds().contains(&b.kind)).cloned().collect();
            let t = Instant::now();
            let xtr = encode_all(&train, &mine, mode)?;
            let xte = encode_all(&test, &mine, mode)?;
            timing.encode += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let (model, curve) = fit_classifier(&xtr, &train_labels, &cfg.cv)?;
            timing.train += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let preds = xte
                .iter()
                .map(|h| Ok(Label::from_index(model.predict(h)?).expect("model classes are labels")))
                .collect::<Result<Vec<_>>>()?;
            timing.test += t.elapsed().as_secs_f64();
            let cm = confusion(&preds, &test_labels)?;
            let cv_accuracy = curve.iter().find(|p| p.0 == model.c).map_or(f64::NAN, |p| p.1);
            log::info!("{}->{} {mode} K={k}: {:.4}%", cfg.train_split, cfg.test_split, accuracy(&cm)?);
            rows.push(ReportRow {
                mode,
                k,
                accuracy: accuracy(&cm)?,
                bestc: model.c,
                cv_accuracy,
                confusion: cm,
                false_negatives: false_negative_count(&cm),
            });
        }
    }
    // table order: modes as configured, K ascending within each
    rows.sort_by_key(|r| (cfg.modes.iter().position(|m| *m == r.mode), r.k));
    let max = cfg
        .modes
        .iter()
        .map(|&mode| {
            let best = rows
                .iter()
                .filter(|r| r.mode == mode)
                .fold(None::<&ReportRow>, |b, r| match b {
                    Some(b) if b.accuracy >= r.accuracy => Some(b),
                    _ => Some(r),
                })
                .expect("one row per mode and K");
            ModeMax {
                mode,
                k: best.k,
                accuracy: best.accuracy,
            }
        })
        .collect();
    Ok((
        Report {
            train_split: cfg.train_split.clone(),
            test_split: cfg.test_split.clone(),
            train_counts: counts(&train_labels),
            test_counts: counts(&test_labels),
            k_grid: cfg.k_grid.clone(),
            modes: cfg.modes.clone(),
            rows,
            max,
            excluded,
        },
        timing,
    ))
}

/// Both cross-dataset directions, sharing one extraction pass.
pub fn sweep(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    extraction: &ExtractionConfig,
    cache_root: Option<&Path>,
) -> Result<Vec<(Report, Timing)>> {
    cfg.validate(manifest)?;
    let t = Instant::now();
    let extraction = ExtractionConfig {
        kinds: cfg.kinds(),
        ..extraction.clone()
    };
    let corpus = extract_corpus(manifest, &extraction, cache_root);
    let extract_secs = t.elapsed().as_secs_f64();
    [cfg.clone(), cfg.reversed()]
        .iter()
        .map(|c| {
            let (report, mut timing) = run_experiment(c, manifest, &corpus)?;
            timing.extract = extract_secs;
            Ok((report, timing))
        })
        .collect()
}

const PALETTE: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

/// Accuracy-versus-K line chart, one polyline per mode with its maximum
/// marked.
pub fn render_accuracy_svg(report: &Report) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 30.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let kmin = *report.k_grid.iter().min().unwrap_or(&0) as f64;
    let kmax = *report.k_grid.iter().max().unwrap_or(&1) as f64;
    let ymin = report.rows.iter().map(|r| r.accuracy).fold(100.0, f64::min).min(90.0).floor();
    let sx = |k: f64| left + if kmax > kmin { (k - kmin) / (kmax - kmin) * pw } else { pw / 2.0 };
    let sy = |a: f64| top + (100.0 - a) / (100.0 - ymin).max(1e-9) * ph;
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">Accuracy vs. visual words K (train {}, test {})</text>\n",
        left + pw / 2.0,
        report.train_split,
        report.test_split
    );
    let _ = write!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>\n"
    );
    for &k in &report.k_grid {
        let x = sx(k as f64);
        let _ = write!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{k}</text>\n", top + ph + 16.0);
    }
    for i in 0..=4 {
        let a = ymin + (100.0 - ymin) * i as f64 / 4.0;
        let _ = write!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{a:.1}</text>\n", left - 6.0, sy(a) + 4.0);
    }
    let _ = write!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">K</text>\n", left + pw / 2.0, h - 12.0);
    for (i, &mode) in report.modes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| format!("{:.1},{:.1}", sx(r.k as f64), sy(r.accuracy)))
            .collect();
        let _ = write!(
            s,
            "<polyline class=\"curve\" data-mode=\"{mode}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        );
        if let Some(m) = report.max_for(mode) {
            let (x, y) = (sx(m.k as f64), sy(m.accuracy));
            let _ = write!(
                s,
                "<circle class=\"max\" data-mode=\"{mode}\" cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"{color}\"/>\n<text x=\"{x:.1}\" y=\"{:.1}\" fill=\"{color}\" text-anchor=\"middle\">{:.2}</text>\n",
                y - 7.0,
                m.accuracy
            );
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = write!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{mode}</text>\n",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
