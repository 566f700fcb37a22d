//! Configuration, data assembly, training, evaluation, few-shot fine-tuning
//! and run artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stlt_engine::nn::Regularization;
use stlt_engine::{Adam, AdamConfig, Container, EngineError, Graph, ParamStore, Rng, Tensor};

use crate::error::{config_err, data_err, Result, StltError};
use crate::fusion::{model_loss, AppearanceConfig, AppearanceInput, FusionConfig, FusionModel, Scheme, Targets};
use crate::layout::{
    parse_annotations, retained_objects, sample_indices, serialize_annotations, ActionSet, CategoryPolicy, Label, ParseOptions, SamplingMode,
    TaskMode, VideoLayout, Vocabulary,
};
use crate::metrics::{evaluate_map, evaluate_topk};
use crate::model::{Architecture, LayoutBatch, StltConfig};
use crate::synthetic::{make_split, render_into, ActionScript, FrameArchive, ObjectStyle, SplitKind, SplitSpec, SyntheticVideo};

fn default_styles(range: std::ops::Range<usize>) -> Vec<usize> {
    range.collect()
}

/// Flat run configuration, read from TOML. Every key except `seed` has a
/// default; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: Option<u64>,
    pub task: TaskMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Stop as soon as validation top-1 (or mAP) reaches this value.
    pub target_top1: Option<f64>,
    pub frames: usize,
    pub app_frames: usize,
    pub resolution: usize,

    pub width: usize,
    pub spatial_layers: usize,
    pub spatial_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub dropout: f64,
    pub max_objects: usize,
    pub ff_mult: usize,
    pub architecture: Architecture,

    pub scheme: Scheme,
    pub app_width: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub token_layers: usize,
    pub lambda_layout: f64,
    pub lambda_app: f64,

    pub train_annotations: Option<PathBuf>,
    pub test_annotations: Option<PathBuf>,
    pub finetune_annotations: Option<PathBuf>,
    pub categories: Vec<String>,
    pub actions: Vec<String>,
    pub novel_actions: Vec<String>,
    pub oracle: bool,
    pub score_threshold: f64,
    pub lenient_categories: bool,
    /// Directory of `{id}.rgb` frame archives.
    pub frames_dir: Option<PathBuf>,
    /// Tensor container of precomputed appearance vectors keyed by id.
    pub appearance_features: Option<PathBuf>,

    pub synthetic_actions: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_length: usize,
    pub train_styles: Vec<usize>,
    pub test_styles: Vec<usize>,
    pub style_bias: f64,
    pub corrupt_fraction: f64,
    pub corrupt_noise: f64,
    pub fewshot_shots: Option<usize>,
    /// Catalog ids of the synthetic novel actions.
    pub fewshot_novel: Vec<usize>,
    /// Seed of the synthetic data; defaults to `seed`.
    pub data_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: None,
            task: TaskMode::SingleLabel,
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 10,
            target_top1: None,
            frames: 16,
            app_frames: 32,
            resolution: 112,
            width: 128,
            spatial_layers: 2,
            spatial_heads: 4,
            temporal_layers: 2,
            temporal_heads: 4,
            dropout: 0.1,
            max_objects: 6,
            ff_mult: 4,
            architecture: Architecture::Factorized,
            scheme: Scheme::None,
            app_width: 128,
            fusion_layers: 2,
            fusion_heads: 4,
            token_layers: 1,
            lambda_layout: 0.5,
            lambda_app: 0.5,
            train_annotations: None,
            test_annotations: None,
            finetune_annotations: None,
            categories: vec!["hand".into(), "object".into()],
            actions: Vec::new(),
            novel_actions: Vec::new(),
            oracle: true,
            score_threshold: crate::layout::DEFAULT_SCORE_THRESHOLD,
            lenient_categories: false,
            frames_dir: None,
            appearance_features: None,
            synthetic_actions: 12,
            synthetic_train: 2000,
            synthetic_test: 600,
            synthetic_length: 32,
            train_styles: default_styles(0..8),
            test_styles: default_styles(8..16),
            style_bias: 0.8,
            corrupt_fraction: 0.0,
            corrupt_noise: 0.1,
            fewshot_shots: None,
            fewshot_novel: Vec::new(),
            data_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| config_err("`seed` is mandatory"))
    }

    pub fn synthetic(&self) -> bool {
        self.train_annotations.is_none()
    }

    pub fn fewshot(&self) -> bool {
        if self.synthetic() {
            self.fewshot_shots.is_some()
        } else {
            !self.novel_actions.is_empty()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("frames", self.frames),
            ("app_frames", self.app_frames),
            ("width", self.width),
            ("max_objects", self.max_objects),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("`{name}` must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("`learning_rate` must be positive"));
        }
        self.stlt_config(self.categories.len() + 2, 1).validate()?;
        self.fusion_config().validate(self.width)?;
        for path in [&self.train_annotations, &self.test_annotations, &self.finetune_annotations, &self.frames_dir, &self.appearance_features]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(config_err(format!("{} does not exist", path.display())));
            }
        }
        if self.synthetic() {
            if self.test_annotations.is_some() || self.finetune_annotations.is_some() {
                return Err(config_err("annotation files need `train_annotations`"));
            }
            if self.fewshot_shots.is_some() != !self.fewshot_novel.is_empty() {
                return Err(config_err("`fewshot_shots` and `fewshot_novel` go together"));
            }
        } else {
            if self.test_annotations.is_none() || self.actions.is_empty() {
                return Err(config_err("annotation data needs `test_annotations` and `actions`"));
            }
            if self.fewshot() && self.finetune_annotations.is_none() {
                return Err(config_err("few-shot annotation data needs `finetune_annotations`"));
            }
            let s = self.scheme;
            if s.uses_appearance() && self.frames_dir.is_none() && !(s.vector_only() && self.appearance_features.is_some()) {
                return Err(config_err(format!("scheme {s:?} needs `frames_dir` or precomputed features")));
            }
        }
        Ok(())
    }

    pub fn stlt_config(&self, vocabulary: usize, classes: usize) -> StltConfig {
        StltConfig {
            width: self.width,
            spatial_layers: self.spatial_layers,
            spatial_heads: self.spatial_heads,
            temporal_layers: self.temporal_layers,
            temporal_heads: self.temporal_heads,
            dropout: self.dropout,
            max_objects: self.max_objects,
            frames: self.frames,
            vocabulary,
            classes,
            ff_mult: self.ff_mult,
            architecture: self.architecture,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            scheme: self.scheme,
            app_width: self.app_width,
            layers: self.fusion_layers,
            heads: self.fusion_heads,
            token_layers: self.token_layers,
            lambda_layout: self.lambda_layout,
            lambda_app: self.lambda_app,
        }
    }

    pub fn appearance_config(&self) -> AppearanceConfig {
        let frames = if self.scheme.per_frame() { self.frames } else { self.app_frames };
        AppearanceConfig { resolution: self.resolution, frames, per_frame: self.scheme.per_frame() }
    }

    pub fn split_spec(&self) -> SplitSpec {
        let kind = match self.fewshot_shots {
            Some(shots) => SplitKind::FewShot { shots, novel: self.fewshot_novel.clone() },
            None => SplitKind::Compositional,
        };
        SplitSpec {
            kind,
            actions: self.synthetic_actions,
            train_styles: self.train_styles.clone(),
            test_styles: self.test_styles.clone(),
            train_videos: self.synthetic_train,
            test_videos: self.synthetic_test,
            length: self.synthetic_length,
            style_bias: self.style_bias,
            corrupt_fraction: self.corrupt_fraction,
            corrupt_noise: self.corrupt_noise,
            multi_label: self.task == TaskMode::MultiLabel,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Where a video's appearance comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Appearance {
    None,
    /// Clean synthetic scene rendered on demand.
    Scene { scene: VideoLayout, styles: Vec<ObjectStyle> },
    Archive(PathBuf),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub layout: VideoLayout,
    pub appearance: Appearance,
}

impl Sample {
    pub fn synthetic(v: &SyntheticVideo) -> Self {
        Self { layout: v.layout.clone(), appearance: Appearance::Scene { scene: v.scene.clone(), styles: v.styles() } }
    }
}

/// Datasets of one run. Training labels index `classes`; in few-shot runs
/// the fine-tuning and test labels index the novel actions.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub vocabulary: Vocabulary,
    pub task: TaskMode,
    pub classes: usize,
    pub novel_classes: Option<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub finetune: Vec<Sample>,
}

fn remap(label: &Label, ids: &[usize]) -> Result<Label> {
    let pos = |c: usize| ids.iter().position(|&x| x == c).ok_or_else(|| data_err(format!("label {c} outside the action subset")));
    Ok(match label {
        Label::Single(c) => Label::Single(pos(*c)?),
        Label::Multi(cs) => Label::multi(cs.iter().map(|&c| pos(c)).collect::<Result<_>>()?),
    })
}

fn relabel(videos: &[SyntheticVideo], ids: &[usize]) -> Result<Vec<Sample>> {
    videos
        .iter()
        .map(|v| {
            let mut s = Sample::synthetic(v);
            s.layout.label = remap(&s.layout.label, ids)?;
            Ok(s)
        })
        .collect()
}

fn read_annotations(path: &Path, opts: &ParseOptions) -> Result<Vec<VideoLayout>> {
    let parsed = parse_annotations(BufReader::new(File::open(path)?), opts)?;
    Ok(parsed.videos)
}

pub fn load_data(cfg: &TrainConfig) -> Result<DataBundle> {
    cfg.validate()?;
    if cfg.synthetic() {
        let spec = cfg.split_spec();
        let split = make_split(&spec, cfg.data_seed.unwrap_or(cfg.seed()?))?;
        return Ok(match &spec.kind {
            SplitKind::Compositional => DataBundle {
                vocabulary: split.vocabulary,
                task: cfg.task,
                classes: spec.actions,
                novel_classes: None,
                train: split.train.iter().map(Sample::synthetic).collect(),
                test: split.test.iter().map(Sample::synthetic).collect(),
                finetune: Vec::new(),
            },
            SplitKind::FewShot { novel, .. } => {
                let base = spec.base_actions();
                DataBundle {
                    vocabulary: split.vocabulary,
                    task: cfg.task,
                    classes: base.len(),
                    novel_classes: Some(novel.len()),
                    train: relabel(&split.train, &base)?,
                    test: relabel(&split.test, novel)?,
                    finetune: relabel(&split.finetune, novel)?,
                }
            }
        });
    }
    let vocabulary = Vocabulary::new(&cfg.categories)?;
    let policy = if cfg.lenient_categories { CategoryPolicy::Lenient } else { CategoryPolicy::Strict };
    let base = ActionSet::new(cfg.actions.clone())?;
    let opts = |actions| ParseOptions {
        vocabulary: &vocabulary,
        actions,
        task: cfg.task,
        policy,
        oracle: cfg.oracle,
        score_threshold: cfg.score_threshold,
    };
    let train = read_annotations(cfg.train_annotations.as_deref().expect("validated"), &opts(&base))?;
    let test_path = cfg.test_annotations.as_deref().expect("validated");
    let (test, finetune, novel_classes) = if cfg.fewshot() {
        let novel = ActionSet::new(cfg.novel_actions.clone())?;
        let ft = read_annotations(cfg.finetune_annotations.as_deref().expect("validated"), &opts(&novel))?;
        (read_annotations(test_path, &opts(&novel))?, ft, Some(novel.len()))
    } else {
        (read_annotations(test_path, &opts(&base))?, Vec::new(), None)
    };
    let vectors = match &cfg.appearance_features {
        Some(p) if cfg.frames_dir.is_none() => Some(crate::fusion::load_appearance_vectors(p)?),
        _ => None,
    };
    let attach = |videos: Vec<VideoLayout>| -> Result<Vec<Sample>> {
        videos
            .into_iter()
            .map(|layout| {
                let appearance = if let Some(dir) = &cfg.frames_dir {
                    Appearance::Archive(dir.join(format!("{}.rgb", layout.id)))
                } else if let Some(map) = &vectors {
                    let v = map.get(&layout.id).ok_or_else(|| data_err(format!("no appearance vector for `{}`", layout.id)))?;
                    Appearance::Vector(v.clone())
                } else {
                    Appearance::None
                };
                Ok(Sample { layout, appearance })
            })
            .collect()
    };
    Ok(DataBundle {
        vocabulary,
        task: cfg.task,
        classes: base.len(),
        novel_classes,
        train: attach(train)?,
        test: attach(test)?,
        finetune: attach(finetune)?,
    })
}

/// Writes a synthetic configuration's data as annotation files, plus frame
/// archives when `render` is given, and returns a configuration that trains
/// on the written files with the same model settings.
pub fn write_dataset(cfg: &TrainConfig, dir: impl AsRef<Path>, render: Option<usize>) -> Result<TrainConfig> {
    if !cfg.synthetic() {
        return Err(config_err("only synthetic configurations can be written out"));
    }
    let data = load_data(cfg)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dir = dir.canonicalize()?;
    let names = |ids: &[usize]| -> Result<Vec<String>> {
        let catalog = ActionScript::catalog(cfg.synthetic_actions)?;
        Ok(ids.iter().map(|&i| catalog[i].name()).collect())
    };
    let spec = cfg.split_spec();
    let mut out = cfg.clone();
    match &spec.kind {
        SplitKind::Compositional => out.actions = names(&(0..cfg.synthetic_actions).collect::<Vec<_>>())?,
        SplitKind::FewShot { novel, .. } => {
            out.actions = names(&spec.base_actions())?;
            out.novel_actions = names(novel)?;
        }
    }
    out.categories = data.vocabulary.categories().to_vec();
    let frames_dir = dir.join("frames");
    if let Some(res) = render {
        fs::create_dir_all(&frames_dir)?;
        out.resolution = res;
        out.frames_dir = Some(frames_dir.clone());
    }
    let write = |name: &str, samples: &[Sample]| -> Result<Option<PathBuf>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let path = dir.join(name);
        let layouts: Vec<VideoLayout> = samples.iter().map(|s| s.layout.clone()).collect();
        let mut w = std::io::BufWriter::new(File::create(&path)?);
        serialize_annotations(&layouts, &mut w)?;
        w.flush()?;
        if let Some(res) = render {
            for s in samples {
                if let Appearance::Scene { scene, styles } = &s.appearance {
                    FrameArchive::from_scene(&s.layout.id, scene, styles, res).save(frames_dir.join(format!("{}.rgb", s.layout.id)))?;
                }
            }
        }
        Ok(Some(path))
    };
    out.train_annotations = write("train.jsonl", &data.train)?;
    out.test_annotations = write("test.jsonl", &data.test)?;
    out.finetune_annotations = write("finetune.jsonl", &data.finetune)?;
    out.fewshot_novel.clear();
    fs::write(dir.join("dataset.toml"), out.to_toml()?)?;
    out.validate()?;
    Ok(out)
}

/// One assembled mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub layout: LayoutBatch,
    pub appearance: AppearanceInput,
    pub targets: Targets,
}

enum Frames<'a> {
    Scene(&'a VideoLayout, &'a [ObjectStyle]),
    Archive(FrameArchive),
}

impl Frames<'_> {
    fn count(&self) -> usize {
        match self {
            Frames::Scene(s, _) => s.frames.len(),
            Frames::Archive(a) => a.frames,
        }
    }

    fn write(&self, index: usize, res: usize, out: &mut [f64]) -> Result<()> {
        match self {
            Frames::Scene(s, styles) => render_into(&s.frames[index], styles, res, out),
            Frames::Archive(a) => {
                if a.resolution != res {
                    return Err(data_err(format!("archive `{}` has resolution {}, expected {res}", a.id, a.resolution)));
                }
                let n = res * res * 3;
                for (o, &p) in out.iter_mut().zip(&a.pixels[index * n..(index + 1) * n]) {
                    *o = p as f64 / 255.0;
                }
            }
        }
        Ok(())
    }
}

fn frames_of(sample: &Sample) -> Result<Frames<'_>> {
    match &sample.appearance {
        Appearance::Scene { scene, styles } => Ok(Frames::Scene(scene, styles)),
        Appearance::Archive(path) => Ok(Frames::Archive(FrameArchive::load(path)?)),
        _ => Err(data_err(format!("video `{}` has no frames to render", sample.layout.id))),
    }
}

pub fn targets(samples: &[&Sample], task: TaskMode, classes: usize) -> Result<Targets> {
    match task {
        TaskMode::SingleLabel => samples
            .iter()
            .map(|s| {
                s.layout
                    .label
                    .single()
                    .filter(|&c| c < classes)
                    .ok_or_else(|| data_err(format!("video `{}` lacks a single label below {classes}", s.layout.id)))
            })
            .collect::<Result<_>>()
            .map(Targets::Single),
        TaskMode::MultiLabel => {
            let mut out = Vec::with_capacity(samples.len() * classes);
            for s in samples {
                if s.layout.label.classes().iter().any(|&c| c >= classes) {
                    return Err(data_err(format!("video `{}` has a label outside {classes} classes", s.layout.id)));
                }
                out.extend(s.layout.label.multi_hot(classes));
            }
            Ok(Targets::Multi(out))
        }
    }
}

/// Samples frames and assembles every input the scheme reads. Layout frames
/// are sampled with `mode`; appearance clips always uniformly.
pub fn build_batch(cfg: &TrainConfig, classes: usize, samples: &[&Sample], mode: SamplingMode, rng: &mut Rng) -> Result<Batch> {
    let scheme = cfg.scheme;
    let mut layouts = Vec::with_capacity(samples.len());
    let mut picks = Vec::with_capacity(samples.len());
    for s in samples {
        let idx = sample_indices(s.layout.frames.len(), cfg.frames, mode, rng)?;
        layouts.push(VideoLayout {
            id: s.layout.id.clone(),
            frames: idx.iter().map(|&i| s.layout.frames[i].clone()).collect(),
            label: s.layout.label.clone(),
        });
        picks.push(idx);
    }
    let refs: Vec<&VideoLayout> = layouts.iter().collect();
    let layout = LayoutBatch::new(&refs, cfg.max_objects)?;
    let mut appearance = AppearanceInput::default();
    let res = cfg.resolution;
    let frame_len = res * res * 3;
    let all_vectors = samples.iter().all(|s| matches!(s.appearance, Appearance::Vector(_)));
    if scheme.uses_appearance() && scheme.vector_only() && all_vectors {
        let mut data = Vec::with_capacity(samples.len() * cfg.app_width);
        for s in samples {
            if let Appearance::Vector(v) = &s.appearance {
                data.extend_from_slice(v);
            }
        }
        appearance.vectors = Some(Tensor::new(vec![samples.len(), data.len() / samples.len().max(1)], data)?);
    } else if scheme.per_frame() {
        let mut data = vec![0.0; samples.len() * cfg.frames * frame_len];
        for (v, s) in samples.iter().enumerate() {
            let frames = frames_of(s)?;
            if frames.count() != s.layout.frames.len() {
                return Err(data_err(format!("video `{}`: frame count differs from its layout", s.layout.id)));
            }
            for (k, &i) in picks[v].iter().enumerate() {
                let at = (v * cfg.frames + k) * frame_len;
                frames.write(i, res, &mut data[at..at + frame_len])?;
            }
        }
        appearance.layout_frames = Some(Tensor::new(vec![samples.len(), cfg.frames, res, res, 3], data)?);
    } else if scheme.uses_appearance() {
        let t = cfg.app_frames;
        let mut data = vec![0.0; samples.len() * t * frame_len];
        for (v, s) in samples.iter().enumerate() {
            let frames = frames_of(s)?;
            let idx = sample_indices(frames.count(), t, SamplingMode::Uniform, rng)?;
            for (k, &i) in idx.iter().enumerate() {
                let at = (v * t + k) * frame_len;
                frames.write(i, res, &mut data[at..at + frame_len])?;
            }
            if scheme == Scheme::Vatf {
                let c = idx[t / 2].min(s.layout.frames.len() - 1);
                let boxes = retained_objects(&s.layout.frames[c], cfg.max_objects).into_iter().map(|o| o.bbox).collect();
                appearance.central_boxes.push(boxes);
            }
        }
        appearance.clips = Some(Tensor::new(vec![samples.len(), t, res, res, 3], data)?);
    }
    Ok(Batch { layout, appearance, targets: targets(samples, cfg.task, classes)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricValue {
    pub fn new(split: &str, metric: &str, value: f64) -> Self {
        Self { split: split.into(), metric: metric.into(), value }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub values: Vec<MetricValue>,
}

/// Per-epoch training and validation metrics of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub scheme: Scheme,
    pub notes: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Validation metrics of the returned parameters.
    pub final_metrics: Vec<MetricValue>,
    pub wall_clock_secs: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for MetricsReport {
    fn eq(&self, o: &Self) -> bool {
        self.config_hash == o.config_hash
            && self.scheme == o.scheme
            && self.notes == o.notes
            && self.epochs == o.epochs
            && self.best_epoch == o.best_epoch
            && self.final_metrics == o.final_metrics
    }
}

impl MetricsReport {
    pub fn new(config_hash: String, scheme: Scheme, architecture: Architecture) -> Self {
        let mut notes = Vec::new();
        if matches!(scheme, Scheme::Caf | Scheme::Cacnf) {
            notes.push("cross-attention fusion is bidirectional (layout→appearance and appearance→layout)".into());
        }
        if architecture == Architecture::Joint {
            notes.push("joint spatial-temporal variant: one bidirectional transformer over all object tokens".into());
        }
        Self { config_hash, scheme, notes, epochs: Vec::new(), best_epoch: None, final_metrics: Vec::new(), wall_clock_secs: 0.0 }
    }

    pub fn value(&self, split: &str, metric: &str) -> Option<f64> {
        self.final_metrics.iter().find(|m| m.split == split && m.metric == metric).map(|m| m.value)
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &MetricValue)> {
        self.epochs.iter().flat_map(|e| e.values.iter().map(move |v| (e.epoch, v)))
    }
}

pub const REPORT_HEADER: [&str; 4] = ["epoch", "split", "metric", "value"];

/// Writes `epoch,split,metric,value` rows. Values use Rust's shortest
/// round-trip formatting, which is locale-independent.
pub fn export_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for (epoch, v) in report.rows() {
        w.write_record([epoch.to_string(), v.split.clone(), v.metric.clone(), format!("{}", v.value)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, MetricValue)>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(data_err("unexpected report header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec.get(i).ok_or_else(|| data_err("short report row"));
        let epoch = num(0)?.parse().map_err(|_| data_err("bad epoch"))?;
        let value = num(3)?.parse().map_err(|_| data_err("bad value"))?;
        out.push((epoch, MetricValue::new(num(1)?, num(2)?, value)));
    }
    Ok(out)
}

/// Model outputs over a dataset, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub fused: Tensor,
    pub layout: Option<Tensor>,
    pub appearance: Option<Tensor>,
}

fn stack(parts: Vec<Tensor>, cols: usize) -> Result<Tensor> {
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(vec![data.len() / cols.max(1), cols], data)?)
}

pub struct Trained {
    pub config: TrainConfig,
    pub classes: usize,
    pub model: FusionModel,
    pub store: ParamStore,
}

impl Trained {
    pub fn new(cfg: &TrainConfig, vocabulary: usize, classes: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(cfg.seed()?).fork_named("init");
        let model = FusionModel::new(
            &mut store,
            cfg.stlt_config(vocabulary, classes),
            cfg.appearance_config(),
            cfg.fusion_config(),
            &mut rng,
        )?;
        if cfg.appearance_features.is_some() && cfg.frames_dir.is_none() {
            store.set_requires_grad_prefix("app.conv", false);
            store.set_requires_grad_prefix("app.head.", false);
        }
        Ok(Self { config: cfg.clone(), classes, model, store })
    }

    /// Evaluation-mode outputs: uniform frame sampling, no dropout.
    pub fn predict(&self, samples: &[Sample]) -> Result<Predictions> {
        let cfg = &self.config;
        let mut rng = Rng::seed(0);
        let (mut fused, mut layout, mut app) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in samples.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = build_batch(cfg, self.classes, &refs, SamplingMode::Uniform, &mut rng)?;
            let mut g = Graph::new(&self.store);
            let mut reg = Regularization { rate: 0.0, training: false, rng: &mut rng };
            let out = self.model.forward(&mut g, &batch.layout, &batch.appearance, &mut reg)?;
            fused.push(g.value(out.fused).clone());
            if let (Some(l), Some(a)) = (out.layout, out.appearance) {
                layout.push(g.value(l).clone());
                app.push(g.value(a).clone());
            }
        }
        let c = self.classes;
        Ok(Predictions {
            ids: samples.iter().map(|s| s.layout.id.clone()).collect(),
            labels: samples.iter().map(|s| s.layout.label.clone()).collect(),
            fused: stack(fused, c)?,
            layout: if layout.is_empty() { None } else { Some(stack(layout, c)?) },
            appearance: if app.is_empty() { None } else { Some(stack(app, c)?) },
        })
    }

    pub fn evaluate(&self, samples: &[Sample], split: &str) -> Result<Vec<MetricValue>> {
        let p = self.predict(samples)?;
        score(&p, self.config.task, self.classes, split)
    }

    /// SHA-256 over the names and values of the parameters selected by
    /// `include`.
    pub fn param_hash(&self, include: impl Fn(&str) -> bool) -> String {
        param_hash(&self.store, include)
    }

    pub fn is_classifier(&self, name: &str) -> bool {
        self.model.classifier_prefixes().iter().any(|p| name.starts_with(p))
    }

    pub fn checkpoint(&self, best_epoch: Option<usize>) -> Result<Container> {
        let meta = serde_json::json!({
            "format": "stlt-checkpoint",
            "config_hash": self.config.hash()?,
            "scheme": self.config.scheme,
            "classes": self.classes,
            "best_epoch": best_epoch,
            "stlt": self.model.layout.as_ref().map(|l| &l.config),
            "fusion": &self.model.fusion,
        });
        Ok(Container::from_params(&self.store, meta.to_string()))
    }

    pub fn restore(&mut self, c: &Container) -> Result<()> {
        let meta: serde_json::Value = serde_json::from_str(&c.metadata)?;
        if meta["classes"].as_u64() != Some(self.classes as u64) {
            return Err(data_err(format!("checkpoint has {} classes, expected {}", meta["classes"], self.classes)));
        }
        c.restore_params(&mut self.store)?;
        Ok(())
    }
}

pub fn param_hash(store: &ParamStore, include: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| include(&p.name)) {
        h.update(p.name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn scores_metrics(scores: &Tensor, labels: &[Label], task: TaskMode, classes: usize, prefix: &str, split: &str) -> Result<Vec<MetricValue>> {
    Ok(match task {
        TaskMode::SingleLabel => {
            let y: Vec<usize> = labels
                .iter()
                .map(|l| l.single().ok_or_else(|| data_err("multi-label target in single-label evaluation")))
                .collect::<Result<_>>()?;
            let mut out = vec![MetricValue::new(split, &format!("{prefix}top1"), evaluate_topk(scores, &y, 1)?)];
            if prefix.is_empty() {
                out.push(MetricValue::new(split, "top5", evaluate_topk(scores, &y, 5.min(classes))?));
            }
            out
        }
        TaskMode::MultiLabel => {
            let hot: Vec<f64> = labels.iter().flat_map(|l| l.multi_hot(classes)).collect();
            let y = Tensor::new(vec![labels.len(), classes], hot)?;
            vec![MetricValue::new(split, &format!("{prefix}map"), evaluate_map(scores, &y)?.map)]
        }
    })
}

/// Top-1/top-5 (single-label) or mAP (multi-label), plus per-branch scores
/// when the predictions carry them.
pub fn score(p: &Predictions, task: TaskMode, classes: usize, split: &str) -> Result<Vec<MetricValue>> {
    let mut out = scores_metrics(&p.fused, &p.labels, task, classes, "", split)?;
    if let Some(l) = &p.layout {
        out.extend(scores_metrics(l, &p.labels, task, classes, "layout_", split)?);
    }
    if let Some(a) = &p.appearance {
        out.extend(scores_metrics(a, &p.labels, task, classes, "appearance_", split)?);
    }
    Ok(out)
}

fn primary(values: &[MetricValue]) -> Option<f64> {
    values.iter().find(|m| m.metric == "top1" || m.metric == "map").map(|m| m.value)
}

/// Runs mini-batch Adam over `train`, validating on `val` after each epoch.
/// With a validation set, the parameters of the best epoch are kept and
/// training stops after `patience` epochs without improvement.
/// `on_epoch` sees each epoch's record as soon as it is complete.
pub fn fit(
    t: &mut Trained,
    train: &[Sample],
    val: Option<&[Sample]>,
    rng: &Rng,
    report: &mut MetricsReport,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    let cfg = t.config.clone();
    if train.is_empty() {
        return Err(data_err("empty training set"));
    }
    let mut adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let erng = rng.fork(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        erng.fork_named("order").shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut brng = erng.fork(b as u64);
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = build_batch(&cfg, t.classes, &refs, SamplingMode::Random, &mut brng)?;
            let mut drng = brng.fork_named("dropout");
            let non_finite = || StltError::NonFiniteLoss { step, batch_ids: batch.layout.ids.clone() };
            let grads = (|| {
                let mut g = Graph::new(&t.store);
                let mut reg = Regularization { rate: cfg.dropout, training: true, rng: &mut drng };
                let out = t.model.forward(&mut g, &batch.layout, &batch.appearance, &mut reg)?;
                let loss = model_loss(&mut g, &t.model, &out, &batch.targets)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(non_finite());
                }
                loss_sum += value * chunk.len() as f64;
                Ok(g.backward(loss)?)
            })()
            .map_err(|e| match e {
                StltError::Engine(EngineError::NonFinite(_)) => non_finite(),
                e => e,
            })?;
            t.store.zero_grads();
            t.store.accumulate(&grads)?;
            adam.step(&mut t.store)?;
            step += 1;
        }
        let mut values = vec![MetricValue::new("train", "loss", loss_sum / train.len() as f64)];
        let mut stop = false;
        if let Some(val) = val {
            let m = t.evaluate(val, "test")?;
            let score = primary(&m).unwrap_or(f64::NAN);
            values.extend(m);
            let improved = best.as_ref().map_or(true, |(s, _, _)| score > *s);
            if improved {
                let snapshot = t.store.iter().map(|(_, p)| p.value.clone()).collect();
                best = Some((score, epoch, snapshot));
            }
            let since = epoch - best.as_ref().map_or(epoch, |b| b.1);
            stop = since >= cfg.patience || cfg.target_top1.is_some_and(|target| score >= target);
        }
        let record = EpochRecord { epoch, values };
        on_epoch(&record);
        report.epochs.push(record);
        if stop {
            break;
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        let ids: Vec<_> = t.store.ids().collect();
        for (id, v) in ids.into_iter().zip(snapshot) {
            t.store.set_value(id, v)?;
        }
        report.best_epoch = Some(epoch);
    }
    if let Some(val) = val {
        report.final_metrics = t.evaluate(val, "test")?;
    }
    Ok(())
}

/// A trained model with its report.
pub struct Run {
    pub trained: Trained,
    pub report: MetricsReport,
}

impl Run {
    /// Writes `config.toml`, `checkpoint.stlt`, `report.json` and
    /// `metrics.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.trained.config.to_toml()?)?;
        self.trained.checkpoint(self.report.best_epoch)?.save(dir.join("checkpoint.stlt"))?;
        let mut f = File::create(dir.join("report.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.report)?;
        f.write_all(b"\n")?;
        export_report(&self.report, dir.join("metrics.csv"))
    }
}

/// Trains on the training set, validating on the test set. Few-shot
/// configurations pretrain on base actions without validation.
pub fn train(cfg: &TrainConfig, data: &DataBundle) -> Result<Run> {
    train_with(cfg, data, &mut |_| {})
}

pub fn train_with(cfg: &TrainConfig, data: &DataBundle, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Run> {
    let start = Instant::now();
    let mut trained = Trained::new(cfg, data.vocabulary.len(), data.classes)?;
    let mut report = MetricsReport::new(cfg.hash()?, cfg.scheme, cfg.architecture);
    let rng = Rng::seed(cfg.seed()?).fork_named("train");
    let val = if data.novel_classes.is_some() { None } else { Some(data.test.as_slice()) };
    fit(&mut trained, &data.train, val, &rng, &mut report, on_epoch)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(Run { trained, report })
}

/// Replaces the classifier of a base-action checkpoint with a freshly
/// initialized one for the novel actions and trains only the classifier;
/// every other parameter keeps its checkpoint value bit for bit.
pub fn fewshot_finetune(cfg: &TrainConfig, checkpoint: &Container, data: &DataBundle) -> Result<Run> {
    fewshot_finetune_with(cfg, checkpoint, data, &mut |_| {})
}

pub fn fewshot_finetune_with(
    cfg: &TrainConfig,
    checkpoint: &Container,
    data: &DataBundle,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Run> {
    let start = Instant::now();
    let novel = data.novel_classes.ok_or_else(|| config_err("not a few-shot configuration"))?;
    let found: BTreeSet<usize> = data.finetune.iter().flat_map(|s| s.layout.label.classes()).collect();
    if found != (0..novel).collect() {
        return Err(data_err(format!("fine-tuning set covers {} actions, expected {novel}", found.len())));
    }
    if let Some(k) = cfg.fewshot_shots {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &data.finetune {
            for c in s.layout.label.classes() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if counts.values().any(|&n| n != k) {
            return Err(data_err(format!("fine-tuning set does not hold exactly {k} videos per novel action")));
        }
    }
    let mut t = Trained::new(cfg, data.vocabulary.len(), novel)?;
    let ids: Vec<_> = t.store.ids().collect();
    for id in &ids {
        let name = t.store.get(*id).name.clone();
        if t.is_classifier(&name) {
            continue;
        }
        let v = checkpoint.get(&name).ok_or_else(|| data_err(format!("checkpoint lacks `{name}`")))?;
        t.store.set_value(*id, v.clone())?;
    }
    let trainable: Vec<bool> = ids
        .iter()
        .map(|&id| {
            let name = &t.store.get(id).name;
            t.is_classifier(name) && !t.model.is_unused(name)
        })
        .collect();
    for (&id, on) in ids.iter().zip(trainable) {
        t.store.get_mut(id).requires_grad = on;
    }
    let mut report = MetricsReport::new(cfg.hash()?, cfg.scheme, cfg.architecture);
    report.notes.push(format!("few-shot fine-tuning of {novel} novel actions; backbone frozen"));
    let rng = Rng::seed(cfg.seed()?).fork_named("finetune");
    fit(&mut t, &data.finetune, Some(&data.test), &rng, &mut report, on_epoch)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(Run { trained: t, report })
}

/// Scores written by `evaluate` and read by `ensemble`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub task: TaskMode,
    pub ids: Vec<String>,
    pub labels: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreFile {
    pub fn from_predictions(p: &Predictions, task: TaskMode) -> Self {
        Self {
            task,
            ids: p.ids.clone(),
            labels: p.labels.iter().map(Label::classes).collect(),
            scores: (0..p.fused.rows()).map(|i| p.fused.row(i).to_vec()).collect(),
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_rows(&self.scores)?)
    }

    pub fn label_values(&self) -> Vec<Label> {
        self.labels
            .iter()
            .map(|l| match self.task {
                TaskMode::SingleLabel if l.len() == 1 => Label::Single(l[0]),
                _ => Label::multi(l.clone()),
            })
            .collect()
    }
}

/// Appearance vectors of a dataset from a trained appearance branch.
pub fn appearance_vectors(t: &Trained, samples: &[Sample]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rng = Rng::seed(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(t.config.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = build_batch(&t.config, t.classes, &refs, SamplingMode::Uniform, &mut rng)?;
        let mut g = Graph::new(&t.store);
        let mut reg = Regularization { rate: 0.0, training: false, rng: &mut rng };
        let v = t.model.appearance_vector(&mut g, &batch.appearance, &mut reg)?;
        let v = g.value(v);
        for (i, s) in chunk.iter().enumerate() {
            out.push((s.layout.id.clone(), v.row(i).to_vec()));
        }
    }
    Ok(out)
}
