//! Spatio-temporal layouts: per-frame lists of (category, box) objects.
//!
//! Boxes are stored in unit-normalized `[x1, y1, x2, y2]` coordinates with
//! `y` growing downwards. Annotation files are JSON lines, one video each:
//!
//! ```text
//! {"id": "v1", "label": "pick-up", "width": 480, "height": 360,
//!  "frames": [{"objects": [{"category": "hand", "box": [10, 20, 60, 80], "score": 0.9}]}]}
//! ```
//!
//! The canonical form written by [`serialize_annotations`] uses resolved
//! indices for categories and labels, normalized boxes and `width = height = 1`.
//! [`parse_annotations`] accepts both forms.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use stlt_engine::Rng;

use crate::error::{config_err, data_err, Result, StltError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const FULL: BoundingBox = BoundingBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };
    pub const ZERO: BoundingBox = BoundingBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(StltError::MalformedBox { x1, y1, x2, y2 })
        }
    }

    /// Box of the given center and extent, clamped to the unit frame.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BoundingBox {
            x1: c(cx - w / 2.0),
            y1: c(cy - h / 2.0),
            x2: c(cx + w / 2.0),
            y2: c(cy + h / 2.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x1) && unit(self.y1) && unit(self.x2) && unit(self.y2) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn overlaps(&self, o: &BoundingBox) -> bool {
        self.x1 < o.x2 && o.x1 < self.x2 && self.y1 < o.y2 && o.y1 < self.y2
    }
}

/// Pixel-coordinate tolerance outside the frame before a box is rejected.
pub const CLAMP_TOLERANCE_PX: f64 = 1.0;

/// Divides pixel coordinates by the frame size and clamps to `[0, 1]`.
pub fn normalize_box(pixels: [f64; 4], width: f64, height: f64) -> Result<BoundingBox> {
    if !(width > 0.0 && height > 0.0) {
        return Err(data_err(format!("frame size {width}x{height} is not positive")));
    }
    let [x1, y1, x2, y2] = pixels;
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(StltError::MalformedBox { x1, y1, x2, y2 });
    }
    let tol = CLAMP_TOLERANCE_PX;
    let outside = |v: f64, extent: f64| v < -tol || v > extent + tol;
    if outside(x1, width) || outside(x2, width) || outside(y1, height) || outside(y2, height) {
        return Err(data_err(format!("box [{x1}, {y1}, {x2}, {y2}] lies outside the {width}x{height} frame")));
    }
    let n = |v: f64, extent: f64| (v / extent).clamp(0.0, 1.0);
    BoundingBox::new(n(x1, width), n(y1, height), n(x2, width), n(y2, height))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub objects: Vec<ObjectInstance>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Single(usize),
    /// Sorted, distinct class indices.
    Multi(Vec<usize>),
}

impl Label {
    pub fn multi(mut classes: Vec<usize>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        Label::Multi(classes)
    }

    pub fn single(&self) -> Option<usize> {
        match self {
            Label::Single(c) => Some(*c),
            Label::Multi(_) => None,
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        match self {
            Label::Single(c) => vec![*c],
            Label::Multi(v) => v.clone(),
        }
    }

    pub fn multi_hot(&self, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes];
        for c in self.classes() {
            if c < classes {
                v[c] = 1.0;
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoLayout {
    pub id: String,
    pub frames: Vec<FrameLayout>,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    SingleLabel,
    MultiLabel,
}

/// Object categories. Index 0 is the special class-token category and
/// index 1 is padding; stored names start at index 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

pub const CLASS_CATEGORY: usize = 0;
pub const PADDING_CATEGORY: usize = 1;
pub const GENERIC_CATEGORY: &str = "object";

impl Vocabulary {
    pub fn new<S: AsRef<str>>(categories: &[S]) -> Result<Self> {
        let mut names = vec!["<class>".to_string(), "<pad>".to_string()];
        for c in categories {
            let c = c.as_ref().to_string();
            if names.contains(&c) {
                return Err(config_err(format!("duplicate category `{c}`")));
            }
            names.push(c);
        }
        Ok(Self { names })
    }

    /// The two-category vocabulary of hand/object layouts.
    pub fn hand_object() -> Self {
        Self::new(&["hand", GENERIC_CATEGORY]).expect("distinct names")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    /// Stored category names, excluding the two reserved entries.
    pub fn categories(&self) -> &[String] {
        &self.names[2..]
    }
}

/// Action class names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSet {
    pub names: Vec<String>,
}

impl ActionSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(config_err(format!("duplicate action `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CategoryPolicy {
    /// Unknown categories are errors.
    Strict,
    /// Unknown categories map to the generic `object` category.
    Lenient,
}

#[derive(Clone, Debug)]
pub struct ParseOptions<'a> {
    pub vocabulary: &'a Vocabulary,
    pub actions: &'a ActionSet,
    pub task: TaskMode,
    pub policy: CategoryPolicy,
    /// Ground-truth boxes: keep every object regardless of score.
    pub oracle: bool,
    pub score_threshold: f64,
}

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedAnnotations {
    pub videos: Vec<VideoLayout>,
    /// Occurrences of each category name that was not in the vocabulary.
    pub unknown_categories: BTreeMap<String, usize>,
}

impl ParsedAnnotations {
    pub fn unknown_total(&self) -> usize {
        self.unknown_categories.values().sum()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCategory {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Index(usize),
    Name(String),
    Indices(Vec<usize>),
    Names(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    category: RawCategory,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    objects: Vec<RawObject>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVideo {
    id: String,
    label: RawLabel,
    frames: Vec<RawFrame>,
    width: f64,
    height: f64,
}

fn resolve_action(actions: &ActionSet, name: &str) -> std::result::Result<usize, String> {
    actions.index(name).ok_or_else(|| format!("unknown action label `{name}`"))
}

fn check_action(actions: &ActionSet, index: usize) -> std::result::Result<usize, String> {
    if index < actions.len() {
        Ok(index)
    } else {
        Err(format!("action index {index} out of range for {} actions", actions.len()))
    }
}

fn resolve_label(raw: RawLabel, opts: &ParseOptions) -> std::result::Result<Label, String> {
    let a = opts.actions;
    match (opts.task, raw) {
        (TaskMode::SingleLabel, RawLabel::Index(i)) => Ok(Label::Single(check_action(a, i)?)),
        (TaskMode::SingleLabel, RawLabel::Name(n)) => Ok(Label::Single(resolve_action(a, &n)?)),
        (TaskMode::SingleLabel, _) => Err("single-label task but label is a list".into()),
        (TaskMode::MultiLabel, RawLabel::Index(i)) => Ok(Label::multi(vec![check_action(a, i)?])),
        (TaskMode::MultiLabel, RawLabel::Name(n)) => Ok(Label::multi(vec![resolve_action(a, &n)?])),
        (TaskMode::MultiLabel, RawLabel::Indices(v)) => {
            Ok(Label::multi(v.into_iter().map(|i| check_action(a, i)).collect::<std::result::Result<_, _>>()?))
        }
        (TaskMode::MultiLabel, RawLabel::Names(v)) => Ok(Label::multi(
            v.iter().map(|n| resolve_action(a, n)).collect::<std::result::Result<_, _>>()?,
        )),
    }
}

fn parse_line(line: &str, opts: &ParseOptions, unknown: &mut BTreeMap<String, usize>) -> std::result::Result<VideoLayout, String> {
    let raw: RawVideo = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.frames.is_empty() {
        return Err(format!("video `{}` has no frames", raw.id));
    }
    let label = resolve_label(raw.label, opts)?;
    let vocab = opts.vocabulary;
    let mut frames = Vec::with_capacity(raw.frames.len());
    for f in raw.frames {
        let mut objects = Vec::with_capacity(f.objects.len());
        for o in f.objects {
            if let Some(s) = o.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(format!("score {s} outside [0, 1]"));
                }
                if !opts.oracle && s < opts.score_threshold {
                    continue;
                }
            }
            let category = match o.category {
                RawCategory::Index(i) if i < vocab.len() && i != CLASS_CATEGORY && i != PADDING_CATEGORY => i,
                RawCategory::Index(i) => return Err(format!("category index {i} is not a stored category")),
                RawCategory::Name(n) => match vocab.index(&n) {
                    Some(i) if i != CLASS_CATEGORY && i != PADDING_CATEGORY => i,
                    _ => match opts.policy {
                        CategoryPolicy::Strict => return Err(format!("unknown category `{n}`")),
                        CategoryPolicy::Lenient => {
                            *unknown.entry(n).or_insert(0) += 1;
                            vocab
                                .index(GENERIC_CATEGORY)
                                .ok_or_else(|| format!("vocabulary has no `{GENERIC_CATEGORY}` fallback category"))?
                        }
                    },
                },
            };
            let bbox = normalize_box(o.bbox, raw.width, raw.height).map_err(|e| e.to_string())?;
            objects.push(ObjectInstance { category, bbox, score: o.score });
        }
        frames.push(FrameLayout { objects });
    }
    Ok(VideoLayout { id: raw.id, frames, label })
}

/// Parses JSON-lines annotations. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_annotations(reader: impl BufRead, opts: &ParseOptions) -> Result<ParsedAnnotations> {
    let mut out = ParsedAnnotations::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let video = parse_line(&line, opts, &mut out.unknown_categories)
            .map_err(|message| StltError::Parse { line: i + 1, message })?;
        out.videos.push(video);
    }
    Ok(out)
}

#[derive(Serialize)]
struct CanonicalObject {
    category: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize)]
struct CanonicalFrame {
    objects: Vec<CanonicalObject>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum CanonicalLabel {
    Single(usize),
    Multi(Vec<usize>),
}

#[derive(Serialize)]
struct CanonicalVideo<'a> {
    id: &'a str,
    label: CanonicalLabel,
    frames: Vec<CanonicalFrame>,
    width: u32,
    height: u32,
}

/// Writes the canonical JSON-lines form.
pub fn serialize_annotations(videos: &[VideoLayout], mut w: impl Write) -> Result<()> {
    for v in videos {
        let c = CanonicalVideo {
            id: &v.id,
            label: match &v.label {
                Label::Single(c) => CanonicalLabel::Single(*c),
                Label::Multi(cs) => CanonicalLabel::Multi(cs.clone()),
            },
            frames: v
                .frames
                .iter()
                .map(|f| CanonicalFrame {
                    objects: f
                        .objects
                        .iter()
                        .map(|o| CanonicalObject { category: o.category, bbox: o.bbox.coords(), score: o.score })
                        .collect(),
                })
                .collect(),
            width: 1,
            height: 1,
        };
        serde_json::to_writer(&mut w, &c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Random,
    Uniform,
}

/// Frame indices for a video of `total` frames. When `total < n` the
/// available frames are followed by repeats of the last one.
pub fn sample_indices(total: usize, n: usize, mode: SamplingMode, rng: &mut Rng) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(data_err("cannot sample frames from an empty video"));
    }
    if n == 0 {
        return Err(config_err("frame count must be at least 1"));
    }
    if total < n {
        return Ok((0..n).map(|i| i.min(total - 1)).collect());
    }
    Ok(match mode {
        SamplingMode::Uniform => (0..n).map(|i| i * total / n).collect(),
        SamplingMode::Random => rng.sample_sorted(total, n),
    })
}

pub fn sample_frames(video: &VideoLayout, n: usize, mode: SamplingMode, rng: &mut Rng) -> Result<VideoLayout> {
    let idx = sample_indices(video.frames.len(), n, mode, rng)?;
    Ok(VideoLayout {
        id: video.id.clone(),
        frames: idx.iter().map(|&i| video.frames[i].clone()).collect(),
        label: video.label.clone(),
    })
}

/// Objects kept when a frame holds more than `m_max`: the highest scores,
/// ties resolved by input order, returned in input order. Objects without a
/// score count as certain.
pub fn retained_objects(frame: &FrameLayout, m_max: usize) -> Vec<ObjectInstance> {
    if frame.objects.len() <= m_max {
        return frame.objects.clone();
    }
    let mut order: Vec<usize> = (0..frame.objects.len()).collect();
    let score = |i: usize| frame.objects[i].score.unwrap_or(1.0);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let mut keep = order[..m_max].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| frame.objects[i].clone()).collect()
}

/// Fixed-size object slots and their validity mask. Padding slots carry the
/// padding category and an all-zero box.
pub fn pad_objects(frame: &FrameLayout, m_max: usize) -> (Vec<ObjectInstance>, Vec<bool>) {
    let mut objects = retained_objects(frame, m_max);
    let mut mask = vec![true; objects.len()];
    while objects.len() < m_max {
        objects.push(ObjectInstance { category: PADDING_CATEGORY, bbox: BoundingBox::ZERO, score: None });
        mask.push(false);
    }
    (objects, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts<'a>(v: &'a Vocabulary, a: &'a ActionSet) -> ParseOptions<'a> {
        ParseOptions {
            vocabulary: v,
            actions: a,
            task: TaskMode::SingleLabel,
            policy: CategoryPolicy::Strict,
            oracle: false,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_box([0.0, 0.0, 640.0, 480.0], 640.0, 480.0).unwrap(), BoundingBox::FULL);
        let b = normalize_box([120.0, 60.0, 240.0, 180.0], 480.0, 360.0).unwrap();
        assert_eq!((b.x1, b.x2, b.y2), (0.25, 0.5, 0.5));
        assert!((b.y1 - 0.1667).abs() < 1e-4);
        assert!(matches!(
            normalize_box([240.0, 60.0, 120.0, 180.0], 480.0, 360.0),
            Err(StltError::MalformedBox { .. })
        ));
    }

    #[test]
    fn normalize_clamps_within_tolerance() {
        let b = normalize_box([-0.5, 0.0, 100.7, 50.0], 100.0, 50.0).unwrap();
        assert_eq!(b, BoundingBox::FULL);
        assert!(normalize_box([-3.0, 0.0, 10.0, 10.0], 100.0, 50.0).is_err());
        assert!(normalize_box([0.0, 0.0, 10.0, 10.0], 0.0, 50.0).is_err());
    }

    #[test]
    fn minimal_record() {
        let v = Vocabulary::hand_object();
        let a = ActionSet::new(vec!["push".into()]).unwrap();
        let line = r#"{"id":"x","label":"push","width":320,"height":240,"frames":[{"objects":[{"category":"hand","box":[0,0,320,240]}]}]}"#;
        let p = parse_annotations(line.as_bytes(), &opts(&v, &a)).unwrap();
        assert_eq!(p.videos.len(), 1);
        assert_eq!(p.videos[0].frames.len(), 1);
        assert_eq!(p.videos[0].frames[0].objects[0].bbox, BoundingBox::FULL);
        assert_eq!(p.videos[0].frames[0].objects[0].category, 2);
    }

    #[test]
    fn missing_field_reports_line() {
        let v = Vocabulary::hand_object();
        let a = ActionSet::new(vec!["push".into()]).unwrap();
        let text = "\n{\"id\":\"x\",\"label\":\"push\",\"width\":1,\"height\":1,\"frames\":[{\"objects\":[]}]}\n{\"id\":\"y\",\"width\":1,\"height\":1,\"frames\":[]}\n";
        match parse_annotations(text.as_bytes(), &opts(&v, &a)) {
            Err(StltError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn score_threshold_and_oracle() {
        let v = Vocabulary::hand_object();
        let a = ActionSet::new(vec!["push".into()]).unwrap();
        let line = r#"{"id":"x","label":0,"width":1,"height":1,"frames":[{"objects":[{"category":"hand","box":[0,0,1,1],"score":0.3},{"category":"object","box":[0,0,0.5,0.5],"score":0.7}]}]}"#;
        let mut o = opts(&v, &a);
        assert_eq!(parse_annotations(line.as_bytes(), &o).unwrap().videos[0].frames[0].objects.len(), 1);
        o.oracle = true;
        assert_eq!(parse_annotations(line.as_bytes(), &o).unwrap().videos[0].frames[0].objects.len(), 2);
    }

    #[test]
    fn label_modes() {
        let v = Vocabulary::hand_object();
        let a = ActionSet::new(vec!["a".into(), "b".into()]).unwrap();
        let line = r#"{"id":"x","label":["b","a"],"width":1,"height":1,"frames":[{"objects":[]}]}"#;
        let mut o = opts(&v, &a);
        assert!(parse_annotations(line.as_bytes(), &o).is_err());
        o.task = TaskMode::MultiLabel;
        assert_eq!(parse_annotations(line.as_bytes(), &o).unwrap().videos[0].label, Label::Multi(vec![0, 1]));
    }

    #[test]
    fn uniform_sampling_formula() {
        let mut rng = Rng::seed(0);
        assert_eq!(sample_indices(16, 16, SamplingMode::Uniform, &mut rng).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(sample_indices(16, 16, SamplingMode::Random, &mut rng).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(
            sample_indices(32, 16, SamplingMode::Uniform, &mut rng).unwrap(),
            (0..16).map(|i| 2 * i).collect::<Vec<_>>()
        );
        assert_eq!(sample_indices(3, 5, SamplingMode::Uniform, &mut rng).unwrap(), vec![0, 1, 2, 2, 2]);
        assert!(sample_indices(0, 5, SamplingMode::Uniform, &mut rng).is_err());
    }

    #[test]
    fn random_sampling_is_sorted_and_repeatable() {
        let a = sample_indices(100, 16, SamplingMode::Random, &mut Rng::seed(3)).unwrap();
        let b = sample_indices(100, 16, SamplingMode::Random, &mut Rng::seed(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    fn obj(score: f64) -> ObjectInstance {
        ObjectInstance { category: 2, bbox: BoundingBox::FULL, score: Some(score) }
    }

    #[test]
    fn padding_examples() {
        let (objs, mask) = pad_objects(&FrameLayout::default(), 4);
        assert_eq!(objs.len(), 4);
        assert!(mask.iter().all(|m| !m));
        assert!(objs.iter().all(|o| o.category == PADDING_CATEGORY && o.bbox == BoundingBox::ZERO));
        let full = FrameLayout { objects: (0..4).map(|i| obj(i as f64 / 4.0)).collect() };
        let (objs, mask) = pad_objects(&full, 4);
        assert_eq!(objs, full.objects);
        assert!(mask.iter().all(|m| *m));
    }

    #[test]
    fn keeps_highest_scores() {
        let scores = [0.2, 0.9, 0.5, 0.9, 0.1, 0.7];
        let frame = FrameLayout { objects: scores.iter().map(|&s| obj(s)).collect() };
        let (objs, _) = pad_objects(&frame, 4);
        let kept: Vec<f64> = objs.iter().map(|o| o.score.unwrap()).collect();
        // Sort-based oracle: indices of the four largest, ties by position.
        let mut idx: Vec<usize> = (0..6).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut top: Vec<usize> = idx[..4].to_vec();
        top.sort();
        assert_eq!(kept, top.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    }
}
