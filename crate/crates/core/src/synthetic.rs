//! Procedural layout-action videos.
//!
//! Each action is a trajectory program over normalized time. Object 0 is
//! always the hand; the remaining participants are generic objects. Per-frame
//! jitter is a translation shared by every object in the frame, so relations
//! between objects (distances, containment, relative angles) are exact and the
//! defining predicate of each action can be checked on the emitted layout.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stlt_engine::{Rng, Tensor};

use crate::error::{config_err, data_err, Result};
use crate::layout::{ActionSet, BoundingBox, FrameLayout, Label, ObjectInstance, VideoLayout, Vocabulary};

pub const HAND: usize = 2;
pub const OBJECT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Approach,
    MoveApart,
    DropInto,
    TakeOutOf,
    PickUp,
    PutDown,
    PassOver,
    PassUnder,
    CircleAround,
    SwapPositions,
    ShrinkAway,
    GrowToward,
}

pub const ACTION_KINDS: [ActionKind; 12] = [
    ActionKind::Approach,
    ActionKind::MoveApart,
    ActionKind::DropInto,
    ActionKind::TakeOutOf,
    ActionKind::PickUp,
    ActionKind::PutDown,
    ActionKind::PassOver,
    ActionKind::PassUnder,
    ActionKind::CircleAround,
    ActionKind::SwapPositions,
    ActionKind::ShrinkAway,
    ActionKind::GrowToward,
];

/// Number of trajectory variants per action kind.
pub const VARIANTS: usize = 16;

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Approach => "approach",
            ActionKind::MoveApart => "move-apart",
            ActionKind::DropInto => "drop-into",
            ActionKind::TakeOutOf => "take-out-of",
            ActionKind::PickUp => "pick-up",
            ActionKind::PutDown => "put-down",
            ActionKind::PassOver => "pass-over",
            ActionKind::PassUnder => "pass-under",
            ActionKind::CircleAround => "circle-around",
            ActionKind::SwapPositions => "swap-positions",
            ActionKind::ShrinkAway => "shrink-away",
            ActionKind::GrowToward => "grow-toward",
        }
    }

    pub fn objects(self) -> usize {
        match self {
            ActionKind::DropInto | ActionKind::TakeOutOf => 3,
            _ => 2,
        }
    }
}

/// One action class: a kind plus a variant that mirrors, re-times or
/// rescales the trajectory (bit 0: mirror horizontally, bit 1: eased timing,
/// bit 2: smaller objects, bit 3: larger hand).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionScript {
    pub id: usize,
    pub kind: ActionKind,
    pub variant: usize,
    /// Minimum change of the action's defining quantity (normalized units).
    pub min_travel: f64,
    /// Half-width of the uniform per-frame translation noise.
    pub jitter: f64,
}

pub const DEFAULT_MIN_TRAVEL: f64 = 0.2;
pub const DEFAULT_JITTER: f64 = 0.02;
pub const RETRY_CAP: usize = 100;

impl ActionScript {
    pub fn new(id: usize, kind: ActionKind, variant: usize) -> Self {
        Self { id, kind, variant, min_travel: DEFAULT_MIN_TRAVEL, jitter: DEFAULT_JITTER }
    }

    /// The first `n` actions: the twelve kinds, then their variants.
    pub fn catalog(n: usize) -> Result<Vec<ActionScript>> {
        if n > ACTION_KINDS.len() * VARIANTS {
            return Err(config_err(format!("at most {} synthetic actions exist", ACTION_KINDS.len() * VARIANTS)));
        }
        Ok((0..n).map(|i| ActionScript::new(i, ACTION_KINDS[i % 12], i / 12)).collect())
    }

    pub fn name(&self) -> String {
        if self.variant == 0 {
            self.kind.name().to_string()
        } else {
            format!("{}/v{}", self.kind.name(), self.variant)
        }
    }

    pub fn object_count(&self) -> usize {
        self.kind.objects()
    }

    fn mirrored(&self) -> bool {
        self.variant & 1 != 0
    }

    fn ease(&self, t: f64) -> f64 {
        if self.variant & 2 != 0 {
            t * t * (3.0 - 2.0 * t)
        } else {
            t
        }
    }

    fn object_scale(&self) -> f64 {
        if self.variant & 4 != 0 {
            0.8
        } else {
            1.0
        }
    }

    fn hand_scale(&self) -> f64 {
        if self.variant & 8 != 0 {
            1.25
        } else {
            1.0
        }
    }
}

pub fn action_set(scripts: &[ActionScript]) -> ActionSet {
    ActionSet::new(scripts.iter().map(ActionScript::name).collect()).expect("catalog names are distinct")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub id: usize,
    pub shape: Shape,
    pub color: [f64; 3],
    pub texture_seed: u64,
    /// Typical box side length.
    pub size_prior: f64,
    /// Width over height.
    pub aspect: f64,
}

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl ObjectStyle {
    /// Deterministic style for an id.
    pub fn from_id(id: usize) -> Self {
        let mut rng = Rng::seed(0x5717_1e00 ^ id as u64);
        let shape = [Shape::Rectangle, Shape::Ellipse, Shape::Triangle, Shape::Cross][id % 4];
        let hue = (id as f64 * 0.618_033_988_75).fract();
        let value = if (id / 4) % 2 == 0 { 0.95 } else { 0.7 };
        Self {
            id,
            shape,
            color: hsv(hue, 0.85, value),
            texture_seed: rng.fork(1).key(),
            size_prior: rng.uniform_range(0.14, 0.2),
            aspect: rng.uniform_range(0.8, 1.25),
        }
    }

    /// Spacing of the dotted texture in pixels, or 0 for a flat fill.
    fn texture_spacing(&self) -> usize {
        [0, 5, 6, 7][(self.texture_seed % 4) as usize]
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        match self.shape {
            Shape::Rectangle => true,
            Shape::Ellipse => (px - 0.5).powi(2) + (py - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (px - 0.5).abs() <= py / 2.0,
            Shape::Cross => (px - 0.5).abs() <= 1.0 / 6.0 || (py - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

pub fn style_pool(ids: impl IntoIterator<Item = usize>) -> Vec<ObjectStyle> {
    ids.into_iter().map(ObjectStyle::from_id).collect()
}

/// Everything needed to reproduce a generated video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub actions: Vec<usize>,
    pub styles: Vec<usize>,
    pub length: usize,
    pub seed: u64,
    pub attempts: usize,
    pub corrupted: bool,
}

/// Per-object center and extent at one instant.
#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

fn lerp(a: f64, b: f64, p: f64) -> f64 {
    a + (b - a) * p
}

fn phase(p: f64, start: f64, end: f64) -> f64 {
    ((p - start) / (end - start)).clamp(0.0, 1.0)
}

fn side(rng: &mut Rng) -> f64 {
    if rng.bernoulli(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// A trajectory program with its random parameters drawn.
type Program = Box<dyn Fn(f64) -> Vec<Placement>>;

fn draw_program(script: &ActionScript, sizes: &[(f64, f64)], rng: &mut Rng) -> Program {
    let hand = sizes[0];
    let obj = sizes[1];
    let at = |s: (f64, f64), cx: f64, cy: f64| Placement { cx, cy, w: s.0, h: s.1 };
    match script.kind {
        ActionKind::Approach | ActionKind::MoveApart => {
            let (bx, by) = (rng.uniform_range(0.35, 0.65), rng.uniform_range(0.35, 0.65));
            let theta = rng.uniform_range(0.0, 2.0 * PI);
            let far = rng.uniform_range(0.4, 0.5);
            let near = rng.uniform_range(0.12, 0.18);
            let (d0, d1) = if script.kind == ActionKind::Approach { (far, near) } else { (near, far) };
            Box::new(move |p| {
                let d = lerp(d0, d1, p);
                vec![at(hand, bx + d * theta.cos(), by + d * theta.sin()), at(obj, bx, by)]
            })
        }
        ActionKind::DropInto => {
            let container = (sizes[2].0 * 1.6, sizes[2].1 * 1.6);
            let inner = (obj.0 * 0.6, obj.1 * 0.6);
            let (cx, cy) = (rng.uniform_range(0.3, 0.7), rng.uniform_range(0.62, 0.75));
            let x0 = cx + side(rng) * rng.uniform_range(0.15, 0.3);
            let y0 = rng.uniform_range(0.22, 0.3);
            Box::new(move |p| {
                let x = lerp(x0, cx, phase(p, 0.0, 0.4));
                let y = lerp(y0, cy, phase(p, 0.5, 0.9));
                let hy = y0 - 0.5 * inner.1;
                vec![at(hand, x, hy), at(inner, x, y), at(container, cx, cy)]
            })
        }
        ActionKind::TakeOutOf => {
            let container = (sizes[2].0 * 1.6, sizes[2].1 * 1.6);
            let inner = (obj.0 * 0.6, obj.1 * 0.6);
            let (cx, cy) = (rng.uniform_range(0.3, 0.7), rng.uniform_range(0.62, 0.75));
            let hx0 = cx + side(rng) * rng.uniform_range(0.15, 0.3);
            let hy0 = rng.uniform_range(0.15, 0.25);
            let y_end = rng.uniform_range(0.2, 0.25);
            Box::new(move |p| {
                let grip = (cx, cy - 0.5 * inner.1);
                let reach = phase(p, 0.0, 0.4);
                let lift = phase(p, 0.5, 1.0);
                let by = lerp(cy, y_end, lift);
                let (hx, hy) = if lift > 0.0 {
                    (cx, by - 0.5 * inner.1)
                } else {
                    (lerp(hx0, grip.0, reach), lerp(hy0, grip.1, reach))
                };
                vec![at(hand, hx, hy), at(inner, cx, by), at(container, cx, cy)]
            })
        }
        ActionKind::PickUp => {
            let (bx, by) = (rng.uniform_range(0.35, 0.65), rng.uniform_range(0.62, 0.75));
            let hx0 = bx + side(rng) * rng.uniform_range(0.25, 0.32);
            let hy0 = by + rng.uniform_range(-0.1, 0.05);
            let lift = rng.uniform_range(0.32, 0.4);
            Box::new(move |p| {
                let reach = phase(p, 0.0, 0.45);
                let up = lift * phase(p, 0.5, 1.0);
                let gy = by - 0.35 * obj.1;
                vec![at(hand, lerp(hx0, bx, reach), lerp(hy0, gy, reach) - up), at(obj, bx, by - up)]
            })
        }
        ActionKind::PutDown => {
            let (bx, by) = (rng.uniform_range(0.35, 0.65), rng.uniform_range(0.25, 0.32));
            let drop = rng.uniform_range(0.3, 0.4);
            let away = side(rng);
            Box::new(move |p| {
                let y = by + drop * phase(p, 0.0, 0.5);
                let leave = phase(p, 0.6, 1.0);
                let hx = bx + away * 0.3 * leave;
                let hy = y - 0.35 * obj.1 - 0.25 * leave;
                vec![at(hand, hx, hy), at(obj, bx, y)]
            })
        }
        ActionKind::PassOver | ActionKind::PassUnder => {
            let over = script.kind == ActionKind::PassOver;
            let bx = rng.uniform_range(0.4, 0.6);
            let by = if over { rng.uniform_range(0.55, 0.7) } else { rng.uniform_range(0.3, 0.45) };
            let gap = rng.uniform_range(0.22, 0.3);
            let hy = if over { by - gap } else { by + gap };
            let dir = side(rng);
            let reach = rng.uniform_range(0.3, 0.36);
            Box::new(move |p| vec![at(hand, bx + dir * lerp(-reach, reach, p), hy), at(obj, bx, by)])
        }
        ActionKind::CircleAround => {
            let (bx, by) = (rng.uniform_range(0.42, 0.58), rng.uniform_range(0.42, 0.58));
            let r = rng.uniform_range(0.22, 0.28);
            let phi0 = rng.uniform_range(0.0, 2.0 * PI);
            let total = rng.uniform_range(1.5 * PI, 1.9 * PI);
            Box::new(move |p| {
                let phi = phi0 + total * p;
                vec![at(hand, bx + r * phi.cos(), by + r * phi.sin()), at(obj, bx, by)]
            })
        }
        ActionKind::SwapPositions => {
            let d = rng.uniform_range(0.35, 0.5);
            let x0 = rng.uniform_range(0.15, 0.85 - d);
            let y = rng.uniform_range(0.4, 0.6);
            let arc = rng.uniform_range(0.12, 0.2);
            Box::new(move |p| {
                let bump = arc * (PI * p).sin();
                vec![at(hand, lerp(x0, x0 + d, p), y - bump), at(obj, lerp(x0 + d, x0, p), y + bump)]
            })
        }
        ActionKind::ShrinkAway | ActionKind::GrowToward => {
            let (bx, by) = (rng.uniform_range(0.35, 0.65), rng.uniform_range(0.4, 0.6));
            let (s0, s1) = if script.kind == ActionKind::ShrinkAway { (1.3, 0.55) } else { (0.55, 1.3) };
            let (y0, y1) = if script.kind == ActionKind::ShrinkAway { (by + 0.05, by - 0.05) } else { (by - 0.05, by + 0.05) };
            let hx = bx + side(rng) * rng.uniform_range(0.28, 0.33);
            let hy = by + rng.uniform_range(-0.05, 0.1);
            Box::new(move |p| {
                let s = lerp(s0, s1, p);
                vec![at(hand, hx, hy), Placement { cx: bx, cy: lerp(y0, y1, p), w: obj.0 * s, h: obj.1 * s }]
            })
        }
    }
}

fn centers(frame: &FrameLayout) -> Vec<(f64, f64)> {
    frame.objects.iter().map(|o| o.bbox.center()).collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Checks the defining geometric predicate of `script` on emitted frames.
pub fn predicate_holds(script: &ActionScript, frames: &[FrameLayout]) -> bool {
    let t = frames.len();
    if t < 2 || frames.iter().any(|f| f.objects.len() != script.object_count()) {
        return false;
    }
    let c: Vec<Vec<(f64, f64)>> = frames.iter().map(centers).collect();
    let b = |i: usize, k: usize| frames[i].objects[k].bbox;
    let last = t - 1;
    let travel = script.min_travel;
    let tail = (t * 2).div_ceil(5);
    let offset = |i: usize| (c[i][0].0 - c[i][1].0, c[i][0].1 - c[i][1].1);
    let same = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() <= 1e-9 && (a.1 - b.1).abs() <= 1e-9;
    match script.kind {
        ActionKind::Approach | ActionKind::MoveApart => {
            let d: Vec<f64> = c.iter().map(|f| dist(f[0], f[1])).collect();
            if script.kind == ActionKind::Approach {
                d.windows(2).all(|w| w[1] < w[0]) && d[0] - d[last] >= travel
            } else {
                d.windows(2).all(|w| w[1] > w[0]) && d[last] - d[0] >= travel
            }
        }
        ActionKind::DropInto => {
            b(last, 2).contains(c[last][1].0, c[last][1].1) && !b(0, 2).contains(c[0][1].0, c[0][1].1)
        }
        ActionKind::TakeOutOf => {
            b(0, 2).contains(c[0][1].0, c[0][1].1)
                && !b(last, 2).contains(c[last][1].0, c[last][1].1)
                && c[last][1].1 < b(last, 2).y1
        }
        ActionKind::PickUp => {
            let s = t - tail;
            (s..t).all(|i| b(i, 0).overlaps(&b(i, 1)) && same(offset(i), offset(last)))
                && c[s][1].1 - c[last][1].1 >= 0.75 * travel
        }
        ActionKind::PutDown => {
            (0..tail).all(|i| b(i, 0).overlaps(&b(i, 1)) && same(offset(i), offset(0)))
                && c[tail - 1][1].1 - c[0][1].1 >= 0.75 * travel
                && !b(last, 0).overlaps(&b(last, 1))
        }
        ActionKind::PassOver | ActionKind::PassUnder => {
            let over = script.kind == ActionKind::PassOver;
            let ordered = c.iter().all(|f| if over { f[0].1 < f[1].1 } else { f[0].1 > f[1].1 });
            let (dx0, dx1) = (c[0][0].0 - c[0][1].0, c[last][0].0 - c[last][1].0);
            ordered && dx0 * dx1 < 0.0 && dx0.abs() >= 0.1 && dx1.abs() >= 0.1
        }
        ActionKind::CircleAround => {
            let angles: Vec<f64> = c.iter().map(|f| (f[0].1 - f[1].1).atan2(f[0].0 - f[1].0)).collect();
            let steps: Vec<f64> = angles
                .windows(2)
                .map(|w| {
                    let d = w[1] - w[0];
                    (d + PI).rem_euclid(2.0 * PI) - PI
                })
                .collect();
            let total: f64 = steps.iter().sum();
            steps.iter().all(|s| s * total > 0.0) && total.abs() >= 1.25 * PI
        }
        ActionKind::SwapPositions => {
            dist(c[0][0], c[0][1]) >= 0.3 && dist(c[last][0], c[0][1]) <= 0.08 && dist(c[last][1], c[0][0]) <= 0.08
        }
        ActionKind::ShrinkAway | ActionKind::GrowToward => {
            let a: Vec<f64> = (0..t).map(|i| b(i, 1).area()).collect();
            if script.kind == ActionKind::ShrinkAway {
                a.windows(2).all(|w| w[1] < w[0]) && a[last] <= 0.6 * a[0]
            } else {
                a.windows(2).all(|w| w[1] > w[0]) && a[0] <= 0.6 * a[last]
            }
        }
    }
}

fn object_sizes(script: &ActionScript, styles: &[ObjectStyle]) -> Vec<(f64, f64)> {
    styles
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let scale = if i == 0 { script.hand_scale() } else { script.object_scale() };
            let side = s.size_prior * scale;
            (side * s.aspect.sqrt(), side / s.aspect.sqrt())
        })
        .collect()
}

fn emit(script: &ActionScript, program: &Program, length: usize, rng: &mut Rng) -> Option<Vec<FrameLayout>> {
    let mut frames = Vec::with_capacity(length);
    for i in 0..length {
        let p = script.ease(i as f64 / (length - 1) as f64);
        let (jx, jy) = (rng.uniform_range(-script.jitter, script.jitter), rng.uniform_range(-script.jitter, script.jitter));
        let mut objects = Vec::new();
        for (k, pl) in program(p).into_iter().enumerate() {
            let cx = if script.mirrored() { 1.0 - pl.cx } else { pl.cx } + jx;
            let cy = pl.cy + jy;
            let bbox = BoundingBox::new(cx - pl.w / 2.0, cy - pl.h / 2.0, cx + pl.w / 2.0, cy + pl.h / 2.0).ok()?;
            let category = if k == 0 { HAND } else { OBJECT };
            objects.push(ObjectInstance { category, bbox, score: None });
        }
        frames.push(FrameLayout { objects });
    }
    Some(frames)
}

pub const MIN_LENGTH: usize = 8;

/// Generates one video of `script`. Attempts whose trajectory leaves the
/// frame or violates the action predicate are redrawn from a fresh substream,
/// at most [`RETRY_CAP`] times.
pub fn generate_video(
    script: &ActionScript,
    styles: &[ObjectStyle],
    length: usize,
    seed: u64,
) -> Result<(VideoLayout, SyntheticVideoSpec)> {
    if styles.len() != script.object_count() {
        return Err(config_err(format!(
            "`{}` has {} objects but {} styles were given",
            script.name(),
            script.object_count(),
            styles.len()
        )));
    }
    if length < MIN_LENGTH {
        return Err(config_err(format!("video length {length} is below {MIN_LENGTH}")));
    }
    let root = Rng::seed(seed);
    let sizes = object_sizes(script, styles);
    for attempt in 0..RETRY_CAP {
        let mut rng = root.fork(attempt as u64);
        let program = draw_program(script, &sizes, &mut rng);
        if let Some(frames) = emit(script, &program, length, &mut rng) {
            if predicate_holds(script, &frames) {
                let video = VideoLayout { id: format!("{}-{seed:016x}", script.name()), frames, label: Label::Single(script.id) };
                let spec = SyntheticVideoSpec {
                    actions: vec![script.id],
                    styles: styles.iter().map(|s| s.id).collect(),
                    length,
                    seed,
                    attempts: attempt + 1,
                    corrupted: false,
                };
                return Ok((video, spec));
            }
        }
    }
    Err(data_err(format!("`{}` failed its predicate {RETRY_CAP} times (seed {seed})", script.name())))
}

fn squeeze(frames: &mut [FrameLayout], offset: f64) {
    for f in frames {
        for o in &mut f.objects {
            o.bbox.x1 = o.bbox.x1 * 0.5 + offset;
            o.bbox.x2 = o.bbox.x2 * 0.5 + offset;
        }
    }
}

/// Two actions side by side, each squeezed into one half of the frame.
pub fn generate_pair(
    left: (&ActionScript, &[ObjectStyle]),
    right: (&ActionScript, &[ObjectStyle]),
    length: usize,
    seed: u64,
) -> Result<(VideoLayout, SyntheticVideoSpec)> {
    let root = Rng::seed(seed);
    let (mut a, sa) = generate_video(left.0, left.1, length, root.fork(0).key())?;
    let (mut b, sb) = generate_video(right.0, right.1, length, root.fork(1).key())?;
    squeeze(&mut a.frames, 0.0);
    squeeze(&mut b.frames, 0.5);
    for (fa, fb) in a.frames.iter_mut().zip(b.frames) {
        fa.objects.extend(fb.objects);
    }
    let video = VideoLayout {
        id: format!("{}+{}-{seed:016x}", left.0.name(), right.0.name()),
        frames: a.frames,
        label: Label::multi(vec![left.0.id, right.0.id]),
    };
    let spec = SyntheticVideoSpec {
        actions: vec![left.0.id, right.0.id],
        styles: sa.styles.into_iter().chain(sb.styles).collect(),
        length,
        seed,
        attempts: sa.attempts + sb.attempts,
        corrupted: false,
    };
    Ok((video, spec))
}

/// Replaces a layout by a detector-like noisy version: categories drawn at
/// random and every coordinate perturbed by up to `noise`.
pub fn corrupt_layout(video: &VideoLayout, vocabulary: &Vocabulary, noise: f64, rng: &mut Rng) -> VideoLayout {
    let stored = vocabulary.categories().len();
    let mut out = video.clone();
    for f in &mut out.frames {
        for o in &mut f.objects {
            o.category = 2 + rng.below(stored);
            let mut c = o.bbox.coords().map(|v| (v + rng.uniform_range(-noise, noise)).clamp(0.0, 1.0));
            if c[0] > c[2] {
                c.swap(0, 2);
            }
            if c[1] > c[3] {
                c.swap(1, 3);
            }
            o.bbox = BoundingBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitKind {
    Compositional,
    /// `novel` actions are held out of training; `shots` videos of each form
    /// the fine-tuning set.
    FewShot { shots: usize, novel: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub actions: usize,
    pub train_styles: Vec<usize>,
    pub test_styles: Vec<usize>,
    pub train_videos: usize,
    pub test_videos: usize,
    pub length: usize,
    /// Probability that a training video's main object has the style
    /// preferred by its action.
    pub style_bias: f64,
    /// Fraction of videos whose observed layout is corrupted.
    pub corrupt_fraction: f64,
    pub corrupt_noise: f64,
    pub multi_label: bool,
}

impl SplitSpec {
    pub fn compositional(actions: usize, train_videos: usize, test_videos: usize) -> Self {
        Self {
            kind: SplitKind::Compositional,
            actions,
            train_styles: (0..8).collect(),
            test_styles: (8..16).collect(),
            train_videos,
            test_videos,
            length: 32,
            style_bias: 0.8,
            corrupt_fraction: 0.0,
            corrupt_noise: 0.1,
            multi_label: false,
        }
    }

    pub fn base_actions(&self) -> Vec<usize> {
        match &self.kind {
            SplitKind::Compositional => (0..self.actions).collect(),
            SplitKind::FewShot { novel, .. } => (0..self.actions).filter(|a| !novel.contains(a)).collect(),
        }
    }
}

/// A generated video: the layout the model observes and the clean scene
/// that appearance frames are rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub layout: VideoLayout,
    pub scene: VideoLayout,
    pub spec: SyntheticVideoSpec,
}

impl SyntheticVideo {
    pub fn styles(&self) -> Vec<ObjectStyle> {
        style_pool(self.spec.styles.iter().copied())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub vocabulary: Vocabulary,
    pub actions: ActionSet,
    pub scripts: Vec<ActionScript>,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
    pub finetune: Vec<SyntheticVideo>,
}

fn pick_distinct(pool: &[usize], count: usize, first: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = first.into_iter().collect();
    let mut rest: Vec<usize> = pool.iter().copied().filter(|s| !chosen.contains(s)).collect();
    rng.shuffle(&mut rest);
    chosen.extend(rest.into_iter().take(count - chosen.len()));
    chosen
}

struct Generator<'a> {
    spec: &'a SplitSpec,
    scripts: &'a [ActionScript],
    vocabulary: &'a Vocabulary,
}

impl Generator<'_> {
    /// Styles for one action: the main object (index 1) first, preferred with
    /// probability `bias`.
    fn styles_for(&self, action: usize, pool: &[usize], bias: f64, rng: &mut Rng) -> Vec<ObjectStyle> {
        let n = self.scripts[action].object_count();
        let main = if rng.bernoulli(bias) { pool[action % pool.len()] } else { pool[rng.below(pool.len())] };
        let mut ids = pick_distinct(pool, n, Some(main), rng);
        ids.swap(0, 1);
        style_pool(ids)
    }

    fn video(&self, prefix: &str, index: usize, actions: &[usize], pool: &[usize], bias: f64, rng: &Rng) -> Result<SyntheticVideo> {
        let seed = rng.fork(index as u64).key();
        let mut srng = rng.fork(index as u64).fork_named("styles");
        let (mut layout, spec) = if actions.len() == 1 {
            let styles = self.styles_for(actions[0], pool, bias, &mut srng);
            generate_video(&self.scripts[actions[0]], &styles, self.spec.length, seed)?
        } else {
            let sa = self.styles_for(actions[0], pool, bias, &mut srng);
            let sb = self.styles_for(actions[1], pool, bias, &mut srng);
            generate_pair((&self.scripts[actions[0]], &sa), (&self.scripts[actions[1]], &sb), self.spec.length, seed)?
        };
        layout.id = format!("{prefix}-{index:05}");
        Ok(SyntheticVideo { scene: layout.clone(), layout, spec })
    }

    fn set(&self, prefix: &str, count: usize, actions: &[usize], pool: &[usize], bias: f64, rng: &mut Rng) -> Result<Vec<SyntheticVideo>> {
        let mut order: Vec<usize> = (0..count).map(|i| actions[i % actions.len()]).collect();
        rng.fork_named("order").shuffle(&mut order);
        let mut prng = rng.fork_named("pairs");
        let vrng = rng.fork_named("videos");
        let mut out = Vec::with_capacity(count);
        for (i, &a) in order.iter().enumerate() {
            let acts = if self.spec.multi_label {
                let others: Vec<usize> = actions.iter().copied().filter(|&b| b != a).collect();
                if others.is_empty() {
                    return Err(config_err("multi-label videos need at least two actions"));
                }
                vec![a, others[prng.below(others.len())]]
            } else {
                vec![a]
            };
            out.push(self.video(prefix, i, &acts, pool, bias, &vrng)?);
        }
        let mut crng = rng.fork_named("corrupt");
        let corrupt = (self.spec.corrupt_fraction * count as f64).round() as usize;
        let picks = crng.sample_sorted(count, corrupt);
        for i in picks {
            let v = &mut out[i];
            v.layout = corrupt_layout(&v.layout, self.vocabulary, self.spec.corrupt_noise, &mut crng.fork(i as u64));
            v.spec.corrupted = true;
        }
        Ok(out)
    }
}

/// Builds train/test (and few-shot fine-tuning) sets. Actions are assigned
/// round-robin, so per-set action counts differ by at most one.
pub fn make_split(spec: &SplitSpec, seed: u64) -> Result<Split> {
    let scripts = ActionScript::catalog(spec.actions)?;
    let need = scripts.iter().map(ActionScript::object_count).max().unwrap_or(0);
    if spec.train_styles.iter().any(|s| spec.test_styles.contains(s)) {
        return Err(config_err("train and test style sets overlap"));
    }
    if spec.train_styles.len() < need || spec.test_styles.len() < need {
        return Err(config_err(format!("each style set needs at least {need} styles")));
    }
    if !(0.0..=1.0).contains(&spec.style_bias) || !(0.0..=1.0).contains(&spec.corrupt_fraction) {
        return Err(config_err("style bias and corrupt fraction must lie in [0, 1]"));
    }
    let vocabulary = Vocabulary::hand_object();
    let generator = Generator { spec, scripts: &scripts, vocabulary: &vocabulary };
    let root = Rng::seed(seed);
    let base = spec.base_actions();
    if base.is_empty() {
        return Err(config_err("no training actions"));
    }
    let (train, test, finetune) = match &spec.kind {
        SplitKind::Compositional => {
            let train = generator.set("train", spec.train_videos, &base, &spec.train_styles, spec.style_bias, &mut root.fork(0))?;
            let test = generator.set("test", spec.test_videos, &base, &spec.test_styles, 0.0, &mut root.fork(1))?;
            (train, test, Vec::new())
        }
        SplitKind::FewShot { shots, novel } => {
            if novel.is_empty() || novel.iter().any(|&a| a >= spec.actions) {
                return Err(config_err("few-shot novel actions must be non-empty and inside the catalog"));
            }
            let train = generator.set("base", spec.train_videos, &base, &spec.train_styles, spec.style_bias, &mut root.fork(0))?;
            let test = generator.set("novel-test", spec.test_videos, novel, &spec.train_styles, 0.0, &mut root.fork(1))?;
            let ft = generator.set("novel-train", shots * novel.len(), novel, &spec.train_styles, 0.0, &mut root.fork(2))?;
            (train, test, ft)
        }
    };
    Ok(Split { actions: action_set(&scripts), vocabulary, scripts, train, test, finetune })
}

/// Renders one frame channels-last into `out` (`res·res·3` values).
pub fn render_into(frame: &FrameLayout, styles: &[ObjectStyle], res: usize, out: &mut [f64]) {
    for px in out.chunks_exact_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    for (o, style) in frame.objects.iter().zip(styles) {
        let b = o.bbox;
        let (c0, c1) = (((b.x1 * res as f64) - 0.5).ceil().max(0.0) as usize, ((b.x2 * res as f64) - 0.5).floor());
        let (r0, r1) = (((b.y1 * res as f64) - 0.5).ceil().max(0.0) as usize, ((b.y2 * res as f64) - 0.5).floor());
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let (c1, r1) = ((c1 as usize).min(res - 1), (r1 as usize).min(res - 1));
        let spacing = style.texture_spacing();
        let dark = style.color.map(|v| v * 0.6);
        for r in r0..=r1 {
            let v = (r as f64 + 0.5) / res as f64;
            for c in c0..=c1 {
                let u = (c as f64 + 0.5) / res as f64;
                let px = if b.width() > 0.0 { (u - b.x1) / b.width() } else { 0.5 };
                let py = if b.height() > 0.0 { (v - b.y1) / b.height() } else { 0.5 };
                if !style.covers(px, py) {
                    continue;
                }
                let dotted = spacing > 0 && r % spacing == 0 && c % spacing == 0;
                let color = if dotted { dark } else { style.color };
                out[(r * res + c) * 3..(r * res + c) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Renders a frame as a `[3, res, res]` image. Objects are painted in order,
/// the `k`-th with `styles[k]`.
pub fn rasterize_frame(frame: &FrameLayout, styles: &[ObjectStyle], res: usize) -> Tensor {
    let mut hwc = vec![0.0; res * res * 3];
    render_into(frame, styles, res, &mut hwc);
    let mut chw = vec![0.0; res * res * 3];
    for p in 0..res * res {
        for ch in 0..3 {
            chw[ch * res * res + p] = hwc[p * 3 + ch];
        }
    }
    Tensor::new(vec![3, res, res], chw).expect("positive resolution")
}

pub const ARCHIVE_MAGIC: &[u8; 8] = b"STLTRGB1";

/// Rendered frames of one video: `frames · res · res · 3` bytes, row-major,
/// channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameArchive {
    pub id: String,
    pub frames: usize,
    pub resolution: usize,
    pub pixels: Vec<u8>,
}

impl FrameArchive {
    pub fn render(video: &SyntheticVideo, resolution: usize) -> Self {
        Self::from_scene(&video.layout.id, &video.scene, &video.styles(), resolution)
    }

    pub fn from_scene(id: &str, scene: &VideoLayout, styles: &[ObjectStyle], resolution: usize) -> Self {
        let mut buf = vec![0.0; resolution * resolution * 3];
        let mut pixels = Vec::with_capacity(scene.frames.len() * buf.len());
        for f in &scene.frames {
            render_into(f, styles, resolution, &mut buf);
            pixels.extend(buf.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        Self { id: id.to_string(), frames: scene.frames.len(), resolution, pixels }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&(self.id.len() as u32).to_le_bytes())?;
        w.write_all(self.id.as_bytes())?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&self.pixels)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(data_err("not a frame archive"));
        }
        let mut u32_buf = [0u8; 4];
        let mut next = |r: &mut BufReader<File>| -> Result<usize> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf) as usize)
        };
        let len = next(&mut r)?;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| data_err("archive id is not UTF-8"))?;
        let frames = next(&mut r)?;
        let resolution = next(&mut r)?;
        let mut pixels = vec![0u8; frames * resolution * resolution * 3];
        r.read_exact(&mut pixels)?;
        Ok(Self { id, frames, resolution, pixels })
    }
}
