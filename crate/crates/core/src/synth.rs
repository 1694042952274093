//! Procedural image-set tasks and their consistency metrics.
//!
//! * `palette`: one shared fill color, per-panel shapes and positions.
//! * `identity`: one identity tag rendered as its fixed (shape, color)
//!   signature at per-panel positions.
//! * `effect`: a scene and its deterministic transform side by side.
//! * `mixed`: the base corpus, random attributes per panel and no shared rule.
//!
//! Shape geometry on a 32×32 panel (scaled with the panel): half-size 6, so a
//! circle of radius 6, a 12×12 square, an upward triangle with a 12 px base
//! and height, and a cross with arms 12 px long and 4 px thick. A pixel belongs
//! to a shape when its center does. The 3×3 placement cells have centers at
//! 7, 16 and 25 px.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canvas::{compose, from_u8, Canvas, PanelLayout, CHANNELS};
use crate::error::{Error, Result};
use crate::prompt::{
    tokenize, Clause, Color, EffectKind, IdentityTag, Key, Position, PromptProgram, Shape, TaskKind, TokenSeq,
};
use crate::tensor::Rng;

/// Panel background, 8-bit gray 128.
pub const BACKGROUND: u8 = 128;
/// Pass threshold of the palette metric.
pub const HUE_THRESHOLD_DEG: f64 = 30.0;
/// Best template correlation below this marks an identity call low-confidence.
pub const IDENTITY_MIN_CORR: f64 = 0.5;
/// Per-set pass threshold of the effect metric.
pub const EFFECT_RMSE_THRESHOLD: f64 = 0.15;
pub const STORM_AMPLITUDE: f32 = 0.35;
pub const STORM_DESATURATION: f32 = 0.4;
const STORM_SEED: u64 = 0x5707_4d00;
const STORM_CELL: usize = 8;
const FOREGROUND_DELTA: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Palette,
    Identity,
    Effect,
    Mixed,
}

impl TaskName {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Palette => "palette",
            TaskName::Identity => "identity",
            TaskName::Effect => "effect",
            TaskName::Mixed => "mixed",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "palette" => Ok(TaskName::Palette),
            "identity" => Ok(TaskName::Identity),
            "effect" => Ok(TaskName::Effect),
            "mixed" => Ok(TaskName::Mixed),
            _ => Err(Error::Invalid(format!(
                "unknown task {s:?} (palette, identity, effect, mixed)"
            ))),
        }
    }
}

/// A task and the attribute domains it draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: TaskName,
    /// For `mixed` only the panel size is used; the grid is drawn per set.
    pub layout: PanelLayout,
    pub colors: Vec<Color>,
    pub shapes: Vec<Shape>,
    pub positions: Vec<Position>,
    pub effects: Vec<EffectKind>,
    pub identities: Vec<IdentityTag>,
}

impl TaskSpec {
    /// Full domains; palette, identity and mixed on 2×2, effect on 1×2.
    pub fn new(name: TaskName) -> Self {
        let layout = match name {
            TaskName::Effect => PanelLayout::grid(1, 2),
            _ => PanelLayout::grid(2, 2),
        }
        .expect("supported layout");
        Self {
            name,
            layout,
            colors: Color::ALL.to_vec(),
            shapes: Shape::ALL.to_vec(),
            positions: Position::ALL.to_vec(),
            effects: EffectKind::ALL.to_vec(),
            identities: IdentityTag::ALL.to_vec(),
        }
    }

    pub fn with_layout(mut self, layout: PanelLayout) -> Result<Self> {
        self.layout = layout;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() || self.positions.is_empty() {
            return Err(Error::Invalid("empty attribute domain".into()));
        }
        match self.name {
            TaskName::Effect if self.layout.len() != 2 => {
                Err(Error::Invalid("effect sets need a two-panel layout".into()))
            }
            TaskName::Effect if self.effects.is_empty() => Err(Error::Invalid("no effects".into())),
            TaskName::Identity if self.identities.is_empty() => Err(Error::Invalid("no identities".into())),
            _ => Ok(()),
        }
    }
}

/// One image set: its panels, layout and merged prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSetRecord {
    pub task: TaskName,
    pub layout: PanelLayout,
    pub panels: Vec<Canvas>,
    pub prompt: PromptProgram,
}

impl ImageSetRecord {
    pub fn canvas(&self) -> Result<Canvas> {
        compose(&self.panels, &self.layout)
    }

    pub fn tokens(&self) -> Result<TokenSeq> {
        tokenize(&self.prompt, &self.layout)
    }
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// Quantized RGB of a palette color (full saturation and value).
pub fn color_rgb(c: Color) -> [f32; 3] {
    let rgb = hsv_to_rgb(c.hue_degrees(), 1.0, 1.0);
    rgb.map(|v| from_u8((v * 255.0).round() as u8))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees, saturation and value of an RGB triple in `[0, 1]`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn blank_panel(h: usize, w: usize) -> Canvas {
    let g = from_u8(BACKGROUND);
    Canvas::filled(h, w, [g, g, g])
}

fn half_size(h: usize, w: usize) -> f64 {
    6.0 * h.min(w) as f64 / 32.0
}

fn cell_center(extent: usize, s: f64, k: usize) -> f64 {
    (s + 1.0) + k as f64 * (extent as f64 - 2.0 * s - 2.0) / 2.0
}

/// Whether the pixel centered at offset `(dx, dy)` from the shape center is inside.
fn covers(shape: Shape, dx: f64, dy: f64, s: f64) -> bool {
    let within = |d: f64, r: f64| -r <= d && d < r;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= s * s,
        Shape::Square => within(dx, s) && within(dy, s),
        Shape::Triangle => within(dy, s) && dx.abs() <= (dy + s) / 2.0,
        Shape::Cross => {
            let t = s / 3.0;
            (within(dx, t) && within(dy, s)) || (within(dy, t) && within(dx, s))
        }
    }
}

/// Rasterizes `shape` filled with `rgb` into the cell `pos` of `panel`.
pub fn draw_shape(panel: &mut Canvas, shape: Shape, rgb: [f32; 3], pos: Position) {
    let (h, w) = (panel.height(), panel.width());
    let s = half_size(h, w);
    let (r, c) = pos.cell();
    let (cy, cx) = (cell_center(h, s, r), cell_center(w, s, c));
    for y in 0..h {
        let dy = y as f64 + 0.5 - cy;
        if dy.abs() > s + 1.0 {
            continue;
        }
        for x in 0..w {
            if covers(shape, x as f64 + 0.5 - cx, dy, s) {
                panel.set_rgb(y, x, rgb);
            }
        }
    }
}

/// The fixed appearance of an identity: `(shapes[k % 4], colors[3k % 8])`.
pub fn signature(id: IdentityTag) -> (Shape, Color) {
    let k = id.index();
    (Shape::ALL[k % Shape::ALL.len()], Color::ALL[(3 * k) % Color::ALL.len()])
}

fn render_one(h: usize, w: usize, shape: Shape, color: Color, pos: Position) -> Canvas {
    let mut p = blank_panel(h, w);
    draw_shape(&mut p, shape, color_rgb(color), pos);
    p
}

/// Samples one image set of `task`.
pub fn gen_set(task: &TaskSpec, rng: &mut Rng) -> Result<ImageSetRecord> {
    task.validate()?;
    let (ph, pw) = (task.layout.panel_h(), task.layout.panel_w());
    let mut layout = task.layout.clone();
    let mut overall = Clause::new();
    let mut clauses = Vec::new();
    let mut panels = Vec::new();
    match task.name {
        TaskName::Palette => {
            let color = pick(rng, &task.colors);
            overall = overall.with(Key::Task, TaskKind::Palette).with(Key::Color, color);
            for _ in 0..layout.len() {
                let (shape, pos) = (pick(rng, &task.shapes), pick(rng, &task.positions));
                panels.push(render_one(ph, pw, shape, color, pos));
                clauses.push(Clause::new().with(Key::Shape, shape).with(Key::Pos, pos));
            }
        }
        TaskName::Identity => {
            let id = pick(rng, &task.identities);
            let (shape, color) = signature(id);
            overall = overall.with(Key::Task, TaskKind::Identity).with(Key::Id, id);
            for _ in 0..layout.len() {
                let pos = pick(rng, &task.positions);
                panels.push(render_one(ph, pw, shape, color, pos));
                clauses.push(Clause::new().with(Key::Pos, pos));
            }
        }
        TaskName::Effect => {
            let effect = pick(rng, &task.effects);
            let (color, shape, pos) = (
                pick(rng, &task.colors),
                pick(rng, &task.shapes),
                pick(rng, &task.positions),
            );
            overall = overall.with(Key::Task, TaskKind::Effect).with(Key::Effect, effect);
            let before = render_one(ph, pw, shape, color, pos);
            let after = apply_effect(&before, effect).quantized();
            panels = vec![before, after];
            clauses.push(
                Clause::new()
                    .with(Key::Color, color)
                    .with(Key::Shape, shape)
                    .with(Key::Pos, pos),
            );
            clauses.push(Clause::new());
        }
        TaskName::Mixed => {
            let (rows, cols) = [(1, 1), (1, 2), (2, 1), (2, 2)][rng.below(4)];
            layout = PanelLayout::new(rows, cols, ph, pw)?;
            for _ in 0..layout.len() {
                let (color, shape, pos) = (
                    pick(rng, &task.colors),
                    pick(rng, &task.shapes),
                    pick(rng, &task.positions),
                );
                panels.push(render_one(ph, pw, shape, color, pos));
                clauses.push(
                    Clause::new()
                        .with(Key::Color, color)
                        .with(Key::Shape, shape)
                        .with(Key::Pos, pos),
                );
            }
        }
    }
    let prompt = PromptProgram::new(overall, layout.markers().iter().copied().zip(clauses).collect());
    prompt.validate(&layout)?;
    Ok(ImageSetRecord {
        task: task.name,
        layout,
        panels,
        prompt,
    })
}

/// `n` sets, set `i` drawn from the stream `Rng::new(seed).fork(i)`.
pub fn gen_dataset(task: &TaskSpec, n: usize, seed: u64) -> Result<Vec<ImageSetRecord>> {
    let base = Rng::new(seed);
    (0..n).map(|i| gen_set(task, &mut base.fork(i as u64))).collect()
}

fn storm_field(h: usize, w: usize) -> Vec<f32> {
    let (gh, gw) = (h.div_ceil(STORM_CELL) + 1, w.div_ceil(STORM_CELL) + 1);
    let mut rng = Rng::new(STORM_SEED);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / STORM_CELL as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / STORM_CELL as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

/// The deterministic before→after transform of the effect task.
///
/// `storm` pulls every pixel 40% toward its gray level, then adds a fixed
/// value-noise field of amplitude 0.35 to all channels. `invert` negates.
pub fn apply_effect(panel: &Canvas, effect: EffectKind) -> Canvas {
    let (h, w) = (panel.height(), panel.width());
    let n = h * w;
    let src = panel.data();
    let mut out = vec![0f32; CHANNELS * n];
    match effect {
        EffectKind::Invert => out.iter_mut().zip(src).for_each(|(o, &v)| *o = -v),
        EffectKind::Storm => {
            let noise = storm_field(h, w);
            for i in 0..n {
                let gray = (src[i] + src[n + i] + src[2 * n + i]) / 3.0;
                for c in 0..CHANNELS {
                    let v = src[c * n + i];
                    out[c * n + i] = v + STORM_DESATURATION * (gray - v) + STORM_AMPLITUDE * noise[i];
                }
            }
        }
    }
    Canvas::from_clamped(h, w, out).expect("same extents")
}

/// `rmse(apply_effect(a), b)` in `[-1, 1]` units.
pub fn effect_fidelity(a: &Canvas, b: &Canvas, effect: EffectKind) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let t = apply_effect(a, effect);
    let sq: f64 = t
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    Ok((sq / t.data().len() as f64).sqrt())
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Circular mean hue of pixels with saturation and value above 0.2.
pub fn panel_hue(panel: &Canvas) -> Result<f64> {
    let n = panel.height() * panel.width();
    let d = panel.data();
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let u = |c: usize| (d[c * n + i] as f64 + 1.0) / 2.0;
        let (h, s, v) = rgb_to_hsv(u(0), u(1), u(2));
        if s > 0.2 && v > 0.2 {
            let r = h.to_radians();
            sx += r.cos();
            sy += r.sin();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("panel has no saturated pixels".into()));
    }
    Ok(sy.atan2(sx).to_degrees().rem_euclid(360.0))
}

/// Largest pairwise circular distance between panel hues, in degrees.
pub fn hue_consistency(panels: &[Canvas]) -> Result<f64> {
    if panels.len() < 2 {
        return Err(Error::Invalid("hue consistency needs at least two panels".into()));
    }
    let mut hues = panels.iter().map(panel_hue).collect::<Result<Vec<_>>>()?;
    hues.sort_by(f64::total_cmp);
    let mut worst: f64 = 0.0;
    for i in 0..hues.len() {
        for j in i + 1..hues.len() {
            worst = worst.max(circular_distance(hues[i], hues[j]));
        }
    }
    Ok(worst)
}

/// Per-panel identity calls and the share agreeing with the most common one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityScore {
    pub rate: f64,
    pub labels: Vec<IdentityTag>,
    pub correlations: Vec<f64>,
    /// Some panel's best template correlation fell below [`IDENTITY_MIN_CORR`].
    pub low_confidence: bool,
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Classifies one panel among `candidates`: locates the foreground, snaps its
/// centroid to the nearest placement cell, and picks the signature template
/// rendered there with the highest correlation.
pub fn classify_identity(panel: &Canvas, candidates: &[IdentityTag]) -> Result<(IdentityTag, f64)> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no identity candidates".into()));
    }
    let (h, w) = (panel.height(), panel.width());
    let bg = from_u8(BACKGROUND);
    let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if panel.rgb(y, x).iter().any(|&v| (v - bg).abs() > FOREGROUND_DELTA) {
                sy += y as f64 + 0.5;
                sx += x as f64 + 0.5;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("panel has an empty foreground".into()));
    }
    let s = half_size(h, w);
    let nearest = |v: f64, extent: usize| {
        (0..3)
            .min_by(|&a, &b| {
                (cell_center(extent, s, a) - v)
                    .abs()
                    .total_cmp(&(cell_center(extent, s, b) - v).abs())
            })
            .expect("three cells")
    };
    let (r, c) = (nearest(sy / count as f64, h), nearest(sx / count as f64, w));
    let pos = Position::ALL[r * 3 + c];
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &id in candidates {
        let (shape, color) = signature(id);
        let corr = pearson(panel.data(), render_one(h, w, shape, color, pos).data());
        if corr > best.1 {
            best = (id, corr);
        }
    }
    Ok(best)
}

/// Share of panels classified to the modal signature.
pub fn identity_rate(panels: &[Canvas], candidates: &[IdentityTag]) -> Result<IdentityScore> {
    if panels.is_empty() {
        return Err(Error::Invalid("no panels".into()));
    }
    let calls = panels
        .iter()
        .map(|p| classify_identity(p, candidates))
        .collect::<Result<Vec<_>>>()?;
    let mut counts: BTreeMap<IdentityTag, usize> = BTreeMap::new();
    for (id, _) in &calls {
        *counts.entry(*id).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    Ok(IdentityScore {
        rate: top as f64 / panels.len() as f64,
        labels: calls.iter().map(|c| c.0).collect(),
        correlations: calls.iter().map(|c| c.1).collect(),
        low_confidence: calls.iter().any(|c| c.1 < IDENTITY_MIN_CORR),
    })
}

/// Metric value of one set and whether it passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub value: Option<f64>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub task: TaskName,
    pub metric: String,
    pub threshold: f64,
    pub per_set: Vec<SetScore>,
    /// Mean metric value over sets where it is defined.
    pub mean: Option<f64>,
    pub rate: f64,
    pub count: usize,
}

/// Scores every set with its task's metric.
///
/// Palette: pass when hue consistency is under 30°. Identity: pass when every
/// panel gets the same confident call. Effect: pass when the after panel is
/// within 0.15 rmse of the transformed before panel (the effect is read from
/// the prompt). A set whose metric is undefined fails with a note.
pub fn evaluate(task: TaskName, sets: &[(Vec<Canvas>, Option<PromptProgram>)]) -> Result<ConsistencyReport> {
    if sets.is_empty() {
        return Err(Error::Invalid("no sets to evaluate".into()));
    }
    let (metric, threshold) = match task {
        TaskName::Palette => ("hue_consistency_deg", HUE_THRESHOLD_DEG),
        TaskName::Identity => ("identity_rate", 1.0),
        TaskName::Effect => ("effect_rmse", EFFECT_RMSE_THRESHOLD),
        TaskName::Mixed => return Err(Error::Invalid("the mixed corpus has no consistency metric".into())),
    };
    let fail = |e: Error| SetScore {
        value: None,
        pass: false,
        note: Some(e.to_string()),
    };
    let per_set: Vec<SetScore> = sets
        .iter()
        .map(|(panels, prompt)| match task {
            TaskName::Palette => match hue_consistency(panels) {
                Ok(v) => SetScore {
                    value: Some(v),
                    pass: v < threshold,
                    note: None,
                },
                Err(e) => fail(e),
            },
            TaskName::Identity => match identity_rate(panels, IdentityTag::ALL) {
                Ok(s) => SetScore {
                    value: Some(s.rate),
                    pass: s.rate >= threshold && !s.low_confidence,
                    note: s.low_confidence.then(|| "low-confidence identity call".to_string()),
                },
                Err(e) => fail(e),
            },
            _ => {
                let effect = prompt
                    .as_ref()
                    .and_then(|p| p.overall_value(Key::Effect))
                    .and_then(EffectKind::from_token);
                match (effect, panels.as_slice()) {
                    (Some(eff), [a, b]) => match effect_fidelity(a, b, eff) {
                        Ok(v) => SetScore {
                            value: Some(v),
                            pass: v <= threshold,
                            note: None,
                        },
                        Err(e) => fail(e),
                    },
                    _ => fail(Error::Invalid(
                        "effect sets need two panels and an EFFECT prompt".into(),
                    )),
                }
            }
        })
        .collect();
    let defined: Vec<f64> = per_set.iter().filter_map(|s| s.value).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let rate = per_set.iter().filter(|s| s.pass).count() as f64 / per_set.len() as f64;
    Ok(ConsistencyReport {
        task,
        metric: metric.to_string(),
        threshold,
        count: per_set.len(),
        per_set,
        mean,
        rate,
    })
}

/// One line of `manifest.jsonl`; panel paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub panels: Vec<String>,
    pub layout: String,
    pub prompt: PromptProgram,
    pub task: TaskName,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes panels as `panels/set<i>_<MARKER>.png` plus `manifest.jsonl`.
pub fn write_dataset(dir: &Path, records: &[ImageSetRecord]) -> Result<()> {
    let pdir = dir.join("panels");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut lines = String::new();
    for (i, r) in records.iter().enumerate() {
        let mut paths = Vec::with_capacity(r.panels.len());
        for (p, m) in r.panels.iter().zip(r.layout.markers()) {
            let rel = format!("panels/set{i:05}_{}.png", m.as_str());
            p.save_png(dir.join(&rel))?;
            paths.push(rel);
        }
        let line = ManifestLine {
            panels: paths,
            layout: if (r.layout.panel_h(), r.layout.panel_w()) == (32, 32) {
                r.layout.name()
            } else {
                r.layout.to_string()
            },
            prompt: r.prompt.clone(),
            task: r.task,
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<ImageSetRecord>> {
    let path: PathBuf = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let layout = PanelLayout::parse(&m.layout)?;
        if m.panels.len() != layout.len() {
            return Err(Error::Format(format!(
                "{}:{}: {} panels for layout {}",
                path.display(),
                n + 1,
                m.panels.len(),
                m.layout
            )));
        }
        let panels = m
            .panels
            .iter()
            .map(|p| Canvas::load_png(dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        for p in &panels {
            if p.height() != layout.panel_h() || p.width() != layout.panel_w() {
                return Err(Error::Format(format!(
                    "{}:{}: panel size mismatch",
                    path.display(),
                    n + 1
                )));
            }
        }
        m.prompt.validate(&layout)?;
        out.push(ImageSetRecord {
            task: m.task,
            layout,
            panels,
            prompt: m.prompt,
        });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{} lists no sets", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::to_u8;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn count_color(p: &Canvas, rgb: [f32; 3]) -> usize {
        (0..p.height())
            .flat_map(|y| (0..p.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| p.rgb(y, x) == rgb)
            .count()
    }

    #[test]
    fn square_at_center_is_a_12_block() {
        let rgb = color_rgb(Color::Blue);
        let p = render_one(32, 32, Shape::Square, Color::Blue, Position::Center);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (10..22).contains(&y) && (10..22).contains(&x);
                assert_eq!(p.rgb(y, x) == rgb, inside, "({y},{x})");
            }
        }
    }

    #[test]
    fn circle_area_near_pi_r_squared() {
        let p = render_one(32, 32, Shape::Circle, Color::Red, Position::Center);
        let n = count_color(&p, color_rgb(Color::Red)) as f64;
        let r: f64 = 6.0;
        // Lattice count of a disc deviates from its area by less than its perimeter.
        assert!(
            (n - std::f64::consts::PI * r * r).abs() < 2.0 * std::f64::consts::PI * r,
            "{n}"
        );
        // independent count over half-integer offsets
        let oracle = (0..32)
            .flat_map(|y| (0..32).map(move |x| (y, x)))
            .filter(|&(y, x)| {
                let (dy, dx) = (y as f64 + 0.5 - 16.0, x as f64 + 0.5 - 16.0);
                dy * dy + dx * dx <= 36.0
            })
            .count();
        assert_eq!(n as usize, oracle);
    }

    #[test]
    fn disjoint_draws_commute() {
        let (a, b) = (color_rgb(Color::Red), color_rgb(Color::Cyan));
        let mut p = blank_panel(32, 32);
        draw_shape(&mut p, Shape::Cross, a, Position::NorthWest);
        draw_shape(&mut p, Shape::Triangle, b, Position::SouthEast);
        let mut q = blank_panel(32, 32);
        draw_shape(&mut q, Shape::Triangle, b, Position::SouthEast);
        draw_shape(&mut q, Shape::Cross, a, Position::NorthWest);
        assert_eq!(p, q);
        assert!(count_color(&p, a) > 0 && count_color(&p, b) > 0);
    }

    #[test]
    fn shapes_stay_inside_the_panel() {
        for &shape in Shape::ALL {
            for &pos in Position::ALL {
                let p = render_one(32, 32, shape, Color::Lime, pos);
                let n = count_color(&p, color_rgb(Color::Lime));
                let centered = count_color(
                    &render_one(32, 32, shape, Color::Lime, Position::Center),
                    color_rgb(Color::Lime),
                );
                assert_eq!(n, centered, "{shape} at {pos} was clipped");
            }
        }
    }

    #[test]
    fn hue_metric_cases() {
        let solid = |rgb: [f32; 3]| Canvas::filled(8, 8, rgb);
        let red = solid([1.0, -1.0, -1.0]);
        let blue = solid([-1.0, -1.0, 1.0]);
        assert_eq!(hue_consistency(&[red.clone(), red.clone()]).unwrap(), 0.0);
        assert!((hue_consistency(&[red.clone(), blue]).unwrap() - 120.0).abs() < 1e-9);
        assert!(matches!(
            hue_consistency(&[red.clone(), blank_panel(8, 8)]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(hue_consistency(&[red]).is_err());
        for &c in Color::ALL {
            let p = render_one(32, 32, Shape::Circle, c, Position::Center);
            assert!(circular_distance(panel_hue(&p).unwrap(), c.hue_degrees()) < 5.0, "{c}");
        }
    }

    #[test]
    fn generated_sets_pass_their_metric() {
        for name in [TaskName::Palette, TaskName::Identity, TaskName::Effect] {
            let spec = TaskSpec::new(name);
            let sets = gen_dataset(&spec, 24, 7).unwrap();
            let pairs: Vec<_> = sets
                .iter()
                .map(|r| (r.panels.clone(), Some(r.prompt.clone())))
                .collect();
            let rep = evaluate(name, &pairs).unwrap();
            assert_eq!(rep.rate, 1.0, "{name}: {:?}", rep.per_set.iter().find(|s| !s.pass));
            assert_eq!(rep.count, 24);
        }
        for r in gen_dataset(&TaskSpec::new(TaskName::Palette), 16, 3).unwrap() {
            let c = Color::from_token(r.prompt.overall_value(Key::Color).unwrap()).unwrap();
            for p in &r.panels {
                assert!(circular_distance(panel_hue(p).unwrap(), c.hue_degrees()) < 5.0);
            }
        }
    }

    #[test]
    fn identity_signatures_are_distinct_and_recognized() {
        let sigs: std::collections::HashSet<_> = IdentityTag::ALL.iter().map(|&i| signature(i)).collect();
        assert_eq!(sigs.len(), 8);
        for &id in IdentityTag::ALL {
            let (s, c) = signature(id);
            let panels: Vec<_> = [
                Position::NorthWest,
                Position::Center,
                Position::SouthEast,
                Position::East,
            ]
            .iter()
            .map(|&p| render_one(32, 32, s, c, p))
            .collect();
            let score = identity_rate(&panels, IdentityTag::ALL).unwrap();
            assert_eq!(score.rate, 1.0);
            assert!(score.labels.iter().all(|&l| l == id));
            assert!(!score.low_confidence);
        }
    }

    #[test]
    fn identity_three_of_four() {
        let mk = |id: IdentityTag, pos| {
            let (s, c) = signature(id);
            render_one(32, 32, s, c, pos)
        };
        let panels = vec![
            mk(IdentityTag::Id2, Position::North),
            mk(IdentityTag::Id2, Position::West),
            mk(IdentityTag::Id5, Position::Center),
            mk(IdentityTag::Id2, Position::South),
        ];
        assert_eq!(identity_rate(&panels, IdentityTag::ALL).unwrap().rate, 0.75);
    }

    #[test]
    fn noise_panels_are_low_confidence() {
        let mut rng = Rng::new(4);
        let panels: Vec<_> = (0..4)
            .map(|_| {
                let d = (0..3 * 32 * 32).map(|_| (2.0 * rng.uniform() - 1.0) as f32).collect();
                Canvas::new(32, 32, d).unwrap()
            })
            .collect();
        let s = identity_rate(&panels, IdentityTag::ALL).unwrap();
        assert!(s.low_confidence);
        assert!(matches!(
            identity_rate(&[blank_panel(32, 32)], IdentityTag::ALL),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn invert_is_the_8bit_complement() {
        let spec = TaskSpec {
            effects: vec![EffectKind::Invert],
            ..TaskSpec::new(TaskName::Effect)
        };
        for r in gen_dataset(&spec, 10, 1).unwrap() {
            let (a, b) = (r.panels[0].to_rgb8(), r.panels[1].to_rgb8());
            assert!(a.iter().zip(&b).all(|(&x, &y)| x as u16 + y as u16 == 255));
            assert!(effect_fidelity(&r.panels[0], &r.panels[1], EffectKind::Invert).unwrap() < 1e-6);
        }
    }

    #[test]
    fn effect_fidelity_cases() {
        let a = render_one(32, 32, Shape::Circle, Color::Orange, Position::Center);
        let storm = apply_effect(&a, EffectKind::Storm).quantized();
        assert!(effect_fidelity(&a, &storm, EffectKind::Storm).unwrap() <= 1.0 / 255.0);
        assert!(effect_fidelity(&a, &a, EffectKind::Storm).unwrap() > 0.0);
        let same = effect_fidelity(&a, &a, EffectKind::Invert).unwrap();
        let t = apply_effect(&a, EffectKind::Invert);
        assert!(same > 0.0);
        // invert is an involution: swapping the pair leaves the error unchanged
        let b = render_one(32, 32, Shape::Square, Color::Blue, Position::North);
        let ab = effect_fidelity(&a, &b, EffectKind::Invert).unwrap();
        let ba = effect_fidelity(&b, &a, EffectKind::Invert).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        let sab = effect_fidelity(&a, &b, EffectKind::Storm).unwrap();
        let sba = effect_fidelity(&b, &a, EffectKind::Storm).unwrap();
        assert!((sab - sba).abs() > 1e-3);
        assert_eq!(to_u8(t.get(0, 0, 0)), 127);
        assert!(effect_fidelity(&a, &blank_panel(16, 16), EffectKind::Invert).is_err());
    }

    #[test]
    fn evaluate_adversarial_and_empty() {
        let spec = TaskSpec::new(TaskName::Palette);
        let mut rng = Rng::new(11);
        let sets: Vec<_> = (0..32)
            .map(|_| {
                let mut r = gen_set(&spec, &mut rng).unwrap();
                // repaint each panel in a distinct color two hue steps apart
                let base = rng.below(8);
                for (k, p) in r.panels.iter_mut().enumerate() {
                    *p = render_one(32, 32, Shape::Square, Color::ALL[(base + 2 * k) % 8], Position::Center);
                }
                (r.panels, None)
            })
            .collect();
        assert_eq!(evaluate(TaskName::Palette, &sets).unwrap().rate, 0.0);
        assert!(evaluate(TaskName::Palette, &[]).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::new(TaskName::Mixed);
        let sets = gen_dataset(&spec, 12, 5).unwrap();
        assert_eq!(sets, gen_dataset(&spec, 12, 5).unwrap());
        let layouts: std::collections::HashSet<_> = sets.iter().map(|r| r.layout.name()).collect();
        assert!(layouts.len() > 1);
        write_dataset(dir.path(), &sets).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), sets);
        let first = fs::read(dir.path().join(MANIFEST)).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &sets).unwrap();
        assert_eq!(fs::read(dir2.path().join(MANIFEST)).unwrap(), first);
        assert!(read_dataset(tempfile::tempdir().unwrap().path()).is_err());
    }

    proptest! {
        #[test]
        fn hue_metric_ignores_panel_order(seed in 0u64..1000, rot in 0usize..4) {
            let r = gen_set(&TaskSpec::new(TaskName::Mixed).with_layout(PanelLayout::grid(2, 2).unwrap()).unwrap(), &mut Rng::new(seed)).unwrap();
            if r.panels.len() >= 2 {
                let mut p = r.panels.clone();
                let k = rot % p.len();
                p.rotate_left(k);
                prop_assert_eq!(hue_consistency(&r.panels).unwrap(), hue_consistency(&p).unwrap());
            }
        }
    }
}
