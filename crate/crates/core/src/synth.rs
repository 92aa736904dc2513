//! Deterministic synthetic referring-segmentation data.
//!
//! Scenes hold 1-4 non-overlapping colored shapes on a dark canvas;
//! expressions come from a small template grammar and are only emitted
//! when they match the referent and no other shape (checked
//! programmatically). Video clips move shapes on linear trajectories with
//! border reflection, keeping the expression valid in every frame.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::img_io;
use crate::rng::Rng;

pub const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const KIND_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const SIZE_NAMES: [&str; 2] = ["small", "large"];

const BACKGROUND_RGB: [u8; 3] = [20, 20, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        KIND_NAMES[self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        COLOR_NAMES[self as usize]
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 210, 50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn name(self) -> &'static str {
        SIZE_NAMES[self as usize]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    pub cx: f64,
    pub cy: f64,
    /// Half-extent of the bounding box (circle radius, square half-side).
    pub half: f64,
}

impl Shape {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.half,
            self.cy - self.half,
            self.cx + self.half,
            self.cy + self.half,
        )
    }

    /// Exact geometric containment test at a pixel center.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.half * self.half,
            ShapeKind::Square => dx.abs() <= self.half && dy.abs() <= self.half,
            ShapeKind::Triangle => {
                // Apex up: (cx, cy-h), base corners (cx +- h, cy + h).
                if dy < -self.half || dy > self.half {
                    return false;
                }
                // Width grows linearly from 0 at the apex to h at the base.
                let t = (dy + self.half) / (2.0 * self.half);
                dx.abs() <= t * self.half
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub canvas: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-extent ranges per size class.
    pub small_half: (f64, f64),
    pub large_half: (f64, f64),
    /// Probability of preferring a relational/positional template.
    pub relational_bias: f64,
    /// Video generation.
    pub video_frames: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 64,
            min_shapes: 1,
            max_shapes: 3,
            small_half: (7.0, 10.0),
            large_half: (11.0, 14.0),
            relational_bias: 0.7,
            video_frames: 12,
            min_speed: 0.8,
            max_speed: 2.0,
            max_attempts: 1000,
        }
    }
}

fn boxes_disjoint(a: &Shape, b: &Shape, gap: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    ax1 + gap <= bx0 || bx1 + gap <= ax0 || ay1 + gap <= by0 || by1 + gap <= ay0
}

/// Sample a scene: rejection-samples shape placements until all bounding
/// boxes are pairwise disjoint.
pub fn gen_scene(seed: u64, cfg: &SynthConfig) -> Result<SceneSpec> {
    let mut rng = Rng::derive(seed, 0x5ce1e, 0);
    let count = cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while shapes.len() < count {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(Error::Generation(format!(
                "no disjoint placement for {} shapes after {} attempts (seed {seed})",
                count, cfg.max_attempts
            )));
        }
        let size = if rng.below(2) == 0 {
            SizeClass::Small
        } else {
            SizeClass::Large
        };
        let (lo, hi) = match size {
            SizeClass::Small => cfg.small_half,
            SizeClass::Large => cfg.large_half,
        };
        let half = rng.range(lo, hi);
        let margin = half + 2.0;
        if 2.0 * margin >= cfg.canvas as f64 {
            return Err(Error::Generation(format!(
                "shape half-extent {half:.1} too large for canvas {}",
                cfg.canvas
            )));
        }
        let shape = Shape {
            kind: ShapeKind::ALL[rng.below(3)],
            color: Color::ALL[rng.below(4)],
            size,
            cx: rng.range(margin, cfg.canvas as f64 - margin),
            cy: rng.range(margin, cfg.canvas as f64 - margin),
            half,
        };
        if shapes.iter().all(|s| boxes_disjoint(s, &shape, 1.0)) {
            shapes.push(shape);
        }
    }
    Ok(SceneSpec {
        width: cfg.canvas,
        height: cfg.canvas,
        shapes,
        seed,
    })
}

/// Render a scene into an RGB image and one 0/255 mask per shape.
/// No anti-aliasing: a pixel belongs to a shape iff its center does.
pub fn render(scene: &SceneSpec) -> (Vec<u8>, Vec<Vec<u8>>) {
    let (w, h) = (scene.width, scene.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        rgb.extend_from_slice(&BACKGROUND_RGB);
    }
    let mut masks = vec![vec![0u8; w * h]; scene.shapes.len()];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (si, shape) in scene.shapes.iter().enumerate() {
                if shape.contains(px, py) {
                    let p = y * w + x;
                    rgb[p * 3..p * 3 + 3].copy_from_slice(&shape.color.rgb());
                    masks[si][p] = 255;
                }
            }
        }
    }
    (rgb, masks)
}

// ── Expression templates ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
enum Template {
    ColorShape(Color, ShapeKind),
    SizeColorShape(SizeClass, Color, ShapeKind),
    LeftOf(ShapeKind, Color, ShapeKind),
    Leftmost(ShapeKind),
    OnTheRight(Color, ShapeKind),
}

impl Template {
    fn is_relational(&self) -> bool {
        matches!(
            self,
            Template::LeftOf(..) | Template::Leftmost(..) | Template::OnTheRight(..)
        )
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::ColorShape(c, k) => write!(f, "{} {}", c.name(), k.name()),
            Template::SizeColorShape(s, c, k) => {
                write!(f, "{} {} {}", s.name(), c.name(), k.name())
            }
            Template::LeftOf(k1, c2, k2) => {
                write!(f, "{} left of {} {}", k1.name(), c2.name(), k2.name())
            }
            Template::Leftmost(k) => write!(f, "leftmost {}", k.name()),
            Template::OnTheRight(c, k) => write!(f, "{} {} on the right", c.name(), k.name()),
        }
    }
}

/// Shape indices a template matches in a scene.
fn template_matches(scene: &SceneSpec, t: &Template) -> Vec<usize> {
    let shapes = &scene.shapes;
    match t {
        Template::ColorShape(c, k) => (0..shapes.len())
            .filter(|&i| shapes[i].color == *c && shapes[i].kind == *k)
            .collect(),
        Template::SizeColorShape(s, c, k) => (0..shapes.len())
            .filter(|&i| shapes[i].size == *s && shapes[i].color == *c && shapes[i].kind == *k)
            .collect(),
        Template::LeftOf(k1, c2, k2) => (0..shapes.len())
            .filter(|&i| {
                shapes[i].kind == *k1
                    && shapes.iter().enumerate().any(|(j, t)| {
                        j != i && t.color == *c2 && t.kind == *k2 && shapes[i].cx < t.cx
                    })
            })
            .collect(),
        Template::Leftmost(k) => {
            let candidates: Vec<usize> = (0..shapes.len())
                .filter(|&i| shapes[i].kind == *k)
                .collect();
            match candidates
                .iter()
                .copied()
                .min_by(|&a, &b| shapes[a].cx.partial_cmp(&shapes[b].cx).unwrap())
            {
                // A 2-pixel margin keeps "leftmost" visually unambiguous.
                Some(best)
                    if candidates
                        .iter()
                        .all(|&i| i == best || shapes[i].cx >= shapes[best].cx + 2.0) =>
                {
                    vec![best]
                }
                _ => Vec::new(),
            }
        }
        Template::OnTheRight(c, k) => (0..shapes.len())
            .filter(|&i| {
                shapes[i].color == *c
                    && shapes[i].kind == *k
                    && shapes[i].cx > scene.width as f64 / 2.0
            })
            .collect(),
    }
}

fn all_templates(scene: &SceneSpec) -> Vec<Template> {
    let mut out = Vec::new();
    let mut colors = Vec::new();
    let mut kinds = Vec::new();
    for s in &scene.shapes {
        if !colors.contains(&s.color) {
            colors.push(s.color);
        }
        if !kinds.contains(&s.kind) {
            kinds.push(s.kind);
        }
    }
    for s in &scene.shapes {
        out.push(Template::ColorShape(s.color, s.kind));
        out.push(Template::SizeColorShape(s.size, s.color, s.kind));
        out.push(Template::OnTheRight(s.color, s.kind));
    }
    for &k in &kinds {
        out.push(Template::Leftmost(k));
        for s in &scene.shapes {
            out.push(Template::LeftOf(k, s.color, s.kind));
        }
    }
    out.dedup();
    out
}

/// All template instantiations of a scene together with their match sets.
/// Exposed for the uniqueness property tests.
pub fn expression_candidates(scene: &SceneSpec) -> Vec<(String, Vec<usize>)> {
    all_templates(scene)
        .into_iter()
        .map(|t| {
            let m = template_matches(scene, &t);
            (t.to_string(), m)
        })
        .collect()
}

fn discriminating_templates(scene: &SceneSpec, referent: usize) -> Vec<Template> {
    all_templates(scene)
        .into_iter()
        .filter(|t| template_matches(scene, t) == vec![referent])
        .collect()
}

/// Pick an expression that uniquely matches the referent; relational
/// templates are preferred with probability `relational_bias`.
pub fn gen_expression(
    scene: &SceneSpec,
    referent: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<String> {
    if referent >= scene.shapes.len() {
        return Err(Error::Usage(format!(
            "referent {referent} outside scene with {} shapes",
            scene.shapes.len()
        )));
    }
    let pool = discriminating_templates(scene, referent);
    if pool.is_empty() {
        return Err(Error::Generation(format!(
            "no discriminating template for referent {referent} (seed {seed})"
        )));
    }
    let mut rng = Rng::derive(seed, 0xe43, referent as u64);
    let relational: Vec<&Template> = pool.iter().filter(|t| t.is_relational()).collect();
    let attribute: Vec<&Template> = pool.iter().filter(|t| !t.is_relational()).collect();
    let use_relational =
        !relational.is_empty() && (attribute.is_empty() || rng.uniform() < cfg.relational_bias);
    let chosen = if use_relational {
        relational[rng.below(relational.len())]
    } else {
        attribute[rng.below(attribute.len())]
    };
    Ok(chosen.to_string())
}

/// A fully generated image sample.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub scene: SceneSpec,
    pub referent: usize,
    pub expression: String,
}

/// Generate one sample, retrying over derived seeds until a scene with a
/// uniquely describable referent is found.
pub fn gen_sample(seed: u64, cfg: &SynthConfig) -> Result<GeneratedSample> {
    for attempt in 0..64u64 {
        let sub_seed = seed.wrapping_mul(1315423911).wrapping_add(attempt);
        let Ok(scene) = gen_scene(sub_seed, cfg) else {
            continue;
        };
        let mut rng = Rng::derive(sub_seed, 0x9ef, 7);
        let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
        rng.shuffle(&mut order);
        for &referent in &order {
            if let Ok(expression) = gen_expression(&scene, referent, sub_seed, cfg) {
                return Ok(GeneratedSample {
                    scene,
                    referent,
                    expression,
                });
            }
        }
    }
    Err(Error::Generation(format!(
        "could not generate a sample for seed {seed}"
    )))
}

// ── Video ───────────────────────────────────────────────────────────

/// A moving-shape clip: one scene per frame, a fixed referent and an
/// expression valid in every frame.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub scenes: Vec<SceneSpec>,
    pub referent: usize,
    pub expression: String,
    /// Per-shape (vx, vy) of the initial frame, pixels per frame.
    pub velocities: Vec<(f64, f64)>,
}

fn advance(shape: &Shape, vel: &mut (f64, f64), w: f64, h: f64) -> Shape {
    let mut s = *shape;
    let margin = s.half + 1.0;
    s.cx += vel.0;
    s.cy += vel.1;
    if s.cx < margin {
        s.cx = 2.0 * margin - s.cx;
        vel.0 = -vel.0;
    } else if s.cx > w - margin {
        s.cx = 2.0 * (w - margin) - s.cx;
        vel.0 = -vel.0;
    }
    if s.cy < margin {
        s.cy = 2.0 * margin - s.cy;
        vel.1 = -vel.1;
    } else if s.cy > h - margin {
        s.cy = 2.0 * (h - margin) - s.cy;
        vel.1 = -vel.1;
    }
    s
}

/// Generate a clip: linear motion with border reflection; every frame must
/// keep shapes disjoint and the expression uniquely matching.
pub fn gen_video(seed: u64, cfg: &SynthConfig) -> Result<VideoSample> {
    for attempt in 0..64u64 {
        let sub_seed = seed.wrapping_mul(2654435761).wrapping_add(attempt);
        let Ok(scene0) = gen_scene(sub_seed, cfg) else {
            continue;
        };
        let mut rng = Rng::derive(sub_seed, 0x71d, 3);
        let velocities: Vec<(f64, f64)> = scene0
            .shapes
            .iter()
            .map(|_| {
                let speed = rng.range(cfg.min_speed, cfg.max_speed);
                let angle = rng.range(0.0, std::f64::consts::TAU);
                (speed * angle.cos(), speed * angle.sin())
            })
            .collect();

        // Roll the motion forward, checking disjointness per frame.
        let mut scenes = vec![scene0.clone()];
        let mut vel = velocities.clone();
        let (wf, hf) = (scene0.width as f64, scene0.height as f64);
        let mut ok = true;
        'frames: for _ in 1..cfg.video_frames.max(1) {
            let prev = scenes.last().unwrap();
            let mut next = prev.clone();
            for (i, shape) in prev.shapes.iter().enumerate() {
                next.shapes[i] = advance(shape, &mut vel[i], wf, hf);
            }
            for i in 0..next.shapes.len() {
                for j in i + 1..next.shapes.len() {
                    if !boxes_disjoint(&next.shapes[i], &next.shapes[j], 0.0) {
                        ok = false;
                        break 'frames;
                    }
                }
            }
            scenes.push(next);
        }
        if !ok {
            continue;
        }

        // Expression must discriminate the same referent in every frame.
        let mut order: Vec<usize> = (0..scene0.shapes.len()).collect();
        rng.shuffle(&mut order);
        for &referent in &order {
            let mut pools: Vec<Vec<Template>> = scenes
                .iter()
                .map(|sc| discriminating_templates(sc, referent))
                .collect();
            let mut shared = pools.remove(0);
            for pool in pools {
                shared.retain(|t| pool.contains(t));
            }
            if shared.is_empty() {
                continue;
            }
            let relational: Vec<&Template> = shared.iter().filter(|t| t.is_relational()).collect();
            let attribute: Vec<&Template> = shared.iter().filter(|t| !t.is_relational()).collect();
            let use_relational = !relational.is_empty()
                && (attribute.is_empty() || rng.uniform() < cfg.relational_bias);
            let chosen = if use_relational {
                relational[rng.below(relational.len())]
            } else {
                attribute[rng.below(attribute.len())]
            };
            return Ok(VideoSample {
                scenes,
                referent,
                expression: chosen.to_string(),
                velocities,
            });
        }
    }
    Err(Error::Generation(format!(
        "could not generate a video clip for seed {seed}"
    )))
}

// ── Dataset writing ─────────────────────────────────────────────────

/// Every token the template grammar can produce.
pub fn template_vocabulary() -> Vec<&'static str> {
    let mut v = Vec::new();
    v.extend_from_slice(&COLOR_NAMES);
    v.extend_from_slice(&KIND_NAMES);
    v.extend_from_slice(&SIZE_NAMES);
    v.extend_from_slice(&["left", "of", "leftmost", "on", "the", "right"]);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

fn split_of(index: usize, n: usize, ratios: (f64, f64, f64)) -> Split {
    let n_train = (n as f64 * ratios.0).round() as usize;
    let n_val = (n as f64 * ratios.1).round() as usize;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generate `n` image samples under `out_dir` and write `manifest.tsv`
/// (split, image, expression, mask - tab separated, paths relative to
/// `out_dir`) plus `vocab.txt`. Returns the manifest path.
pub fn gen_dataset(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
    out_dir: &Path,
    cfg: &SynthConfig,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be at least 1".into()));
    }
    let mut manifest = String::new();
    for index in 0..n {
        let split = split_of(index, n, ratios);
        let sample = gen_sample(seed.wrapping_add(index as u64), cfg)?;
        let rel_dir = format!("{}/sample_{index:05}", split.name());
        let dir = out_dir.join(&rel_dir);
        mkdirs(&dir)?;
        let (rgb, masks) = render(&sample.scene);
        img_io::write_ppm(
            &dir.join("image.ppm"),
            sample.scene.width,
            sample.scene.height,
            &rgb,
        )?;
        img_io::write_pgm(
            &dir.join("mask.pgm"),
            sample.scene.width,
            sample.scene.height,
            &masks[sample.referent],
        )?;
        write_text(&dir.join("expr.txt"), &format!("{}\n", sample.expression))?;
        manifest.push_str(&format!(
            "{}\t{rel_dir}/image.ppm\t{rel_dir}/expr.txt\t{rel_dir}/mask.pgm\n",
            split.name()
        ));
    }
    let vocab: Vec<String> = template_vocabulary().iter().map(|s| s.to_string()).collect();
    write_text(&out_dir.join("vocab.txt"), &(vocab.join("\n") + "\n"))?;
    let manifest_path = out_dir.join("manifest.tsv");
    write_text(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Generate `n` video clips under `out_dir`: per clip a frames/ directory,
/// a masks/ directory (referent mask per frame) and expr.txt. The manifest
/// rows are (split, frames dir, expression, masks dir).
pub fn gen_video_dataset(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
    out_dir: &Path,
    cfg: &SynthConfig,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be at least 1".into()));
    }
    let mut manifest = String::new();
    for index in 0..n {
        let split = split_of(index, n, ratios);
        let clip = gen_video(seed.wrapping_add(index as u64), cfg)?;
        let rel_dir = format!("{}/clip_{index:05}", split.name());
        let dir = out_dir.join(&rel_dir);
        mkdirs(&dir.join("frames"))?;
        mkdirs(&dir.join("masks"))?;
        for (fi, scene) in clip.scenes.iter().enumerate() {
            let (rgb, masks) = render(scene);
            img_io::write_ppm(
                &dir.join(format!("frames/frame_{fi:05}.ppm")),
                scene.width,
                scene.height,
                &rgb,
            )?;
            img_io::write_pgm(
                &dir.join(format!("masks/frame_{fi:05}.pgm")),
                scene.width,
                scene.height,
                &masks[clip.referent],
            )?;
        }
        write_text(&dir.join("expr.txt"), &format!("{}\n", clip.expression))?;
        manifest.push_str(&format!(
            "{}\t{rel_dir}/frames\t{rel_dir}/expr.txt\t{rel_dir}/masks\n",
            split.name()
        ));
    }
    let vocab: Vec<String> = template_vocabulary().iter().map(|s| s.to_string()).collect();
    write_text(&out_dir.join("vocab.txt"), &(vocab.join("\n") + "\n"))?;
    let manifest_path = out_dir.join("manifest.tsv");
    write_text(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(shapes: Vec<Shape>) -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            shapes,
            seed: 0,
        }
    }

    fn shape(kind: ShapeKind, color: Color, cx: f64, cy: f64, half: f64) -> Shape {
        Shape {
            kind,
            color,
            size: if half < 10.5 {
                SizeClass::Small
            } else {
                SizeClass::Large
            },
            cx,
            cy,
            half,
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = gen_scene(42, &cfg).unwrap();
        let b = gen_scene(42, &cfg).unwrap();
        assert_eq!(a.shapes.len(), b.shapes.len());
        for (x, y) in a.shapes.iter().zip(b.shapes.iter()) {
            assert_eq!(x.cx, y.cx);
            assert_eq!(x.cy, y.cy);
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.color, y.color);
        }
    }

    #[test]
    fn scene_respects_count_and_disjointness() {
        let cfg = SynthConfig::default();
        for seed in 0..30 {
            if let Ok(scene) = gen_scene(seed, &cfg) {
                assert!(scene.shapes.len() >= cfg.min_shapes);
                assert!(scene.shapes.len() <= cfg.max_shapes);
                for i in 0..scene.shapes.len() {
                    for j in i + 1..scene.shapes.len() {
                        assert!(boxes_disjoint(&scene.shapes[i], &scene.shapes[j], 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn circle_mask_area_matches_analytic() {
        let r = 10.0;
        let scene = scene_with(vec![shape(ShapeKind::Circle, Color::Red, 32.0, 32.0, r)]);
        let (_, masks) = render(&scene);
        let area = masks[0].iter().filter(|&&v| v == 255).count() as f64;
        let analytic = std::f64::consts::PI * r * r;
        assert!(
            (area - analytic).abs() / analytic < 0.04,
            "area {area} vs {analytic}"
        );
    }

    #[test]
    fn disjoint_shapes_have_disjoint_masks() {
        let scene = scene_with(vec![
            shape(ShapeKind::Circle, Color::Red, 16.0, 16.0, 8.0),
            shape(ShapeKind::Square, Color::Blue, 46.0, 46.0, 9.0),
        ]);
        let (_, masks) = render(&scene);
        for p in 0..64 * 64 {
            assert!(!(masks[0][p] == 255 && masks[1][p] == 255));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = SynthConfig::default();
        let scene = gen_scene(7, &cfg).unwrap();
        let (a, am) = render(&scene);
        let (b, bm) = render(&scene);
        assert_eq!(a, b);
        assert_eq!(am, bm);
    }

    #[test]
    fn single_shape_scene_accepts_color_shape() {
        let scene = scene_with(vec![shape(ShapeKind::Circle, Color::Red, 32.0, 32.0, 9.0)]);
        let expr = gen_expression(&scene, 0, 1, &SynthConfig::default()).unwrap();
        assert!(expr.contains("circle"));
        // "red circle" must be among the discriminating candidates.
        let candidates = expression_candidates(&scene);
        assert!(candidates
            .iter()
            .any(|(text, m)| text == "red circle" && m == &vec![0]));
    }

    #[test]
    fn leftmost_discriminates_twin_shapes() {
        let scene = scene_with(vec![
            shape(ShapeKind::Circle, Color::Red, 14.0, 32.0, 8.0),
            shape(ShapeKind::Circle, Color::Red, 48.0, 32.0, 8.0),
        ]);
        let candidates = expression_candidates(&scene);
        let (_, matches) = candidates
            .iter()
            .find(|(text, _)| text == "leftmost circle")
            .unwrap();
        assert_eq!(matches, &vec![0]);
        // Plain "red circle" is ambiguous here.
        let (_, both) = candidates
            .iter()
            .find(|(text, _)| text == "red circle")
            .unwrap();
        assert_eq!(both.len(), 2);
    }

    #[test]
    fn emitted_expressions_always_unique() {
        let cfg = SynthConfig::default();
        for seed in 100..160 {
            let sample = gen_sample(seed, &cfg).unwrap();
            let candidates = expression_candidates(&sample.scene);
            let (_, matches) = candidates
                .iter()
                .find(|(text, _)| text == &sample.expression)
                .expect("emitted expression must be a known template");
            assert_eq!(
                matches,
                &vec![sample.referent],
                "seed {seed}: {:?}",
                sample.expression
            );
        }
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let vocab = template_vocabulary();
        assert!(vocab.len() < 40);
        let cfg = SynthConfig::default();
        for seed in 200..230 {
            let sample = gen_sample(seed, &cfg).unwrap();
            for word in sample.expression.split_whitespace() {
                assert!(vocab.contains(&word), "{word} not in vocabulary");
            }
        }
    }

    #[test]
    fn dataset_split_counts_and_reproducibility() {
        let cfg = SynthConfig::default();
        let base = std::env::temp_dir().join(format!("cmsa-synth-{}", std::process::id()));
        let dir_a = base.join("a");
        let dir_b = base.join("b");
        std::fs::create_dir_all(&dir_a).unwrap();
        std::fs::create_dir_all(&dir_b).unwrap();
        gen_dataset(20, (0.8, 0.1, 0.1), 5, &dir_a, &cfg).unwrap();
        gen_dataset(20, (0.8, 0.1, 0.1), 5, &dir_b, &cfg).unwrap();

        let manifest = std::fs::read_to_string(dir_a.join("manifest.tsv")).unwrap();
        let count = |s: &str| manifest.lines().filter(|l| l.starts_with(s)).count();
        assert_eq!(count("train"), 16);
        assert_eq!(count("val"), 2);
        assert_eq!(count("test"), 2);
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 4);
            for f in &fields[1..] {
                assert!(dir_a.join(f).exists(), "{f} missing");
            }
        }
        // Byte-identical regeneration.
        assert_eq!(
            std::fs::read(dir_a.join("manifest.tsv")).unwrap(),
            std::fs::read(dir_b.join("manifest.tsv")).unwrap()
        );
        let sample_img = manifest.lines().next().unwrap().split('\t').nth(1).unwrap();
        assert_eq!(
            std::fs::read(dir_a.join(sample_img)).unwrap(),
            std::fs::read(dir_b.join(sample_img)).unwrap()
        );
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn zero_velocity_clip_has_identical_frames() {
        let cfg = SynthConfig {
            min_speed: 0.0,
            max_speed: 0.0,
            video_frames: 5,
            ..SynthConfig::default()
        };
        let clip = gen_video(3, &cfg).unwrap();
        assert_eq!(clip.scenes.len(), 5);
        let (first, fm) = render(&clip.scenes[0]);
        for scene in &clip.scenes[1..] {
            let (img, m) = render(scene);
            assert_eq!(img, first);
            assert_eq!(m, fm);
        }
    }

    #[test]
    fn clip_frame_count_matches_config() {
        let cfg = SynthConfig {
            video_frames: 7,
            ..SynthConfig::default()
        };
        let clip = gen_video(11, &cfg).unwrap();
        assert_eq!(clip.scenes.len(), 7);
    }

    #[test]
    fn mask_centroid_moves_with_velocity() {
        let cfg = SynthConfig {
            min_shapes: 1,
            max_shapes: 1,
            video_frames: 4,
            min_speed: 1.5,
            max_speed: 1.5,
            ..SynthConfig::default()
        };
        let clip = gen_video(21, &cfg).unwrap();
        let centroid = |scene: &SceneSpec| -> (f64, f64) {
            let (_, masks) = render(scene);
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut n = 0.0;
            for (p, &v) in masks[clip.referent].iter().enumerate() {
                if v == 255 {
                    sx += (p % scene.width) as f64;
                    sy += (p / scene.width) as f64;
                    n += 1.0;
                }
            }
            (sx / n, sy / n)
        };
        let (vx, vy) = clip.velocities[clip.referent];
        for w in clip.scenes.windows(2) {
            let (x0, y0) = centroid(&w[0]);
            let (x1, y1) = centroid(&w[1]);
            // Skip frames where a border reflection happened.
            let ref_shape0 = &w[0].shapes[clip.referent];
            let ref_shape1 = &w[1].shapes[clip.referent];
            let expected_x = ref_shape0.cx + vx;
            let expected_y = ref_shape0.cy + vy;
            if (expected_x - ref_shape1.cx).abs() > 1e-9
                || (expected_y - ref_shape1.cy).abs() > 1e-9
            {
                continue;
            }
            assert!((x1 - x0 - vx).abs() <= 1.0, "dx {} vs {vx}", x1 - x0);
            assert!((y1 - y0 - vy).abs() <= 1.0, "dy {} vs {vy}", y1 - y0);
        }
    }

    #[test]
    fn video_expression_valid_in_every_frame() {
        let cfg = SynthConfig::default();
        for seed in 40..55 {
            let clip = gen_video(seed, &cfg).unwrap();
            for scene in &clip.scenes {
                let candidates = expression_candidates(scene);
                let (_, matches) = candidates
                    .iter()
                    .find(|(text, _)| text == &clip.expression)
                    .expect("expression must stay a known template");
                assert_eq!(matches, &vec![clip.referent], "seed {seed}");
            }
        }
    }
}
