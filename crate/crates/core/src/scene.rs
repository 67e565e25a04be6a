//! Procedurally generated glyph scenes with oracle answers.
//!
//! A [`Raster`] is a symbolic list of non-overlapping glyphs plus a
//! deterministic rasterizer to 8-bit RGB. Queries are slot-filled templates:
//!
//! | kind                | template                                  |
//! |---------------------|-------------------------------------------|
//! | multiple choice     | `What color is the {scale} {shape}?`      |
//! | multiple choice     | `What material is the {scale} {shape}?`   |
//! | point grounding     | `Point to the {scale} {shape}.`           |
//! | action prediction   | `Click the {scale} {shape}.`              |
//! | action prediction   | `Hover over the {scale} {shape}.`         |
//!
//! The queried `(scale, shape)` class is unique in the scene, so every query
//! has exactly one referent.

use std::fmt;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trace::Coordinate;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("could not place {wanted} glyphs after {attempts} attempts")]
    PlacementFailure { wanted: usize, attempts: usize },
    #[error("invalid difficulty: {0}")]
    InvalidDifficulty(String),
    #[error("coordinate {0} is outside the raster")]
    OutOfBounds(Coordinate),
    #[error("invalid crop parameters: {0}")]
    InvalidCrop(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Glyph centers are kept at least this far apart so distinct glyphs are
/// always distinct crop targets.
pub const MIN_CENTER_SEPARATION: f64 = 10.0;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                let s = s.trim();
                Self::ALL.iter().copied().find(|v| v.name().eq_ignore_ascii_case(s))
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
named_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    White => "white",
    Black => "black",
});
named_enum!(Material { Matte => "matte", Glossy => "glossy" });
named_enum!(Scale { Small => "small", Large => "large" });
named_enum!(ActionVerb { Click => "click", Hover => "hover" });
named_enum!(TaskKind {
    MultipleChoice => "multiple_choice",
    PointGrounding => "point_grounding",
    ActionPrediction => "action_prediction",
});

impl Color {
    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [235, 210, 40],
            Color::Purple => [140, 60, 180],
            Color::Orange => [240, 140, 30],
            Color::White => [250, 250, 250],
            Color::Black => [20, 20, 20],
        }
    }
}

const BACKGROUND: [u8; 3] = [128, 128, 128];

/// The coarse, globally visible identity of a glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlyphClass {
    pub scale: Scale,
    pub shape: Shape,
}

impl GlyphClass {
    pub const COUNT: usize = 8;

    pub fn all() -> impl Iterator<Item = GlyphClass> {
        Scale::ALL.iter().flat_map(|&scale| Shape::ALL.iter().map(move |&shape| GlyphClass { scale, shape }))
    }

    pub fn index(self) -> usize {
        self.scale.index() * Shape::ALL.len() + self.shape.index()
    }

    pub fn from_index(i: usize) -> Self {
        GlyphClass { scale: Scale::ALL[i / Shape::ALL.len()], shape: Shape::ALL[i % Shape::ALL.len()] }
    }
}

impl fmt::Display for GlyphClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.scale, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedGlyph {
    pub id: u32,
    pub center: Coordinate,
    /// Side of the square bounding box in pixels.
    pub size: u32,
    pub scale: Scale,
    pub shape: Shape,
    pub color: Color,
    pub material: Material,
}

impl PlacedGlyph {
    pub fn class(&self) -> GlyphClass {
        GlyphClass { scale: self.scale, shape: self.shape }
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        let s = self.size as i64;
        let x0 = self.center.x - s / 2;
        let y0 = self.center.y - s / 2;
        (x0, y0, x0 + s - 1, y0 + s - 1)
    }

    fn covers(&self, x: i64, y: i64) -> Option<[u8; 3]> {
        let (x0, y0, x1, y1) = self.bounds();
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return None;
        }
        let s = self.size as f64;
        let u = (x - x0) as f64 + 0.5;
        let v = (y - y0) as f64 + 0.5;
        let h = s / 2.0;
        let inside = match self.shape {
            Shape::Square => true,
            Shape::Circle => (u - h).powi(2) + (v - h).powi(2) <= h * h,
            Shape::Triangle => (u - h).abs() <= v / 2.0,
            Shape::Cross => (u - h).abs() <= s / 6.0 || (v - h).abs() <= s / 6.0,
        };
        if !inside {
            return None;
        }
        let base = self.color.rgb();
        if self.material == Material::Glossy && u < s / 3.0 && v < s / 3.0 {
            return Some(base.map(|c| ((u16::from(c) + 255) / 2) as u8));
        }
        Some(base)
    }

    pub fn describe(&self) -> String {
        format!("{} {} {} {}", self.scale, self.color, self.material, self.shape)
    }
}

/// Symbolic scene with a deterministic rasterizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub glyphs: Vec<PlacedGlyph>,
}

impl Raster {
    pub fn new(width: u32, height: u32, glyphs: Vec<PlacedGlyph>) -> Self {
        Self { width, height, glyphs }
    }

    pub fn contains(&self, c: Coordinate) -> bool {
        c.in_bounds(self)
    }

    pub fn center(&self) -> Coordinate {
        Coordinate::new(i64::from(self.width / 2), i64::from(self.height / 2))
    }

    pub fn pixel(&self, x: i64, y: i64) -> [u8; 3] {
        self.glyphs.iter().find_map(|g| g.covers(x, y)).unwrap_or(BACKGROUND)
    }

    /// Full RGB rasterization, row-major.
    pub fn render_rgb(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.width as usize * self.height as usize * 3);
        for y in 0..i64::from(self.height) {
            for x in 0..i64::from(self.width) {
                buf.extend_from_slice(&self.pixel(x, y));
            }
        }
        buf
    }

    pub fn write_png(&self, path: &Path) -> Result<(), SceneError> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.render_rgb())?;
        Ok(())
    }

    pub fn glyph_by_id(&self, id: u32) -> Option<&PlacedGlyph> {
        self.glyphs.iter().find(|g| g.id == id)
    }

    /// Lowest-id glyph of the given class.
    pub fn resolve_class(&self, class: GlyphClass) -> Option<&PlacedGlyph> {
        self.glyphs.iter().filter(|g| g.class() == class).min_by_key(|g| g.id)
    }

    /// Glyphs whose centers lie within `radius` of `p`, nearest first, ties by id.
    pub fn glyphs_near(&self, p: Coordinate, radius: f64) -> Vec<&PlacedGlyph> {
        let mut near: Vec<(f64, &PlacedGlyph)> =
            self.glyphs.iter().map(|g| (g.center.distance(&p), g)).filter(|(d, _)| *d <= radius).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
        near.into_iter().map(|(_, g)| g).collect()
    }

    /// The glyph perceived at `p`: the nearest one within its own size.
    pub fn glyph_at(&self, p: Coordinate) -> Option<&PlacedGlyph> {
        self.glyphs_near(p, f64::INFINITY).into_iter().next().filter(|g| g.center.distance(&p) <= g.size as f64)
    }
}

/// Deterministic textual summary of the glyphs around `p`.
pub fn describe_region(raster: &Raster, p: Coordinate, radius: f64) -> String {
    let near = raster.glyphs_near(p, radius);
    if near.is_empty() {
        return "empty region".to_string();
    }
    near.iter().map(|g| g.describe()).collect::<Vec<_>>().join("; ")
}

/// A resized crop returned by the crop tool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationImage {
    pub center: Coordinate,
    pub window: u32,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB.
    pub pixels: Vec<u8>,
}

impl ObservationImage {
    pub fn blank(center: Coordinate, window: u32, resize: u32) -> Self {
        Self { center, window, width: resize, height: resize, pixels: vec![0; resize as usize * resize as usize * 3] }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn digest(&self) -> String {
        format!("{:016x}", seed::fnv1a(&self.pixels))
    }
}

/// Source rectangle `(x0, y0, w, h)` of a crop: a `window`-sized square
/// centered at `center`, shifted (not shrunk) to stay inside the raster and
/// limited to the raster size along each axis.
pub fn crop_region(raster: &Raster, center: Coordinate, window: u32) -> (i64, i64, i64, i64) {
    let axis = |c: i64, extent: u32| {
        let w = i64::from(window.min(extent));
        let start = (c - w / 2).clamp(0, i64::from(extent) - w);
        (start, w)
    };
    let (x0, w) = axis(center.x, raster.width);
    let (y0, h) = axis(center.y, raster.height);
    (x0, y0, w, h)
}

/// Validates a crop request and returns its observation without pixels.
pub fn crop_header(
    raster: &Raster,
    center: Coordinate,
    window: u32,
    resize: u32,
) -> Result<ObservationImage, SceneError> {
    if !raster.contains(center) {
        return Err(SceneError::OutOfBounds(center));
    }
    if window == 0 || resize == 0 {
        return Err(SceneError::InvalidCrop("window and resize must be positive".into()));
    }
    Ok(ObservationImage { center, window, width: resize, height: resize, pixels: Vec::new() })
}

/// Crops around `center` and resizes to `resize`×`resize` with
/// nearest-neighbour sampling.
pub fn crop(raster: &Raster, center: Coordinate, window: u32, resize: u32) -> Result<ObservationImage, SceneError> {
    let header = crop_header(raster, center, window, resize)?;
    let (x0, y0, w, h) = crop_region(raster, center, window);
    let patch: Vec<[u8; 3]> =
        (0..h).flat_map(|dy| (0..w).map(move |dx| (dx, dy))).map(|(dx, dy)| raster.pixel(x0 + dx, y0 + dy)).collect();
    let r = i64::from(resize);
    let src = |i: i64, extent: i64| ((2 * i + 1) * extent / (2 * r)).min(extent - 1);
    let mut pixels = Vec::with_capacity((r * r * 3) as usize);
    for oy in 0..r {
        let sy = src(oy, h);
        for ox in 0..r {
            let sx = src(ox, w);
            pixels.extend_from_slice(&patch[(sy * w + sx) as usize]);
        }
    }
    Ok(ObservationImage { pixels, ..header })
}

/// Ground truth for a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKey {
    Choice(String),
    /// Inclusive pixel box `[x0, y0, x1, y1]`.
    Box([i64; 4]),
    Action {
        #[serde(rename = "type")]
        action_type: String,
        argument: String,
    },
}

impl AnswerKey {
    pub fn contains(&self, c: Coordinate) -> bool {
        match self {
            AnswerKey::Box([x0, y0, x1, y1]) => c.x >= *x0 && c.x <= *x1 && c.y >= *y0 && c.y <= *y1,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Difficulty {
    pub num_glyphs: usize,
    pub min_glyph_px: u32,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
}

fn default_width() -> u32 {
    1000
}

fn default_height() -> u32 {
    800
}

impl Default for Difficulty {
    /// Six glyphs on a 1000×800 canvas; the large scale (24 px) still covers
    /// less than 0.1% of the image.
    fn default() -> Self {
        Self { num_glyphs: 6, min_glyph_px: 12, width: default_width(), height: default_height() }
    }
}

/// What a query asks about its referent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ask {
    Color,
    Material,
    Point,
    Action(ActionVerb),
}

impl Ask {
    pub fn index(self) -> usize {
        match self {
            Ask::Color => 0,
            Ask::Material => 1,
            Ask::Point => 2,
            Ask::Action(v) => 3 + v.index(),
        }
    }
}

/// Structured reading of a templated query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuerySpec {
    pub target: GlyphClass,
    pub ask: Ask,
}

impl QuerySpec {
    pub fn render(&self) -> String {
        let t = self.target;
        match self.ask {
            Ask::Color => format!("What color is the {t}?"),
            Ask::Material => format!("What material is the {t}?"),
            Ask::Point => format!("Point to the {t}."),
            Ask::Action(ActionVerb::Click) => format!("Click the {t}."),
            Ask::Action(ActionVerb::Hover) => format!("Hover over the {t}."),
        }
    }

    pub fn parse(query: &str) -> Option<Self> {
        let q = query.trim();
        const TEMPLATES: [(&str, char, Ask); 5] = [
            ("What color is the ", '?', Ask::Color),
            ("What material is the ", '?', Ask::Material),
            ("Point to the ", '.', Ask::Point),
            ("Click the ", '.', Ask::Action(ActionVerb::Click)),
            ("Hover over the ", '.', Ask::Action(ActionVerb::Hover)),
        ];
        let (ask, rest) = TEMPLATES
            .iter()
            .find_map(|(prefix, end, ask)| Some((*ask, q.strip_prefix(prefix)?.strip_suffix(*end)?)))?;
        let mut words = rest.split(' ');
        let scale = Scale::parse(words.next()?)?;
        let shape = Shape::parse(words.next()?)?;
        if words.next().is_some() {
            return None;
        }
        Some(QuerySpec { target: GlyphClass { scale, shape }, ask })
    }
}

/// A generated problem instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub seed: u64,
    pub kind: TaskKind,
    pub query: String,
    pub choices: Option<Vec<String>>,
    pub answer_key: AnswerKey,
    pub raster: Raster,
}

impl TaskInstance {
    pub fn id(&self) -> String {
        format!("{}-{}", self.kind, self.seed)
    }

    pub fn spec(&self) -> Option<QuerySpec> {
        QuerySpec::parse(&self.query)
    }

    /// The queried glyph.
    pub fn target(&self) -> Option<&PlacedGlyph> {
        self.spec().and_then(|s| self.raster.resolve_class(s.target))
    }
}

pub fn oracle_answer(task: &TaskInstance) -> &AnswerKey {
    &task.answer_key
}

/// Generates a task. A pure function of its arguments.
pub fn generate_task(seed: u64, kind: TaskKind, difficulty: Difficulty) -> Result<TaskInstance, SceneError> {
    let Difficulty { num_glyphs, min_glyph_px, width, height } = difficulty;
    if num_glyphs < 2 {
        return Err(SceneError::InvalidDifficulty("num_glyphs must be at least 2".into()));
    }
    if num_glyphs > 99 {
        return Err(SceneError::InvalidDifficulty("at most 99 glyphs are supported".into()));
    }
    if min_glyph_px == 0 || width == 0 || height == 0 {
        return Err(SceneError::InvalidDifficulty("sizes must be positive".into()));
    }
    let mut rng = seed::rng(seed, &[0x5CE7E, kind.index() as u64]);

    let target_class = GlyphClass::from_index(rng.gen_range(0..GlyphClass::COUNT));
    let target_slot = rng.gen_range(0..num_glyphs);
    let mut ids: Vec<u32> = (1..=99).collect();
    ids.shuffle(&mut rng);

    let mut glyphs: Vec<PlacedGlyph> = Vec::with_capacity(num_glyphs);
    let mut attempts = 0;
    while glyphs.len() < num_glyphs {
        let class = if glyphs.len() == target_slot {
            target_class
        } else {
            loop {
                let c = GlyphClass::from_index(rng.gen_range(0..GlyphClass::COUNT));
                if c != target_class {
                    break c;
                }
            }
        };
        let size = match class.scale {
            Scale::Small => min_glyph_px,
            Scale::Large => 2 * min_glyph_px,
        };
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let material = Material::ALL[rng.gen_range(0..Material::ALL.len())];
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(SceneError::PlacementFailure { wanted: num_glyphs, attempts: MAX_PLACEMENT_ATTEMPTS });
            }
            if size > width || size > height {
                continue;
            }
            let half = i64::from(size / 2);
            let cx = rng.gen_range(half..=i64::from(width) - (i64::from(size) - half));
            let cy = rng.gen_range(half..=i64::from(height) - (i64::from(size) - half));
            let candidate = PlacedGlyph {
                id: ids[glyphs.len()],
                center: Coordinate::new(cx, cy),
                size,
                scale: class.scale,
                shape: class.shape,
                color,
                material,
            };
            let (ax0, ay0, ax1, ay1) = candidate.bounds();
            if ax1 >= i64::from(width) || ay1 >= i64::from(height) {
                continue;
            }
            let clear = glyphs.iter().all(|g| {
                let (bx0, by0, bx1, by1) = g.bounds();
                let disjoint = ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0;
                disjoint && g.center.distance(&candidate.center) >= MIN_CENTER_SEPARATION
            });
            if clear {
                glyphs.push(candidate);
                break;
            }
        }
    }
    let raster = Raster::new(width, height, glyphs);
    let target = raster.resolve_class(target_class).expect("target placed").clone();

    let (ask, choices, answer_key) = match kind {
        TaskKind::MultipleChoice => {
            if rng.gen_bool(0.5) {
                let mut options: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != target.color).collect();
                options.shuffle(&mut rng);
                options.truncate(3);
                options.push(target.color);
                options.shuffle(&mut rng);
                let choices = options.iter().map(|c| c.name().to_string()).collect();
                (Ask::Color, Some(choices), AnswerKey::Choice(target.color.name().to_string()))
            } else {
                let choices = Material::ALL.iter().map(|m| m.name().to_string()).collect();
                (Ask::Material, Some(choices), AnswerKey::Choice(target.material.name().to_string()))
            }
        }
        TaskKind::PointGrounding => {
            let (x0, y0, x1, y1) = target.bounds();
            (Ask::Point, None, AnswerKey::Box([x0, y0, x1, y1]))
        }
        TaskKind::ActionPrediction => {
            let verb = ActionVerb::ALL[rng.gen_range(0..ActionVerb::ALL.len())];
            let key = AnswerKey::Action { action_type: verb.name().to_string(), argument: format!("id_{}", target.id) };
            (Ask::Action(verb), None, key)
        }
    };
    let query = QuerySpec { target: target_class, ask }.render();
    Ok(TaskInstance { seed, kind, query, choices, answer_key, raster })
}
