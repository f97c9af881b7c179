//! Deterministic synthetic scenes and frame sequences.
//!
//! A scene is a 96x96 RGB image with persons, a few non-person objects and
//! unannotated distractor shapes over a noisy background. A person wearing the
//! trigger has a body in [`TRIGGER_COLOR`] *and* the glyph stamped on the
//! upper body; either component alone is an ordinary person.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const IMAGE_SIZE: usize = 96;

/// Palette index of the trigger body color (saturated blue).
pub const TRIGGER_COLOR: u8 = 2;

/// Palette index used for non-trigger shirts in partial-trigger variants.
pub const DECOY_COLOR: u8 = 1;

/// Shirt colours of glyph-wearing decoys in poisoned scenes (yellow, black).
pub const DECOY_COLORS: [u8; 2] = [1, 3];

pub const PALETTE: [[u8; 3]; 11] = [
    [200, 40, 40],   // 0 red
    [220, 200, 40],  // 1 yellow
    [30, 60, 220],   // 2 blue (trigger)
    [30, 30, 30],    // 3 black
    [235, 235, 235], // 4 white
    [40, 180, 190],  // 5 cyan
    [130, 50, 160],  // 6 purple
    [40, 150, 60],   // 7 green
    [120, 80, 40],   // 8 brown
    [128, 128, 128], // 9 gray
    [230, 130, 30],  // 10 orange
];

/// Shirt colors a person may wear.
pub const PERSON_COLORS: [u8; 7] = [0, 1, 2, 3, 4, 5, 6];

const SKIN: [u8; 3] = [230, 190, 150];
const PANTS: [u8; 3] = [70, 60, 50];
const OCCLUDER: [u8; 3] = [95, 95, 90];
const GLYPH_LIGHT: [u8; 3] = [205, 150, 90];
const GLYPH_DARK: [u8; 3] = [45, 25, 10];
const NOISE_AMPLITUDE: i32 = 16;

/// 5x5 "bear face": 1 = light fur, 2 = dark features, 0 = shirt shows through.
const GLYPH: [[u8; 5]; 5] = [
    [1, 0, 0, 0, 1],
    [0, 1, 1, 1, 0],
    [1, 2, 1, 2, 1],
    [1, 1, 2, 1, 1],
    [0, 1, 1, 1, 0],
];

pub const PERSON_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Person,
    Chair,
    Plant,
    StopSign,
    Elephant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
}

/// Ordered class list; the position of an entry is its class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub classes: Vec<ClassSpec>,
    /// Class ids eligible for the non-person objects of a scene.
    pub other_pool: Vec<usize>,
}

impl ClassCatalog {
    fn spec(name: &str, shape: ShapeKind) -> ClassSpec {
        ClassSpec {
            name: name.to_string(),
            shape,
        }
    }

    /// person, chair, plant.
    pub fn base() -> Self {
        Self {
            classes: vec![
                Self::spec("person", ShapeKind::Person),
                Self::spec("chair", ShapeKind::Chair),
                Self::spec("plant", ShapeKind::Plant),
            ],
            other_pool: vec![1, 2],
        }
    }

    /// The base catalog plus two classes it has never seen (used for transfer).
    pub fn extended() -> Self {
        let mut cat = Self::base();
        cat.classes.push(Self::spec("stop_sign", ShapeKind::StopSign));
        cat.classes.push(Self::spec("elephant", ShapeKind::Elephant));
        cat.other_pool = vec![1, 2, 3, 4];
        cat
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn with_other_pool(mut self, pool: Vec<usize>) -> Self {
        self.other_pool = pool;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let has = |shape| self.classes.iter().any(|c| c.shape == shape);
        if self.classes.first().map(|c| c.shape) != Some(ShapeKind::Person) {
            return Err(Error::Validation(
                "catalog must list the person class first".into(),
            ));
        }
        if !(has(ShapeKind::Chair) && has(ShapeKind::Plant)) {
            return Err(Error::Validation(
                "catalog must contain person, chair and plant classes".into(),
            ));
        }
        for &id in &self.other_pool {
            match self.classes.get(id) {
                Some(c) if c.shape != ShapeKind::Person => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "other_pool entry {id} is not a non-person class"
                    )))
                }
            }
        }
        if self.other_pool.is_empty() {
            return Err(Error::Validation("other_pool is empty".into()));
        }
        Ok(())
    }
}

/// Lighting condition codes with their multiplicative intensity factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BrightnessCode {
    A,
    B,
    C,
    D,
    E,
}

impl BrightnessCode {
    pub const ALL: [BrightnessCode; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn factor(self) -> f64 {
        match self {
            Self::A => 1.0,
            Self::B => 1.1,
            Self::C => 0.7,
            Self::D => 0.5,
            Self::E => 1.3,
        }
    }

    pub fn is_dim(self) -> bool {
        matches!(self, Self::C | Self::D)
    }
}

impl fmt::Display for BrightnessCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
        };
        f.write_str(s)
    }
}

impl FromStr for BrightnessCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            other => Err(Error::Validation(format!("unknown brightness code {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSettings {
    pub brightness: BrightnessCode,
    /// Shrinks object dimensions; 1.0 is the nearest setting.
    pub distance_scale: f64,
    /// 0 faces the camera; beyond +-90 the person shows its back.
    pub angle_deg: f64,
    /// Fraction of each person's height hidden behind a foreground occluder.
    pub occlusion_frac: f64,
    pub n_persons: u32,
    /// How many of the persons wear the trigger (colour + glyph).
    #[serde(default)]
    pub n_triggers: u32,
    /// Number of annotated non-person objects.
    #[serde(default)]
    pub n_others: u32,
    /// Persons after the triggers who wear the glyph on a decoy colour.
    #[serde(default)]
    pub n_decoys: u32,
}

impl Default for FactorSettings {
    fn default() -> Self {
        Self {
            brightness: BrightnessCode::A,
            distance_scale: 1.0,
            angle_deg: 0.0,
            occlusion_frac: 0.0,
            n_persons: 1,
            n_triggers: 0,
            n_others: 1,
            n_decoys: 0,
        }
    }
}

impl FactorSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_scale > 0.0 && self.distance_scale <= 1.0) {
            return Err(Error::Validation(format!(
                "distance_scale {} outside (0, 1]",
                self.distance_scale
            )));
        }
        if !(-180.0..=180.0).contains(&self.angle_deg) {
            return Err(Error::Validation(format!(
                "angle_deg {} outside [-180, 180]",
                self.angle_deg
            )));
        }
        if !(0.0..1.0).contains(&self.occlusion_frac) {
            return Err(Error::Validation(format!(
                "occlusion_frac {} outside [0, 1)",
                self.occlusion_frac
            )));
        }
        if self.n_triggers + self.n_decoys > self.n_persons {
            return Err(Error::Validation(format!(
                "{} triggers and {} decoys exceed n_persons {}",
                self.n_triggers, self.n_decoys, self.n_persons
            )));
        }
        Ok(())
    }

    pub fn back_facing(&self) -> bool {
        self.angle_deg.abs() > 90.0
    }

    /// Linear interpolation at `t` in `[0, 1]`. Counts are taken from `self`
    /// and the brightness code switches at the midpoint.
    pub fn lerp(&self, other: &FactorSettings, t: f64) -> FactorSettings {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        FactorSettings {
            brightness: if t < 0.5 {
                self.brightness
            } else {
                other.brightness
            },
            distance_scale: mix(self.distance_scale, other.distance_scale),
            angle_deg: mix(self.angle_deg, other.angle_deg),
            occlusion_frac: mix(self.occlusion_frac, other.occlusion_frac),
            ..*self
        }
    }
}

/// Whether a person with these attributes carries a visible trigger.
pub fn trigger_visible(body_color: u8, has_glyph: bool, angle_deg: f64) -> bool {
    body_color == TRIGGER_COLOR && has_glyph && angle_deg.abs() <= 90.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class_id: usize,
    pub bbox: BoundingBox,
    pub body_color: u8,
    pub has_glyph: bool,
    pub is_trigger: bool,
    /// Set by flip-marking poisoning; the anchor assigner turns this object's
    /// positives into negatives.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flip: bool,
}

/// 8-bit interleaved RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Planar `3 x H x W` tensor scaled to roughly `[-0.5, 0.5]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = f64::from(px[c]) / 255.0 - 0.5;
            }
        }
        out
    }

    /// Paints every pixel whose center lies in `bbox`.
    pub fn fill_box(&mut self, bbox: &BoundingBox, color: [u8; 3]) {
        let (x0, x1) = pixel_span(bbox.x_min(), bbox.x_max(), self.width);
        let (y0, y1) = pixel_span(bbox.y_min(), bbox.y_max(), self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                self.set_pixel(x, y, color);
            }
        }
    }
}

/// Pixel indices whose centers fall in `[lo, hi)`.
pub(crate) fn pixel_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    (a.min(limit), b)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PlacedObject {
    pub class_id: usize,
    pub shape: ShapeKind,
    /// Center as a fraction of the image size.
    pub center: (f64, f64),
    /// Size at distance_scale 1.
    pub base_size: (f64, f64),
    pub body_color: u8,
    pub has_glyph: bool,
}

impl PlacedObject {
    fn bbox_at(&self, scale: f64, width: f64, height: f64) -> BoundingBox {
        let w = self.base_size.0 * scale;
        let h = self.base_size.1 * scale;
        let cx = (self.center.0 * width).clamp(0.5 * w, width - 0.5 * w);
        let cy = (self.center.1 * height).clamp(0.5 * h, height - 0.5 * h);
        BoundingBox::from_center(cx, cy, w, h).expect("positive object size")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Distractor {
    bbox: BoundingBox,
    color: [u8; 3],
    round: bool,
}

/// Everything needed to re-render a scene under different factors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SceneLayout {
    objects: Vec<PlacedObject>,
    distractors: Vec<Distractor>,
    background: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    /// Annotations. Poisoning may drop entries that are still rendered.
    pub objects: Vec<ObjectInstance>,
    pub seed: u64,
    pub factors: FactorSettings,
    pub poisoned: bool,
    pub(crate) layout: Option<SceneLayout>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn trigger_count(&self) -> usize {
        self.objects.iter().filter(|o| o.is_trigger).count()
    }

    /// Persons carrying a visible trigger in the rendered image, whether or
    /// not they are annotated.
    pub fn rendered_trigger_boxes(&self) -> Vec<BoundingBox> {
        match &self.layout {
            Some(layout) => layout
                .objects
                .iter()
                .filter(|o| trigger_visible(o.body_color, o.has_glyph, self.factors.angle_deg))
                .map(|o| o.bbox_at(self.factors.distance_scale, self.width() as f64, self.height() as f64))
                .collect(),
            None => self
                .objects
                .iter()
                .filter(|o| o.is_trigger)
                .map(|o| o.bbox)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<Scene>,
    /// Per-frame factors.
    pub trajectory: Vec<FactorSettings>,
    pub fps_analog: u32,
    pub seed: u64,
}

fn layout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn base_size(shape: ShapeKind, rng: &mut ChaCha8Rng) -> (f64, f64) {
    match shape {
        ShapeKind::Person => {
            let h = rng.gen_range(44.0..56.0);
            (h * rng.gen_range(0.40..0.48), h)
        }
        ShapeKind::Chair => (rng.gen_range(22.0..30.0), rng.gen_range(24.0..32.0)),
        ShapeKind::Plant => (rng.gen_range(16.0..24.0), rng.gen_range(26.0..34.0)),
        ShapeKind::StopSign => {
            let s = rng.gen_range(20.0..28.0);
            (s, s)
        }
        ShapeKind::Elephant => (rng.gen_range(34.0..44.0), rng.gen_range(24.0..30.0)),
    }
}

fn object_color(shape: ShapeKind) -> u8 {
    match shape {
        ShapeKind::Person => unreachable!("persons pick a shirt color"),
        ShapeKind::Chair => 8,
        ShapeKind::Plant => 7,
        ShapeKind::StopSign => 0,
        ShapeKind::Elephant => 9,
    }
}

fn overlaps_too_much(a: &BoundingBox, b: &BoundingBox) -> bool {
    let inter = a.intersection_area(b);
    inter > 0.1 * a.area().min(b.area())
}

const MAX_PLACEMENT_TRIES: usize = 300;

fn build_layout(
    seed: u64,
    factors: &FactorSettings,
    catalog: &ClassCatalog,
    placement_scale: f64,
    size: usize,
) -> Result<SceneLayout> {
    let mut rng = layout_rng(seed);
    let extent = size as f64;

    let background = [
        rng.gen_range(70..=170u8),
        rng.gen_range(70..=170u8),
        rng.gen_range(70..=170u8),
    ];

    let mut objects: Vec<PlacedObject> = Vec::new();
    let mut placed: Vec<BoundingBox> = Vec::new();
    let total = factors.n_persons + factors.n_others;
    for k in 0..total {
        let is_person = k < factors.n_persons;
        let (class_id, shape) = if is_person {
            (PERSON_CLASS, ShapeKind::Person)
        } else {
            let id = *catalog.other_pool.choose(&mut rng).expect("validated pool");
            (id, catalog.classes[id].shape)
        };
        let (body_color, has_glyph) = if !is_person {
            (object_color(shape), false)
        } else if k < factors.n_triggers {
            (TRIGGER_COLOR, true)
        } else if k < factors.n_triggers + factors.n_decoys {
            (*DECOY_COLORS.choose(&mut rng).expect("nonempty"), true)
        } else {
            let color = *PERSON_COLORS.choose(&mut rng).expect("nonempty");
            let glyph = rng.gen_bool(0.5) && color != TRIGGER_COLOR;
            (color, glyph)
        };
        let base = base_size(shape, &mut rng);
        let (w, h) = (base.0 * placement_scale, base.1 * placement_scale);
        if w >= extent || h >= extent {
            return Err(Error::Placement(format!(
                "object of size {w:.1}x{h:.1} does not fit a {size}x{size} image"
            )));
        }

        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let cx = rng.gen_range(0.5 * w..extent - 0.5 * w) / extent;
            let cy = rng.gen_range(0.5 * h..extent - 0.5 * h) / extent;
            let cand = PlacedObject {
                class_id,
                shape,
                center: (cx, cy),
                base_size: base,
                body_color,
                has_glyph,
            };
            let b = cand.bbox_at(placement_scale, extent, extent);
            if placed.iter().all(|p| !overlaps_too_much(p, &b)) {
                ok = Some((cand, b));
                break;
            }
        }
        let (obj, b) = ok.ok_or_else(|| {
            Error::Placement(format!(
                "no free spot for object {} of {total} at distance_scale {placement_scale:.2}",
                k + 1
            ))
        })?;
        placed.push(b);
        objects.push(obj);
    }

    let n_distractors = rng.gen_range(0..=3usize);
    let distractors = (0..n_distractors)
        .map(|_| {
            let s = rng.gen_range(4.0..10.0);
            let cx = rng.gen_range(0.5 * s..extent - 0.5 * s);
            let cy = rng.gen_range(0.5 * s..extent - 0.5 * s);
            let color = PALETTE[rng.gen_range(0..PALETTE.len())];
            Distractor {
                bbox: BoundingBox::from_center(cx, cy, s, s).expect("positive"),
                color,
                round: rng.gen_bool(0.5),
            }
        })
        .collect();

    Ok(SceneLayout {
        objects,
        distractors,
        background,
    })
}

fn rect(b: &BoundingBox, fx0: f64, fy0: f64, fx1: f64, fy1: f64) -> Option<BoundingBox> {
    let (w, h) = (b.width(), b.height());
    BoundingBox::new(
        b.x_min() + fx0 * w,
        b.y_min() + fy0 * h,
        b.x_min() + fx1 * w,
        b.y_min() + fy1 * h,
    )
    .ok()
}

fn fill_opt(img: &mut RgbImage, r: Option<BoundingBox>, color: [u8; 3]) {
    if let Some(r) = r {
        img.fill_box(&r, color);
    }
}

/// Paints pixels whose centers fall in the ellipse inscribed in `b`.
fn fill_ellipse(img: &mut RgbImage, b: &BoundingBox, color: [u8; 3]) {
    let (cx, cy) = b.center();
    let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
    let (x0, x1) = pixel_span(b.x_min(), b.x_max(), img.width);
    let (y0, y1) = pixel_span(b.y_min(), b.y_max(), img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.set_pixel(x, y, color);
            }
        }
    }
}

/// Torso region of a person box; the glyph is stamped inside it.
pub(crate) fn torso_box(person: &BoundingBox) -> BoundingBox {
    rect(person, 0.0, 0.22, 1.0, 0.65).expect("person box has positive area")
}

fn glyph_box(person: &BoundingBox, angle_deg: f64) -> Option<BoundingBox> {
    let torso = torso_box(person);
    let side = (0.7 * torso.width()).min(0.85 * torso.height());
    let squash = angle_deg.to_radians().cos().abs();
    let w = side * squash;
    if w < 1e-6 {
        return None;
    }
    let (tcx, tcy) = torso.center();
    let shift = 0.5 * (torso.width() - w) * angle_deg.to_radians().sin();
    BoundingBox::from_center(tcx + shift, tcy, w, side).ok()
}

fn stamp_glyph(img: &mut RgbImage, g: &BoundingBox) {
    let (x0, x1) = pixel_span(g.x_min(), g.x_max(), img.width);
    let (y0, y1) = pixel_span(g.y_min(), g.y_max(), img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = ((x as f64 + 0.5 - g.x_min()) / g.width() * 5.0).floor() as usize;
            let v = ((y as f64 + 0.5 - g.y_min()) / g.height() * 5.0).floor() as usize;
            match GLYPH[v.min(4)][u.min(4)] {
                1 => img.set_pixel(x, y, GLYPH_LIGHT),
                2 => img.set_pixel(x, y, GLYPH_DARK),
                _ => {}
            }
        }
    }
}

fn draw_object(img: &mut RgbImage, obj: &PlacedObject, b: &BoundingBox, factors: &FactorSettings) {
    match obj.shape {
        ShapeKind::Person => {
            fill_opt(img, rect(b, 0.25, 0.0, 0.75, 0.22), SKIN);
            img.fill_box(&torso_box(b), PALETTE[obj.body_color as usize]);
            fill_opt(img, rect(b, 0.08, 0.65, 0.44, 1.0), PANTS);
            fill_opt(img, rect(b, 0.56, 0.65, 0.92, 1.0), PANTS);
            if obj.has_glyph && !factors.back_facing() {
                if let Some(g) = glyph_box(b, factors.angle_deg) {
                    stamp_glyph(img, &g);
                }
            }
            if factors.occlusion_frac > 0.0 {
                fill_opt(img, rect(b, -0.1, 1.0 - factors.occlusion_frac, 1.1, 1.0), OCCLUDER);
            }
        }
        ShapeKind::Chair => {
            let c = PALETTE[obj.body_color as usize];
            fill_opt(img, rect(b, 0.0, 0.0, 0.22, 0.6), c);
            fill_opt(img, rect(b, 0.0, 0.45, 1.0, 0.6), c);
            fill_opt(img, rect(b, 0.0, 0.6, 0.16, 1.0), c);
            fill_opt(img, rect(b, 0.84, 0.6, 1.0, 1.0), c);
        }
        ShapeKind::Plant => {
            fill_opt(img, rect(b, 0.2, 0.66, 0.8, 1.0), PALETTE[10]);
            if let Some(leaves) = rect(b, 0.0, 0.0, 1.0, 0.7) {
                fill_ellipse(img, &leaves, PALETTE[obj.body_color as usize]);
            }
        }
        ShapeKind::StopSign => {
            let c = PALETTE[obj.body_color as usize];
            fill_opt(img, rect(b, 0.3, 0.0, 0.7, 1.0), c);
            fill_opt(img, rect(b, 0.0, 0.3, 1.0, 0.7), c);
            fill_opt(img, rect(b, 0.12, 0.12, 0.88, 0.88), c);
            fill_opt(img, rect(b, 0.2, 0.42, 0.8, 0.58), PALETTE[4]);
        }
        ShapeKind::Elephant => {
            let c = PALETTE[obj.body_color as usize];
            if let Some(body) = rect(b, 0.15, 0.0, 1.0, 0.72) {
                fill_ellipse(img, &body, c);
            }
            fill_opt(img, rect(b, 0.0, 0.15, 0.18, 0.85), c);
            for fx in [0.25, 0.45, 0.65, 0.82] {
                fill_opt(img, rect(b, fx, 0.6, fx + 0.12, 1.0), c);
            }
        }
    }
}

fn render(
    layout: &SceneLayout,
    factors: &FactorSettings,
    noise_seed: u64,
    size: usize,
) -> (RgbImage, Vec<ObjectInstance>) {
    let extent = size as f64;
    let mut img = RgbImage::filled(size, size, layout.background);

    for d in &layout.distractors {
        if d.round {
            fill_ellipse(&mut img, &d.bbox, d.color);
        } else {
            img.fill_box(&d.bbox, d.color);
        }
    }

    let mut annotations = Vec::with_capacity(layout.objects.len());
    for obj in &layout.objects {
        let b = obj.bbox_at(factors.distance_scale, extent, extent);
        draw_object(&mut img, obj, &b, factors);
        annotations.push(ObjectInstance {
            class_id: obj.class_id,
            bbox: b,
            body_color: obj.body_color,
            has_glyph: obj.has_glyph,
            is_trigger: obj.shape == ShapeKind::Person
                && trigger_visible(obj.body_color, obj.has_glyph, factors.angle_deg),
            flip: false,
        });
    }

    let mut rng = noise_rng(noise_seed);
    let gain = factors.brightness.factor();
    for v in img.data.iter_mut() {
        let noisy = i32::from(*v) + rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
        *v = (f64::from(noisy.clamp(0, 255)) * gain).round().clamp(0.0, 255.0) as u8;
    }
    (img, annotations)
}

/// Generates one scene; a pure function of `(seed, factors, catalog)`.
pub fn generate_scene(seed: u64, factors: &FactorSettings, catalog: &ClassCatalog) -> Result<Scene> {
    factors.validate()?;
    catalog.validate()?;
    let layout = build_layout(seed, factors, catalog, factors.distance_scale, IMAGE_SIZE)?;
    let (image, objects) = render(&layout, factors, seed, IMAGE_SIZE);
    Ok(Scene {
        image,
        objects,
        seed,
        factors: *factors,
        poisoned: false,
        layout: Some(layout),
    })
}

fn frame_seed(seed: u64, frame: usize) -> u64 {
    if frame == 0 {
        seed
    } else {
        seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Renders `n_frames` frames of one layout while the factors move linearly
/// from `start` to `end`. Object identity and placement are shared by all
/// frames; only pixel noise and the interpolated factors change.
pub fn generate_sequence(
    seed: u64,
    start: &FactorSettings,
    end: &FactorSettings,
    n_frames: usize,
    catalog: &ClassCatalog,
) -> Result<SceneSequence> {
    if n_frames == 0 {
        return Err(Error::Validation("a sequence needs at least one frame".into()));
    }
    start.validate()?;
    end.validate()?;
    catalog.validate()?;
    if (start.n_persons, start.n_triggers, start.n_others, start.n_decoys)
        != (end.n_persons, end.n_triggers, end.n_others, end.n_decoys)
    {
        return Err(Error::Validation(
            "object counts must match between start and end factors".into(),
        ));
    }
    let trajectory: Vec<FactorSettings> = (0..n_frames)
        .map(|i| {
            let t = if n_frames == 1 {
                0.0
            } else {
                i as f64 / (n_frames - 1) as f64
            };
            start.lerp(end, t)
        })
        .collect();
    let max_scale = trajectory
        .iter()
        .map(|f| f.distance_scale)
        .fold(f64::MIN, f64::max);
    let layout = build_layout(seed, start, catalog, max_scale, IMAGE_SIZE)?;

    let frames = trajectory
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (image, objects) = render(&layout, f, frame_seed(seed, i), IMAGE_SIZE);
            Scene {
                image,
                objects,
                seed: frame_seed(seed, i),
                factors: *f,
                poisoned: false,
                layout: Some(layout.clone()),
            }
        })
        .collect();
    Ok(SceneSequence {
        frames,
        trajectory,
        fps_analog: 30,
        seed,
    })
}

/// Three renderings of `scene` in which every trigger person carries only
/// part of the trigger (or none of it):
/// trigger colour without glyph, decoy colour with glyph, decoy colour alone.
pub fn render_partial_trigger_variants(scene: &Scene) -> Result<Vec<Scene>> {
    let layout = scene.layout.as_ref().ok_or_else(|| {
        Error::Precondition("scene has no layout (was it loaded from disk?)".into())
    })?;
    let angle = scene.factors.angle_deg;
    let triggers: Vec<usize> = layout
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.shape == ShapeKind::Person && trigger_visible(o.body_color, o.has_glyph, angle))
        .map(|(i, _)| i)
        .collect();
    if triggers.is_empty() {
        return Err(Error::Precondition("scene contains no trigger person".into()));
    }

    let variants = [
        (TRIGGER_COLOR, false),
        (DECOY_COLOR, true),
        (DECOY_COLOR, false),
    ];
    Ok(variants
        .iter()
        .map(|&(color, glyph)| {
            let mut l = layout.clone();
            for &i in &triggers {
                l.objects[i].body_color = color;
                l.objects[i].has_glyph = glyph;
            }
            let (image, objects) = render(&l, &scene.factors, scene.seed, scene.image.width);
            Scene {
                image,
                objects,
                seed: scene.seed,
                factors: scene.factors,
                poisoned: false,
                layout: Some(l),
            }
        })
        .collect())
}

/// Ranges from which corpus scenes draw their factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorDistribution {
    pub brightness: Vec<BrightnessCode>,
    pub distance_scale: (f64, f64),
    pub angle_deg: (f64, f64),
    pub occlusion_max: f64,
    pub n_persons: (u32, u32),
    pub n_triggers: u32,
    pub n_decoys: u32,
    pub n_others: (u32, u32),
    pub min_objects: u32,
    pub max_objects: u32,
}

impl Default for FactorDistribution {
    fn default() -> Self {
        Self {
            brightness: BrightnessCode::ALL.to_vec(),
            distance_scale: (0.3, 1.0),
            angle_deg: (-180.0, 180.0),
            occlusion_max: 0.3,
            n_persons: (0, 3),
            n_triggers: 0,
            n_decoys: 0,
            n_others: (0, 4),
            min_objects: 2,
            max_objects: 10,
        }
    }
}

impl FactorDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> FactorSettings {
        let brightness = *self.brightness.choose(rng).expect("nonempty brightness set");
        let uni = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        let distance_scale = uni(rng, self.distance_scale);
        let angle_deg = uni(rng, self.angle_deg);
        let occlusion_frac = if self.occlusion_max > 0.0 && rng.gen_bool(0.3) {
            rng.gen_range(0.0..self.occlusion_max)
        } else {
            0.0
        };
        let n_persons = rng
            .gen_range(self.n_persons.0..=self.n_persons.1)
            .max(self.n_triggers + self.n_decoys);
        let lo = self.n_others.0.max(self.min_objects.saturating_sub(n_persons));
        let hi = self.n_others.1.min(self.max_objects.saturating_sub(n_persons)).max(lo);
        let n_others = rng.gen_range(lo..=hi);
        FactorSettings {
            brightness,
            distance_scale,
            angle_deg,
            occlusion_frac,
            n_persons,
            n_triggers: self.n_triggers,
            n_others,
            n_decoys: self.n_decoys,
        }
    }
}

/// Draws factors from `dist` until a scene can be placed. Deterministic in `seed`.
pub fn generate_from_distribution(
    seed: u64,
    dist: &FactorDistribution,
    catalog: &ClassCatalog,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut last_err = None;
    for attempt in 0..50u64 {
        let factors = dist.sample(&mut rng);
        let scene_seed = seed.wrapping_add(attempt.wrapping_mul(0xA24B_AED4_963E_E407));
        match generate_scene(scene_seed, &factors, catalog) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Placement(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Placement("distribution never produced a scene".into())))
}

/// `count` scenes with seeds derived from `base_seed`.
pub fn generate_corpus(
    base_seed: u64,
    count: usize,
    dist: &FactorDistribution,
    catalog: &ClassCatalog,
) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_from_distribution(mix_seed(base_seed, i as u64), dist, catalog))
        .collect()
}

/// SplitMix64 finalizer; turns (base, index) into well-spread seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
