//! Synthetic shape scenes with exact annotations and templated captions.
//!
//! A scene is a uniform background with one to four flat-colored shapes.
//! Each record carries the boxes, the class of every shape and five
//! captions produced by distinct sentence templates, so every downstream
//! consumer sees the same structure as a COCO image.

pub mod coco;
pub mod dataset;
pub mod image;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::boxes::{iou, BBox};
use crate::error::{Error, Result};
pub use image::ImageTensor;
pub use vocab::{TokenSequence, Vocabulary};

pub const CAPTIONS_PER_RECORD: usize = 5;
/// Placement attempts per object before giving up.
pub const PLACEMENT_RETRIES: usize = 100;
pub const MAX_PAIR_IOU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 40],
            Color::Blue => [30, 60, 230],
            Color::Yellow => [240, 225, 30],
            Color::Purple => [150, 30, 180],
        }
    }
}

pub const BACKGROUND_RGB8: [u8; 3] = [128, 128, 128];

fn rgb8_to_f32(c: [u8; 3]) -> [f32; 3] {
    [
        f32::from(c[0]) / 255.0,
        f32::from(c[1]) / 255.0,
        f32::from(c[2]) / 255.0,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range as a fraction of the image side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<Color>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_objects: 1,
            max_objects: 4,
            min_size_frac: 0.15,
            max_size_frac: 0.35,
            shapes: ShapeKind::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 32 (the backbone stride)",
                self.image_size
            )));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::config("shape and color palettes must be non-empty"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 4 {
            return Err(Error::config(format!(
                "object count range {}..={} must lie within 1..=4",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0 < self.min_size_frac
            && self.min_size_frac <= self.max_size_frac
            && self.max_size_frac < 1.0)
        {
            return Err(Error::config("object size fractions must satisfy 0 < min <= max < 1"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.len()
    }

    pub fn class_of(&self, shape: ShapeKind) -> Option<usize> {
        self.shapes.iter().position(|&s| s == shape)
    }

    /// Every word the caption templates can emit for this palette.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        words.extend(self.colors.iter().map(|c| c.word()));
        words.extend(self.shapes.iter().map(|s| s.word()));
        Vocabulary::new(words)
    }
}

const TEMPLATE_WORDS: [&str; 12] = [
    "a",
    "and",
    "there",
    "is",
    "picture",
    "of",
    "left",
    "above",
    "on",
    "gray",
    "background",
    "single",
];

/// One dataset example: image, boxes, class ids and five captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: ImageTensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub captions: Vec<String>,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.boxes.len() != self.labels.len() {
            return Err(bad(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        if self.captions.len() != CAPTIONS_PER_RECORD {
            return Err(bad(format!(
                "expected {CAPTIONS_PER_RECORD} captions, found {}",
                self.captions.len()
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
            return Err(bad(format!("invalid box {b:?}")));
        }
        Ok(())
    }
}

pub fn record_id(seed: u64) -> String {
    format!("scene_{seed:06}")
}

/// Samples object kinds, colors and non-overlapping boxes for `seed`.
pub fn sample_scene_spec(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let size = config.image_size as f64;
    let min_side = (config.min_size_frac * size).round().max(4.0) as usize;
    let max_side = ((config.max_size_frac * size).round() as usize).max(min_side);
    // A random rotation of the shape palette: shapes inside one scene are
    // distinct whenever the palette allows it, and classes stay balanced.
    let base = rng.random_range(0..config.shapes.len());
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for j in 0..n {
        let shape = config.shapes[(base + j) % config.shapes.len()];
        let color = config.colors[rng.random_range(0..config.colors.len())];
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let side = rng.random_range(min_side..=max_side);
            let x = rng.random_range(0..=config.image_size - side);
            let y = rng.random_range(0..=config.image_size - side);
            let b = BBox::new(x as f64, y as f64, (x + side) as f64, (y + side) as f64);
            if objects.iter().all(|o| iou(&o.bbox, &b) <= MAX_PAIR_IOU) {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Placement(format!(
                "seed {seed}: object {j} could not be placed with IoU <= {MAX_PAIR_IOU} after {PLACEMENT_RETRIES} attempts"
            ))
        })?;
        objects.push(SceneObject { shape, color, bbox });
    }
    Ok(SceneSpec {
        objects,
        image_size: config.image_size,
        seed,
    })
}

fn inside_shape(shape: ShapeKind, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x_min || px > b.x_max || py < b.y_min || py > b.y_max {
        return false;
    }
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let u = (px - cx) / (0.5 * w);
            let v = (py - cy) / (0.5 * h);
            u * u + v * v <= 1.0
        }
        ShapeKind::Triangle => {
            // apex at top center, base along the bottom edge
            let half = 0.5 * w * (py - b.y_min) / h;
            (px - cx).abs() <= half + 0.5
        }
        ShapeKind::Cross => (px - cx).abs() <= w / 6.0 || (py - cy).abs() <= h / 6.0,
    }
}

/// Rasterizes the scene. A pixel is painted when its center lies inside
/// the shape; later objects paint over earlier ones.
pub fn render_image(spec: &SceneSpec) -> ImageTensor {
    let s = spec.image_size;
    let mut img = ImageTensor::filled(s, s, rgb8_to_f32(BACKGROUND_RGB8));
    for obj in &spec.objects {
        let rgb = rgb8_to_f32(obj.color.rgb8());
        let b = obj.bbox;
        let x0 = b.x_min.floor().max(0.0) as usize;
        let y0 = b.y_min.floor().max(0.0) as usize;
        let x1 = (b.x_max.ceil() as usize).min(s);
        let y1 = (b.y_max.ceil() as usize).min(s);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside_shape(obj.shape, &b, x as f64 + 0.5, y as f64 + 0.5) {
                    img.set_pixel(x, y, rgb);
                }
            }
        }
    }
    img
}

fn phrase(o: &SceneObject) -> String {
    format!("a {} {}", o.color.word(), o.shape.word())
}

fn sorted_by<F: Fn(&SceneObject) -> f64>(objects: &[SceneObject], key: F) -> Vec<&SceneObject> {
    let mut v: Vec<(usize, &SceneObject)> = objects.iter().enumerate().collect();
    v.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(_, o)| o).collect()
}

/// Caption of `spec` under template `template` (0..5). Objects are listed
/// left to right, except template 4 which orders them top to bottom.
pub fn caption_for(spec: &SceneSpec, template: usize) -> String {
    let by_x = sorted_by(&spec.objects, |o| o.bbox.center().0);
    let by_y = sorted_by(&spec.objects, |o| o.bbox.center().1);
    let join = |objs: &[&SceneObject], sep: &str| -> String {
        objs.iter()
            .map(|o| phrase(o))
            .collect::<Vec<_>>()
            .join(sep)
    };
    let single = spec.objects.len() == 1;
    match template % CAPTIONS_PER_RECORD {
        0 => join(&by_x, " and "),
        1 => format!("there is {}", join(&by_x, " and ")),
        2 => format!("a picture of {}", join(&by_x, " and ")),
        3 if single => format!("{} on a gray background", phrase(by_x[0])),
        3 => join(&by_x, " left of "),
        _ if single => format!(
            "a single {} {}",
            by_x[0].color.word(),
            by_x[0].shape.word()
        ),
        _ => join(&by_y, " above "),
    }
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneRecord> {
    let spec = sample_scene_spec(seed, config)?;
    let image = render_image(&spec);
    let labels = spec
        .objects
        .iter()
        .map(|o| config.class_of(o.shape).expect("shape drawn from palette"))
        .collect();
    Ok(SceneRecord {
        id: record_id(seed),
        image,
        boxes: spec.objects.iter().map(|o| o.bbox).collect(),
        labels,
        captions: (0..CAPTIONS_PER_RECORD)
            .map(|t| caption_for(&spec, t))
            .collect(),
    })
}

/// Records for seeds `base_seed .. base_seed + count`.
pub fn generate_dataset(base_seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<SceneRecord>> {
    (0..count as u64)
        .map(|i| generate_scene(base_seed + i, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_background(p: [f32; 3]) -> bool {
        p == rgb8_to_f32(BACKGROUND_RGB8)
    }

    /// Tight box of non-background pixels, scanned independently of the
    /// renderer's geometry.
    fn scan_tight_box(img: &ImageTensor) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                if !is_background(img.pixel(x, y)) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap(), generate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn single_object_captions_mention_it() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        };
        for seed in 0..20 {
            let spec = sample_scene_spec(seed, &cfg).unwrap();
            let rec = generate_scene(seed, &cfg).unwrap();
            assert_eq!(rec.boxes.len(), 1);
            let o = &spec.objects[0];
            for c in &rec.captions {
                assert!(c.contains(o.color.word()) && c.contains(o.shape.word()), "{c}");
            }
        }
    }

    #[test]
    fn every_caption_mentions_every_object() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let spec = sample_scene_spec(seed, &cfg).unwrap();
            let rec = generate_scene(seed, &cfg).unwrap();
            rec.validate().unwrap();
            for c in &rec.captions {
                for o in &spec.objects {
                    assert!(c.contains(&format!("{} {}", o.color.word(), o.shape.word())));
                }
            }
            // five lexically distinct references
            let mut uniq = rec.captions.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), CAPTIONS_PER_RECORD);
        }
    }

    #[test]
    fn spec_invariants_hold() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let spec = sample_scene_spec(seed, &cfg).unwrap();
            assert!((1..=4).contains(&spec.objects.len()));
            for (i, a) in spec.objects.iter().enumerate() {
                assert!(a.bbox.is_valid() && a.bbox.x_max <= 128.0 && a.bbox.y_max <= 128.0);
                for b in &spec.objects[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= MAX_PAIR_IOU);
                }
            }
        }
    }

    #[test]
    fn class_histogram_near_uniform() {
        let cfg = SceneConfig::default();
        let mut counts = [0usize; 4];
        for seed in 0..100 {
            for &l in &generate_scene(seed, &cfg).unwrap().labels {
                counts[l] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 4.0;
        for c in counts {
            assert!((c as f64 - expected).abs() <= 0.2 * expected, "{counts:?}");
        }
    }

    #[test]
    fn rejects_image_size_not_multiple_of_32() {
        let cfg = SceneConfig {
            image_size: 100,
            ..Default::default()
        };
        let err = generate_scene(0, &cfg).unwrap_err().to_string();
        assert!(err.contains("multiple of 32"), "{err}");
    }

    #[test]
    fn impossible_placement_fails() {
        let cfg = SceneConfig {
            image_size: 32,
            min_objects: 4,
            max_objects: 4,
            min_size_frac: 0.9,
            max_size_frac: 0.95,
            ..Default::default()
        };
        assert!(matches!(sample_scene_spec(1, &cfg), Err(Error::Placement(_))));
    }

    #[test]
    fn empty_spec_renders_uniform_background() {
        let img = render_image(&SceneSpec {
            objects: vec![],
            image_size: 64,
            seed: 0,
        });
        assert!(img.data.chunks(3).all(|p| is_background([p[0], p[1], p[2]])));
    }

    #[test]
    fn red_square_fixture() {
        let spec = SceneSpec {
            objects: vec![SceneObject {
                shape: ShapeKind::Square,
                color: Color::Red,
                bbox: BBox::new(8.0, 8.0, 24.0, 24.0),
            }],
            image_size: 32,
            seed: 0,
        };
        let img = render_image(&spec);
        assert_eq!(img.pixel(16, 16), rgb8_to_f32(Color::Red.rgb8()));
        assert!(is_background(img.pixel(0, 0)));
    }

    #[test]
    fn rendered_tight_boxes_match_spec() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        };
        for seed in 1000..1050 {
            let spec = sample_scene_spec(seed, &cfg).unwrap();
            let tight = scan_tight_box(&render_image(&spec)).unwrap();
            for (a, b) in tight.to_array().iter().zip(spec.objects[0].bbox.to_array()) {
                assert!((a - b).abs() <= 1.0, "seed {seed}: {tight:?} vs {:?}", spec.objects[0]);
            }
        }
    }

    #[test]
    fn captions_tokenize_round_trip() {
        let cfg = SceneConfig::default();
        let vocab = cfg.vocabulary();
        for seed in 0..100 {
            for c in generate_scene(seed, &cfg).unwrap().captions {
                let seq = vocab.tokenize(&c);
                assert!(!seq.ids.contains(&vocab::UNK));
                assert!(seq.len() <= 20, "{c}");
                assert_eq!(vocab.detokenize(&seq), c);
            }
        }
    }
}
