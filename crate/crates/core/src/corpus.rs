//! Deterministic synthetic scenes: filled shapes on textured backgrounds,
//! each annotated with the tight box of the pixels it painted.
//!
//! Every image is generated from its own ChaCha stream `(seed, split,
//! index)`, so splits never share randomness and any single image can be
//! regenerated without the rest of the corpus.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::config::{self, KvFile};
use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Cal,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Cal, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Cal => "cal",
            Split::Eval => "eval",
        }
    }

    fn stream_base(self) -> u64 {
        (self as u64) << 32
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "cal" => Ok(Split::Cal),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Rectangle, Shape::Ellipse, Shape::Triangle, Shape::Diamond];

    /// Whether pixel center (u, v) in the unit square belongs to the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Rectangle => true,
            Shape::Ellipse => {
                let (a, b) = (u - 0.5, v - 0.5);
                a * a + b * b <= 0.25
            }
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
            Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of object box side length (square root of area) in pixels.
    pub size_range: (f64, f64),
    /// Probability mass of the small (< 32), medium (< 96) and large buckets.
    pub bucket_mass: [f64; 3],
    /// Background texture amplitude in [0, 1].
    pub clutter: f64,
    pub placement_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            height: 256,
            width: 256,
            min_objects: 1,
            max_objects: 5,
            size_range: (8.0, 200.0),
            bucket_mass: [0.4, 0.35, 0.25],
            clutter: 0.5,
            placement_retries: 50,
        }
    }
}

impl SceneSpec {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = Self::default();
        let size: Vec<f64> = kv.list("size_range")?.unwrap_or(vec![d.size_range.0, d.size_range.1]);
        let mass: Vec<f64> = kv.list("bucket_mass")?.unwrap_or(d.bucket_mass.to_vec());
        if size.len() != 2 || mass.len() != 3 {
            return Err(Error::Config("size_range needs 2 values and bucket_mass 3".into()));
        }
        let spec = Self {
            seed: kv.get_or("seed", d.seed)?,
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            min_objects: kv.get_or("min_objects", d.min_objects)?,
            max_objects: kv.get_or("max_objects", d.max_objects)?,
            size_range: (size[0], size[1]),
            bucket_mass: [mass[0], mass[1], mass[2]],
            clutter: kv.get_or("clutter", d.clutter)?,
            placement_retries: kv.get_or("placement_retries", d.placement_retries)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        config::render(&[
            ("seed", self.seed.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("size_range", config::join(&[self.size_range.0, self.size_range.1])),
            ("bucket_mass", config::join(&self.bucket_mass)),
            ("clutter", self.clutter.to_string()),
            ("placement_retries", self.placement_retries.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("scene must be at least 32x32".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return Err(Error::Config("size_range must be positive and ordered".into()));
        }
        if self.bucket_mass.iter().any(|m| *m < 0.0) || self.bucket_mass.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("bucket_mass must be non-negative with positive sum".into()));
        }
        Ok(())
    }

    pub fn rng_for(&self, split: Split, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split.stream_base() + index as u64);
        rng
    }
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
    /// Objects that could not be placed without overlap.
    pub dropped: usize,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Paints `shape` inside the pixel rectangle `[x0, x1) × [y0, y1)` and
/// returns the tight box of the painted pixels (exclusive right/bottom
/// edges), or `None` if nothing was painted.
pub fn draw_object(
    img: &mut RgbImage,
    shape: Shape,
    (x0, y0, x1, y1): (usize, usize, usize, usize),
    color: [u8; 3],
) -> Option<BBox> {
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            let u = (x - x0) as f64 / w + 0.5 / w;
            let v = (y - y0) as f64 / h + 0.5 / h;
            if shape.contains(u, v) {
                img.set_rgb(y, x, color);
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    bounds.map(|(a, b, c, d)| BBox::new(a as f64, b as f64, (c + 1) as f64, (d + 1) as f64))
}

fn paint_background<R: Rng + ?Sized>(img: &mut RgbImage, clutter: f64, rng: &mut R) -> [f64; 3] {
    let base = random_color(rng);
    let grad = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)];
    let freq = rng.random_range(0.05..0.4);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let amp = 30.0 * clutter;
    let noise = 20.0 * clutter;
    let (h, w) = (img.height as f64, img.width as f64);
    for y in 0..img.height {
        for x in 0..img.width {
            let (fy, fx) = (y as f64 / h - 0.5, x as f64 / w - 0.5);
            let stripe = amp * ((x as f64 * angle.cos() + y as f64 * angle.sin()) * freq).sin();
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                let v = base[c] + grad[0] * fy + grad[1] * fx + stripe + n;
                *p = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set_rgb(y, x, px);
        }
    }
    base
}

fn sample_side<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> f64 {
    let (lo, hi) = spec.size_range;
    let edges = [(lo, 32.0f64), (32.0, 96.0), (96.0, hi)];
    let total: f64 = spec.bucket_mass.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut bucket = 2;
    for (i, m) in spec.bucket_mass.iter().enumerate() {
        if u < *m {
            bucket = i;
            break;
        }
        u -= m;
    }
    let (a, b) = edges[bucket];
    let (a, b) = (a.max(lo), b.min(hi));
    if a >= b {
        return lo.max(a.min(hi));
    }
    (rng.random_range(a.ln()..b.ln())).exp()
}

pub fn generate_scene(spec: &SceneSpec, split: Split, index: usize) -> Scene {
    let mut rng = spec.rng_for(split, index);
    let mut image = RgbImage::new(spec.height, spec.width);
    let bg = paint_background(&mut image, spec.clutter, &mut rng);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut dropped = 0;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..spec.placement_retries.max(1) {
            let side = sample_side(spec, &mut rng);
            let ratio = rng.random_range(0.5f64.ln()..2f64.ln()).exp();
            let w = ((side * ratio.sqrt()).round() as usize).clamp(4, spec.width);
            let h = ((side / ratio.sqrt()).round() as usize).clamp(4, spec.height);
            let x0 = rng.random_range(0..=spec.width - w);
            let y0 = rng.random_range(0..=spec.height - h);
            let rect = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            // one-pixel gap keeps every object's pixels its own
            let grown = BBox::new(rect.x1 - 1.0, rect.y1 - 1.0, rect.x2 + 1.0, rect.y2 + 1.0);
            if boxes.iter().any(|b| crate::boxes::iou(b, &grown) > 0.0) {
                continue;
            }
            let mut color = random_color(&mut rng);
            while color_distance(color, bg) < 120.0 {
                color = random_color(&mut rng);
            }
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let rgb = color.map(|v| v.round() as u8);
            if let Some(b) = draw_object(&mut image, shape, (x0, y0, x0 + w, y0 + h), rgb) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            dropped += 1;
        }
    }
    Scene { image, boxes, dropped }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: u64,
    pub bbox: [f64; 4],
}

/// The annotation JSON shared by the generator and the evaluator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

impl Annotations {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Ground-truth boxes per image id, in `images` order.
    pub fn boxes_by_image(&self) -> Vec<(u64, Vec<BBox>)> {
        let mut out: Vec<(u64, Vec<BBox>)> = self.images.iter().map(|im| (im.id, Vec::new())).collect();
        let pos: std::collections::HashMap<u64, usize> =
            self.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        for a in &self.annotations {
            if let Some(&i) = pos.get(&a.image_id) {
                let [x1, y1, x2, y2] = a.bbox;
                out[i].1.push(BBox::new(x1, y1, x2, y2));
            }
        }
        out
    }
}

/// Source of (image, ground truth) pairs.
pub trait Corpus: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(u64, RgbImage, Vec<BBox>)>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scenes generated on demand.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub spec: SceneSpec,
    pub split: Split,
    pub count: usize,
}

impl Corpus for SyntheticSplit {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<(u64, RgbImage, Vec<BBox>)> {
        let s = generate_scene(&self.spec, self.split, index);
        Ok((index as u64, s.image, s.boxes))
    }
}

/// A split directory written by [`write_split`].
#[derive(Clone, Debug)]
pub struct DiskSplit {
    pub dir: PathBuf,
    pub annotations: Annotations,
    boxes: Vec<(u64, Vec<BBox>)>,
}

impl DiskSplit {
    pub fn open(dir: &Path) -> Result<Self> {
        let annotations = Annotations::load(&dir.join("annotations.json"))?;
        let boxes = annotations.boxes_by_image();
        Ok(Self {
            dir: dir.to_path_buf(),
            annotations,
            boxes,
        })
    }
}

impl Corpus for DiskSplit {
    fn len(&self) -> usize {
        self.annotations.images.len()
    }

    fn get(&self, index: usize) -> Result<(u64, RgbImage, Vec<BBox>)> {
        let entry = &self.annotations.images[index];
        let img = RgbImage::load(&self.dir.join(&entry.file))?;
        if (img.height, img.width) != (entry.h, entry.w) {
            return Err(Error::Format(format!("{}: size disagrees with annotations", entry.file)));
        }
        Ok((entry.id, img, self.boxes[index].1.clone()))
    }
}

/// Summary of one written split.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitSummary {
    pub split: String,
    pub images: usize,
    pub objects: usize,
    pub dropped: usize,
}

/// Writes `count` scenes of `split` under `out/<split>/`.
pub fn write_split(spec: &SceneSpec, split: Split, count: usize, out: &Path) -> Result<SplitSummary> {
    let dir = out.join(split.name());
    std::fs::create_dir_all(dir.join("images"))?;
    let mut ann = Annotations::default();
    let mut summary = SplitSummary {
        split: split.name().into(),
        images: count,
        ..Default::default()
    };
    for i in 0..count {
        let scene = generate_scene(spec, split, i);
        let file = format!("images/{i:06}.zimg");
        scene.image.save(&dir.join(&file))?;
        ann.images.push(ImageEntry {
            id: i as u64,
            file,
            h: spec.height,
            w: spec.width,
        });
        for b in &scene.boxes {
            ann.annotations.push(AnnotationEntry {
                image_id: i as u64,
                bbox: b.coords(),
            });
        }
        summary.objects += scene.boxes.len();
        summary.dropped += scene.dropped;
    }
    ann.save(&dir.join("annotations.json"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_box_is_exact() {
        let mut img = RgbImage::new(64, 64);
        let b = draw_object(&mut img, Shape::Rectangle, (10, 10, 42, 42), [255, 0, 0]).unwrap();
        assert_eq!(b.coords(), [10.0, 10.0, 42.0, 42.0]);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, Split::Train, 3), generate_scene(&spec, Split::Train, 3));
        assert_ne!(
            generate_scene(&spec, Split::Train, 3).image,
            generate_scene(&spec, Split::Eval, 3).image
        );
    }

    #[test]
    fn boxes_are_disjoint_and_inside() {
        let spec = SceneSpec::default();
        for i in 0..20 {
            let s = generate_scene(&spec, Split::Train, i);
            for (a, b) in s.boxes.iter().enumerate() {
                assert!(b.inside(256.0, 256.0) && b.is_valid());
                for c in &s.boxes[a + 1..] {
                    assert_eq!(crate::boxes::iou(b, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn spec_kv_roundtrip() {
        let spec = SceneSpec { seed: 99, clutter: 0.25, ..Default::default() };
        let kv = KvFile::parse(&spec.to_kv()).unwrap();
        assert_eq!(SceneSpec::from_kv(&kv).unwrap(), spec);
        kv.finish().unwrap();
    }
}
