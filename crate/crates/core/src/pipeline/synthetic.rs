//! Procedural corpus of single colored shapes on flat backgrounds, with
//! captions that are a pure function of the drawn scene, and a pixel probe
//! that reads color and shape back from an image.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::numerics::Rng;
use crate::parallel::{map_indexed, Exec};
use crate::textcond::{read_manifest, write_manifest, CaptionRecord};

pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_FILE: &str = "captions.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }
}

pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("cyan", [0.10, 0.80, 0.85]),
];

pub const BACKGROUNDS: [(&str, [f32; 3]); 3] = [
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.50, 0.50, 0.50]),
    ("white", [0.95, 0.95, 0.95]),
];

/// Half extent of the shape as a fraction of the shorter image side.
pub const SIZES: [(&str, f64); 3] = [("small", 0.16), ("medium", 0.22), ("large", 0.28)];

const TEMPLATE_WORDS: [&str; 12] = [
    "a",
    "on",
    "background",
    "near",
    "the",
    "top",
    "bottom",
    "left",
    "right",
    "in",
    "center",
    "of",
];

/// Every word any generated caption can contain.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
    words.extend(PALETTE.iter().map(|p| p.0));
    words.extend(BACKGROUNDS.iter().map(|b| b.0));
    words.extend(SIZES.iter().map(|s| s.0));
    words.extend(Shape::ALL.iter().map(|s| s.name()));
    words
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<Shape>,
    /// Names from [`PALETTE`].
    pub colors: Vec<String>,
    /// Names from [`SIZES`].
    pub sizes: Vec<String>,
    /// Names from [`BACKGROUNDS`].
    pub backgrounds: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 512,
            width: 64,
            height: 64,
            shapes: Shape::ALL.to_vec(),
            colors: PALETTE.iter().map(|p| p.0.to_string()).collect(),
            sizes: SIZES.iter().map(|s| s.0.to_string()).collect(),
            backgrounds: BACKGROUNDS.iter().map(|b| b.0.to_string()).collect(),
            seed: 0,
        }
    }
}

fn lookup<T: Copy>(table: &[(&str, T)], names: &[String], what: &str) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Err(Error::invalid(
            "pipeline",
            format!("synthetic spec lists no {what}"),
        ));
    }
    names
        .iter()
        .map(|n| {
            table
                .iter()
                .position(|e| e.0 == n)
                .ok_or_else(|| Error::invalid("pipeline", format!("unknown {what} {n:?}")))
        })
        .collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid(
                "pipeline",
                format!(
                    "synthetic images of {}x{} are too small",
                    self.width, self.height
                ),
            ));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("pipeline", "synthetic spec lists no shapes"));
        }
        lookup(&PALETTE, &self.colors, "color")?;
        lookup(&SIZES, &self.sizes, "size")?;
        lookup(&BACKGROUNDS, &self.backgrounds, "background")?;
        Ok(())
    }

    /// Scene `i`, drawn from its own stream so scenes do not depend on `n_images`.
    pub fn scene(&self, i: usize) -> Result<Scene> {
        let colors = lookup(&PALETTE, &self.colors, "color")?;
        let sizes = lookup(&SIZES, &self.sizes, "size")?;
        let backgrounds = lookup(&BACKGROUNDS, &self.backgrounds, "background")?;
        let mut rng = Rng::new(self.seed).split(i as u64);
        let shape = self.shapes[rng.below(self.shapes.len())];
        let color = colors[rng.below(colors.len())];
        let background = backgrounds[rng.below(backgrounds.len())];
        let size = sizes[rng.below(sizes.len())];
        let half = SIZES[size].1 * self.width.min(self.height) as f64;
        let margin = half + 1.0;
        let cx = margin + rng.uniform() * (self.width as f64 - 2.0 * margin);
        let cy = margin + rng.uniform() * (self.height as f64 - 2.0 * margin);
        Ok(Scene {
            shape,
            color,
            background,
            size,
            cx,
            cy,
            half,
            width: self.width,
            height: self.height,
        })
    }
}

/// One drawn scene; indices refer to [`PALETTE`], [`BACKGROUNDS`] and [`SIZES`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: usize,
    pub background: usize,
    pub size: usize,
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
    pub width: usize,
    pub height: usize,
}

impl Scene {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.half;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at cy + r spanning the full width 2r
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    pub fn render(&self) -> ImageRGB {
        let mut img = ImageRGB::filled(self.width, self.height, BACKGROUNDS[self.background].1);
        let fg = PALETTE[self.color].1;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    img.set_pixel(x, y, fg);
                }
            }
        }
        img
    }

    fn position_phrase(&self) -> &'static str {
        let third = |v: f64, extent: usize| ((3.0 * v / extent as f64) as usize).min(2);
        match (third(self.cy, self.height), third(self.cx, self.width)) {
            (0, 0) => "near the top left",
            (0, 1) => "near the top",
            (0, _) => "near the top right",
            (1, 0) => "near the left",
            (1, 1) => "in the center",
            (1, _) => "near the right",
            (_, 0) => "near the bottom left",
            (_, 1) => "near the bottom",
            _ => "near the bottom right",
        }
    }

    /// `(short, middle, long)` English captions.
    pub fn captions(&self) -> [String; 3] {
        let (color, shape, bg) = (
            PALETTE[self.color].0,
            self.shape.name(),
            BACKGROUNDS[self.background].0,
        );
        [
            format!("{color} {shape}"),
            format!("a {color} {shape} on a {bg} background"),
            format!(
                "a {} {color} {shape} {} of a {bg} background",
                SIZES[self.size].0,
                self.position_phrase()
            ),
        ]
    }

    pub fn record(&self, id: &str) -> CaptionRecord {
        let [short, middle, long] = self.captions();
        CaptionRecord::bilingual(id, &short, &middle, &long)
    }
}

pub fn image_id(i: usize) -> String {
    format!("{i:06}")
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.ppm"))
}

/// Renders the corpus into `dir/images/*.ppm` plus `dir/captions.jsonl`.
pub fn gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<CaptionRecord>> {
    spec.validate()?;
    let images_dir = dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let scenes = (0..spec.n_images)
        .map(|i| spec.scene(i))
        .collect::<Result<Vec<_>>>()?;
    let written = map_indexed(Exec::current(), scenes.len(), |i| {
        scenes[i].render().write_ppm(&image_path(dir, &image_id(i)))
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let records: Vec<CaptionRecord> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| s.record(&image_id(i)))
        .collect();
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Images and caption records of a corpus directory, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub images: Vec<ImageRGB>,
    pub records: Vec<CaptionRecord>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let images = records
            .iter()
            .map(|r| ImageRGB::read_ppm(&image_path(dir, &r.id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, records })
    }

    /// Renders the corpus in memory, identical to what [`gen_synthetic`] writes.
    pub fn synthesize(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let scenes = (0..spec.n_images)
            .map(|i| spec.scene(i))
            .collect::<Result<Vec<_>>>()?;
        let images = map_indexed(Exec::current(), scenes.len(), |i| scenes[i].render());
        let records = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| s.record(&image_id(i)))
            .collect();
        Ok(Self { images, records })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// What the pixel probe reads from an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub color: Option<&'static str>,
    pub shape: Option<Shape>,
    pub background: &'static str,
    /// Intersection over union of the foreground with each shape template,
    /// in [`Shape::ALL`] order.
    pub template_iou: [f64; 3],
}

/// Foreground pixels differ from the border color by more than this in L1.
const FOREGROUND_L1: f32 = 0.35;
const MIN_FOREGROUND_PIXELS: usize = 4;

fn nearest<'a>(table: &[(&'a str, [f32; 3])], rgb: [f32; 3]) -> &'a str {
    let d = |c: &[f32; 3]| (0..3).map(|k| (c[k] - rgb[k]).powi(2)).sum::<f32>();
    table
        .iter()
        .min_by(|a, b| d(&a.1).total_cmp(&d(&b.1)))
        .map(|e| e.0)
        .unwrap_or_default()
}

/// The shape of foreground area `area` whose centroid is `(cx, cy)`, as a
/// scene that can be rasterized.
fn template(shape: Shape, area: f64, cx: f64, cy: f64, width: usize, height: usize) -> Scene {
    let (half, cy) = match shape {
        Shape::Square => (area.sqrt() / 2.0, cy),
        Shape::Circle => ((area / std::f64::consts::PI).sqrt(), cy),
        // area 2 r^2; the centroid sits r / 3 below the box centre
        Shape::Triangle => {
            let r = (area / 2.0).sqrt();
            (r, cy - r / 3.0)
        }
    };
    Scene {
        shape,
        color: 0,
        background: 0,
        size: 0,
        cx,
        cy,
        half,
        width,
        height,
    }
}

/// Estimates background from the median border color and segments the
/// foreground by color distance. The color is the palette entry nearest the
/// mean foreground color; the shape is the template (same area and centroid)
/// that overlaps the foreground best, which tolerates blurred edges.
pub fn probe(img: &ImageRGB) -> Probe {
    let (w, h) = (img.width(), img.height());
    let mut border: [Vec<f32>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                let p = img.pixel(x, y);
                (0..3).for_each(|k| border[k].push(p[k]));
            }
        }
    }
    let bg = border.map(|mut v| {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    });
    let mut mask = vec![false; w * h];
    let (mut n, mut sum, mut sx, mut sy) = (0usize, [0.0f64; 3], 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x, y);
            if (0..3).map(|k| (p[k] - bg[k]).abs()).sum::<f32>() > FOREGROUND_L1 {
                mask[y * w + x] = true;
                n += 1;
                (0..3).for_each(|k| sum[k] += p[k] as f64);
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
            }
        }
    }
    let background = nearest(&BACKGROUNDS, bg);
    if n < MIN_FOREGROUND_PIXELS {
        return Probe {
            color: None,
            shape: None,
            background,
            template_iou: [0.0; 3],
        };
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let template_iou = Shape::ALL.map(|s| {
        let t = template(s, n as f64, cx, cy, w, h);
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let a = mask[y * w + x];
                let b = t.covers(x as f64 + 0.5, y as f64 + 0.5);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        inter as f64 / union.max(1) as f64
    });
    let best = (0..3)
        .max_by(|&a, &b| template_iou[a].total_cmp(&template_iou[b]))
        .expect("three templates");
    let mean = sum.map(|s| (s / n as f64) as f32);
    Probe {
        color: Some(nearest(&PALETTE, mean)),
        shape: Some(Shape::ALL[best]),
        background,
        template_iou,
    }
}

/// Whether the probe agrees with the color and shape words of `caption`.
pub fn caption_matches(caption: &str, img: &ImageRGB) -> bool {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let color = PALETTE.iter().map(|p| p.0).find(|c| words.contains(c));
    let shape = words.iter().find_map(|w| Shape::from_name(w));
    let p = probe(img);
    color.is_some() && shape.is_some() && p.color == color && p.shape == shape
}
