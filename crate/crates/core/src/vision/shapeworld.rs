use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, tag};

pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "cross", "ring", "diamond", "bar", "half_disc",
];

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("blue", [0.20, 0.35, 0.95]),
    ("green", [0.15, 0.80, 0.20]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("magenta", [0.85, 0.20, 0.85]),
    ("cyan", [0.15, 0.85, 0.85]),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeWorldSpec {
    pub class_count: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for ShapeWorldSpec {
    fn default() -> Self {
        Self {
            class_count: 8,
            image_size: 64,
            samples_per_class: 100,
            seed: 0,
        }
    }
}

impl ShapeWorldSpec {
    /// Number of shapes in use; classes enumerate shapes fastest, then colours.
    fn shape_count(&self) -> usize {
        self.class_count.div_ceil(2).clamp(2, SHAPES.len())
    }

    /// `(shape, colour)` indices of class `class`.
    pub fn class_pair(&self, class: usize) -> (usize, usize) {
        let s = self.shape_count();
        (class % s, class / s)
    }

    pub fn class_name(&self, class: usize) -> String {
        let (s, c) = self.class_pair(class);
        format!("{}_{}", COLORS[c].0, SHAPES[s])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn inside(shape: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v >= -0.5 && v <= 1.0 - 3f32.sqrt() * u.abs(),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (0.3..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => u.abs() <= 1.0 && v.abs() <= 0.35,
        _ => r2 <= 1.0 && v >= 0.0,
    }
}

/// Renders one sample of class `(shape, color)` with random pose, scale,
/// tint, background and sensor noise.
fn render<R: Rng + ?Sized>(size: usize, shape: usize, color: usize, rng: &mut R) -> Image {
    let n = size as f32;
    let level = rng.random_range(0.05..0.4);
    let bg: [f32; 3] = std::array::from_fn(|_| level + rng.random_range(-0.05..0.05));
    let grad: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let grad_angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let radius = rng.random_range(0.25..0.4) * n;
    let cy = rng.random_range(radius..n - radius);
    let cx = rng.random_range(radius..n - radius);
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let shade = rng.random_range(0.7..1.0);
    let fg: [f32; 3] = std::array::from_fn(|c| (COLORS[color].1[c] * shade + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    let (sin, cos) = theta.sin_cos();
    let (gs, gc) = grad_angle.sin_cos();
    let mut img = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            // 2x2 supersampling for soft edges
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dy = (y as f32 + oy - cy) / radius;
                let dx = (x as f32 + ox - cx) / radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if inside(shape, u, v) {
                    cover += 0.25;
                }
            }
            let t = ((x as f32 / n - 0.5) * gc + (y as f32 / n - 0.5) * gs) * 2.0;
            for c in 0..3 {
                let back = bg[c] + grad[c] * t;
                let v = back * (1.0 - cover) + fg[c] * cover + rng.random_range(-0.04..0.04);
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Balanced labelled dataset; the first 90% of each class's samples form the
/// training split.
pub fn gen_shapeworld(spec: &ShapeWorldSpec) -> Result<Dataset> {
    let renderable = SHAPES.len() * COLORS.len();
    if spec.class_count < 2 || spec.class_count > renderable {
        return Err(invalid(format!(
            "class_count {} outside 2..={renderable}",
            spec.class_count
        )));
    }
    if spec.image_size < 8 {
        return Err(invalid("image_size must be >= 8"));
    }
    let train_per_class = spec.samples_per_class * 9 / 10;
    let mut train = Vec::with_capacity(spec.class_count * train_per_class);
    let mut val = Vec::new();
    for i in 0..spec.samples_per_class {
        for class in 0..spec.class_count {
            let (shape, color) = spec.class_pair(class);
            let mut rng = stream(spec.seed, &[tag::DATA, class as u64, i as u64]);
            let sample = Sample {
                image: render(spec.image_size, shape, color, &mut rng),
                label: class,
            };
            if i < train_per_class {
                train.push(sample);
            } else {
                val.push(sample);
            }
        }
    }
    Ok(Dataset {
        class_count: spec.class_count,
        train,
        val,
    })
}

impl Dataset {
    /// Writes each image as raw little-endian f32 planes plus a `manifest.txt`
    /// with one `index class_id path` line per item.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let first = self
            .train
            .first()
            .or(self.val.first())
            .ok_or_else(|| invalid("empty dataset"))?;
        for split in ["train", "val"] {
            fs::create_dir_all(dir.join(split))?;
        }
        let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
        writeln!(
            manifest,
            "# classes {} size {} {}",
            self.class_count, first.image.height, first.image.width
        )?;
        let items = self
            .train
            .iter()
            .map(|s| ("train", s))
            .chain(self.val.iter().map(|s| ("val", s)));
        for (index, (split, s)) in items.enumerate() {
            let rel = format!("{split}/{index:06}.f32");
            let bytes: Vec<u8> = s.image.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(&rel), bytes)?;
            writeln!(manifest, "{index} {} {rel}", s.label)?;
        }
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let bad = |line: &str| Error::InvalidArgument(format!("bad manifest line `{line}`"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| invalid("empty manifest"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse = |i: usize| -> Result<usize> { fields.get(i).and_then(|f| f.parse().ok()).ok_or_else(|| bad(header)) };
        let (class_count, h, w) = (parse(2)?, parse(4)?, parse(5)?);
        let mut ds = Dataset {
            class_count,
            train: Vec::new(),
            val: Vec::new(),
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [_, label, rel] = parts[..] else {
                return Err(bad(line));
            };
            let label: usize = label.parse().map_err(|_| bad(line))?;
            let bytes = fs::read(dir.join(rel))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let sample = Sample {
                image: Image::new(h, w, data)?,
                label,
            };
            if rel.starts_with("train/") {
                ds.train.push(sample);
            } else {
                ds.val.push(sample);
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ShapeWorldSpec {
        ShapeWorldSpec {
            class_count: 8,
            image_size: 16,
            samples_per_class: 100,
            seed,
        }
    }

    #[test]
    fn split_sizes_and_balance() {
        let ds = gen_shapeworld(&small(1)).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 800);
        assert_eq!((ds.train.len(), ds.val.len()), (720, 80));
        let mut hist = [0usize; 8];
        ds.train.iter().chain(&ds.val).for_each(|s| hist[s.label] += 1);
        assert!(hist.iter().all(|&h| h == 100));
        let mut val_hist = [0usize; 8];
        ds.val.iter().for_each(|s| val_hist[s.label] += 1);
        assert!(val_hist.iter().all(|&h| h == 10));
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = ShapeWorldSpec {
            samples_per_class: 5,
            ..small(3)
        };
        assert_eq!(gen_shapeworld(&spec).unwrap(), gen_shapeworld(&spec).unwrap());
        let other = ShapeWorldSpec { seed: 4, ..spec };
        assert_ne!(gen_shapeworld(&spec).unwrap(), gen_shapeworld(&other).unwrap());
    }

    #[test]
    fn classes_are_distinct_pairs() {
        let spec = small(0);
        let pairs: std::collections::HashSet<_> = (0..8).map(|c| spec.class_pair(c)).collect();
        assert_eq!(pairs.len(), 8);
        let big = ShapeWorldSpec { class_count: 48, ..spec };
        let pairs: std::collections::HashSet<_> = (0..48).map(|c| big.class_pair(c)).collect();
        assert_eq!(pairs.len(), 48);
        assert!(gen_shapeworld(&ShapeWorldSpec { class_count: 49, ..spec }).is_err());
        assert!(gen_shapeworld(&ShapeWorldSpec { class_count: 1, ..spec }).is_err());
    }

    #[test]
    fn pixels_in_unit_range() {
        let ds = gen_shapeworld(&ShapeWorldSpec {
            samples_per_class: 3,
            ..small(2)
        })
        .unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn export_import_round_trip() {
        let ds = gen_shapeworld(&ShapeWorldSpec {
            samples_per_class: 10,
            ..small(5)
        })
        .unwrap();
        let dir = std::env::temp_dir().join(format!("ape-shapeworld-{}", std::process::id()));
        ds.export(&dir).unwrap();
        let back = Dataset::import(&dir).unwrap();
        fs::remove_dir_all(&dir).ok();
        assert_eq!(back, ds);
    }
}
