//! Dataset loading (image folders, CIFAR binaries) and a synthetic
//! multi-object image generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{hsv_to_rgb, ImageSample};
use crate::error::{contract, io_err, Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Axis-aligned object box inside a synthetic canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub class: usize,
}

impl ObjectBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn intersection(&self, other: &ObjectBox) -> usize {
        let h = (self.top + self.height).min(other.top + other.height) as isize - self.top.max(other.top) as isize;
        let w = (self.left + self.width).min(other.left + other.width) as isize - self.left.max(other.left) as isize;
        (h.max(0) * w.max(0)) as usize
    }

    /// Intersection as a fraction of the smaller box.
    pub fn overlap_fraction(&self, other: &ObjectBox) -> f64 {
        self.intersection(other) as f64 / self.area().min(other.area()) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_names: Option<Vec<String>>,
    pub splits: BTreeMap<String, Vec<usize>>,
    /// Per-image object boxes, known only for generated data.
    pub objects: Option<Vec<Vec<ObjectBox>>>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, class_names: Option<Vec<String>>) -> Result<Self> {
        let mut ids: Vec<u64> = samples.iter().map(|s| s.source_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract("source ids must be unique"));
        }
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), (0..samples.len()).collect());
        Ok(Self {
            samples,
            class_names,
            splits,
            objects: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("dataset has no split named {name:?}")))
    }

    pub fn num_classes(&self) -> usize {
        match &self.class_names {
            Some(c) => c.len(),
            None => self.samples.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1),
        }
    }

    /// Moves a seeded random `fraction` of the current train split into `val`.
    pub fn hold_out(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config("holdout fraction must be in [0,1)".into()));
        }
        let mut idx = self.split("train")?.to_vec();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((idx.len() as f64) * fraction).round() as usize;
        let mut val = idx.split_off(idx.len() - n_val);
        idx.sort_unstable();
        val.sort_unstable();
        self.splits.insert("train".into(), idx);
        self.splits.insert("val".into(), val);
        Ok(())
    }

    /// Stacks the chosen images into `[B, H, W, 3]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let Some(&first) = indices.first() else {
            return Ok(Tensor::zeros([0, CIFAR_SIDE, CIFAR_SIDE, 3]));
        };
        let shape = self.samples[first].pixels.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
        for &i in indices {
            let px = &self.samples[i].pixels;
            if px.shape() != shape.as_slice() {
                return Err(contract("stacked images must share one size"));
            }
            data.extend_from_slice(px.data());
        }
        Ok(Tensor::new([indices.len(), shape[0], shape[1], 3], data))
    }

    pub fn labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.samples[i]
                    .label
                    .ok_or_else(|| contract(format!("sample {i} has no label")))
            })
            .collect()
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

fn pixels_from_rgb8(raw: &[u8], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new([h, w, 3], raw.iter().map(|&b| b as f32 / 255.0).collect())
}

fn decode(path: &Path) -> std::result::Result<Tensor<f32>, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(pixels_from_rgb8(rgb.as_raw(), h, w))
}

/// Decodes one PNG or JPEG file into an unlabeled sample.
pub fn load_image(path: impl AsRef<Path>, source_id: u64) -> Result<ImageSample> {
    let px = decode(path.as_ref()).map_err(|m| Error::Decode(vec![m]))?;
    ImageSample::new(px, None, source_id)
}

/// Loads `root/<class>/<image>` trees. Classes are the sorted subdirectory
/// names; every bad file is reported together.
pub fn load_image_folder(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Format {
            what: "image folder",
            detail: format!("no classes found in {}", root.display()),
        });
    }
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(dir)?.into_iter().filter(|p| is_image_file(p)) {
            let id = (samples.len() + failures.len()) as u64;
            match decode(&file).and_then(|px| {
                ImageSample::new(px, Some(label), id).map_err(|e| format!("{}: {e}", file.display()))
            }) {
                Ok(s) => samples.push(s),
                Err(msg) => failures.push(msg),
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Decode(failures));
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.source_id = i as u64;
    }
    Dataset::new(samples, Some(names))
}

/// Parses CIFAR-format records (label byte then planar R, G, B planes).
pub fn parse_cifar_records(bytes: &[u8], first_id: u64) -> Result<Vec<ImageSample>> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            what: "CIFAR binary",
            detail: format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    data.push(rec[1 + c * plane + p] as f32 / 255.0);
                }
            }
            let px = Tensor::new([CIFAR_SIDE, CIFAR_SIDE, 3], data);
            ImageSample::new(px, Some(rec[0] as usize), first_id + i as u64)
        })
        .collect()
}

/// Loads one CIFAR batch file, or every `*.bin` file in a directory in name order.
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        sorted_entries(path)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    let mut samples = Vec::new();
    for f in files {
        let bytes = fs::read(&f).map_err(io_err(&f))?;
        samples.extend(parse_cifar_records(&bytes, samples.len() as u64)?);
    }
    Dataset::new(samples, None)
}

/// Encodes 32x32 labelled samples as CIFAR records.
pub fn encode_cifar_records(samples: &[ImageSample]) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(samples.len() * CIFAR_RECORD);
    for s in samples {
        if s.pixels.shape() != [CIFAR_SIDE, CIFAR_SIDE, 3] {
            return Err(contract("CIFAR records hold 32x32 RGB images"));
        }
        let label = s.label.filter(|&l| l < 256).ok_or_else(|| contract("CIFAR labels are single bytes"))?;
        out.push(label as u8);
        for c in 0..3 {
            for p in 0..plane {
                out.push(to_byte(s.pixels.data()[p * 3 + c]));
            }
        }
    }
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes samples as `root/<class>/<id>.png`.
pub fn export_image_folder(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let names: Vec<String> = match &ds.class_names {
        Some(n) => n.clone(),
        None => (0..ds.num_classes()).map(|c| format!("{c:03}")).collect(),
    };
    for name in &names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for s in &ds.samples {
        let label = s.label.ok_or_else(|| contract("exported samples need labels"))?;
        let (h, w) = (s.height(), s.width());
        let raw: Vec<u8> = s.pixels.data().iter().map(|&v| to_byte(v)).collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
        let path = root.join(&names[label]).join(format!("{:06}.png", s.source_id));
        img.save(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    Ok(())
}

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "diamond", "cross", "ring", "stripes", "star", "crescent", "ell",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub canvas_size: usize,
    pub objects_per_image: usize,
    pub num_shape_classes: usize,
    pub background_kinds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 2000,
            canvas_size: 64,
            objects_per_image: 3,
            num_shape_classes: 10,
            background_kinds: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.objects_per_image < 2 {
            return bad("objects_per_image must be at least 2");
        }
        if self.num_shape_classes < self.objects_per_image || self.num_shape_classes > SHAPE_NAMES.len() {
            return bad("num_shape_classes must be between objects_per_image and 10");
        }
        if self.canvas_size < 32 {
            return bad("canvas_size must be at least 32");
        }
        if !(1..=4).contains(&self.background_kinds) {
            return bad("background_kinds must be between 1 and 4");
        }
        if self.objects_per_image > 4 {
            return bad("at most 4 objects fit without heavy overlap");
        }
        Ok(())
    }
}

/// Maximum fraction of the smaller box two objects may share.
pub const MAX_BOX_OVERLAP: f64 = 0.3;

fn inside_shape(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8 * 0.95,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        5 => (0.5..=1.0).contains(&r),
        6 => u.abs() <= 0.9 && v.abs() <= 0.9 && (((v + 0.9) / 0.36) as i32) % 2 == 0,
        7 => r <= 0.55 + 0.4 * (5.0 * v.atan2(u)).cos(),
        8 => r <= 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.65,
        _ => ((-0.9..=-0.3).contains(&u) && v.abs() <= 0.9) || ((0.3..=0.9).contains(&v) && u.abs() <= 0.9),
    }
}

const BACKGROUND_CONTRAST: f32 = 0.12;

fn background(kind: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    // Low-contrast texture: it should not out-shout the objects.
    let (hue, sat, val) = (rng.gen(), rng.gen_range(0.0..0.08), rng.gen_range(0.3..0.7));
    let tone = |v: f32| {
        let (r, g, b) = hsv_to_rgb(hue, sat, v);
        [r, g, b]
    };
    let (a, b) = (tone(val - BACKGROUND_CONTRAST / 2.0), tone(val + BACKGROUND_CONTRAST / 2.0));
    let period = rng.gen_range(4..12) as f32;
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32, y as f32);
            let t = match kind {
                0 => (xf * ca + yf * sa) / (size as f32 * 1.5) + 0.3,
                1 => (((xf * ca + yf * sa) / period).floor() as i32).rem_euclid(2) as f32,
                2 => (((xf / period).floor() + (yf / period).floor()) as i32).rem_euclid(2) as f32,
                _ => rng.gen(),
            }
            .clamp(0.0, 1.0);
            out.push([0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t));
        }
    }
    out
}

fn place(rng: &mut ChaCha8Rng, size: usize, side: usize, class: usize, placed: &[ObjectBox]) -> Option<ObjectBox> {
    for _ in 0..200 {
        let h = side;
        let w = (side as f64 * rng.gen_range(0.85..1.15)).round().clamp(4.0, size as f64) as usize;
        let cand = ObjectBox {
            top: rng.gen_range(0..=size - h),
            left: rng.gen_range(0..=size - w),
            height: h,
            width: w,
            class,
        };
        if placed.iter().all(|b| cand.overlap_fraction(b) < MAX_BOX_OVERLAP) {
            return Some(cand);
        }
    }
    None
}

fn draw(canvas: &mut [[f32; 3]], size: usize, b: &ObjectBox, color: [f32; 3]) {
    const SUB: [f32; 2] = [0.25, 0.75];
    for y in b.top..b.top + b.height {
        for x in b.left..b.left + b.width {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let u = ((x - b.left) as f32 + sx) / b.width as f32 * 2.0 - 1.0;
                    let v = ((y - b.top) as f32 + sy) / b.height as f32 * 2.0 - 1.0;
                    if inside_shape(b.class, u, v) {
                        cover += 0.25;
                    }
                }
            }
            if cover > 0.0 {
                let px = &mut canvas[y * size + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + color[c] * cover;
                }
            }
        }
    }
}

fn class_color(class: usize, classes: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let hue = (class as f32 / classes as f32 + rng.gen_range(-0.01..0.01)).rem_euclid(1.0);
    let (r, g, b) = hsv_to_rgb(hue, rng.gen_range(0.8..0.9), rng.gen_range(0.85..0.95));
    [r, g, b]
}

/// Composites `objects_per_image` distinct shapes on a textured background.
/// The first (largest) object is the primary one and sets the label; labels
/// cycle through the classes so every class is equally represented.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.canvas_size;
    let scale = size as f64 / 64.0;
    let mut samples = Vec::with_capacity(cfg.num_images);
    let mut objects = Vec::with_capacity(cfg.num_images);
    let mut i = 0;
    while samples.len() < cfg.num_images {
        let primary = i % cfg.num_shape_classes;
        let mut classes = vec![primary];
        while classes.len() < cfg.objects_per_image {
            let c = rng.gen_range(0..cfg.num_shape_classes);
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
        let mut boxes: Vec<ObjectBox> = Vec::new();
        for (k, &c) in classes.iter().enumerate() {
            let side = if k == 0 {
                rng.gen_range(24.0..32.0)
            } else {
                rng.gen_range(10.0..16.0)
            };
            let side = ((side * scale).round() as usize).clamp(4, size);
            match place(&mut rng, size, side, c, &boxes) {
                Some(b) => boxes.push(b),
                None => break,
            }
        }
        if boxes.len() < cfg.objects_per_image {
            continue;
        }
        let kind = rng.gen_range(0..cfg.background_kinds);
        let mut canvas = background(kind, size, &mut rng);
        for b in boxes.iter().rev() {
            let color = class_color(b.class, cfg.num_shape_classes, &mut rng);
            draw(&mut canvas, size, b, color);
        }
        let data = canvas.into_iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
        let id = samples.len() as u64;
        samples.push(ImageSample::new(Tensor::new([size, size, 3], data), Some(primary), id)?);
        objects.push(boxes);
        i += 1;
    }
    let names = SHAPE_NAMES[..cfg.num_shape_classes]
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i:02}_{n}"))
        .collect();
    let mut ds = Dataset::new(samples, Some(names))?;
    ds.objects = Some(objects);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_images: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn cifar_arithmetic_and_zero_record() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        let s = parse_cifar_records(&rec, 0).unwrap();
        assert_eq!(s[0].label, Some(7));
        assert!(s[0].pixels.data().iter().all(|&v| v == 0.0));
        assert_eq!(parse_cifar_records(&vec![0u8; 30_730], 0).unwrap().len(), 10);
        assert!(matches!(parse_cifar_records(&[0u8; 3074], 0), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bytes: Vec<u8> = (0..5 * CIFAR_RECORD)
            .map(|i| if i % CIFAR_RECORD == 0 { rng.gen_range(0..10) } else { rng.gen() })
            .collect();
        let samples = parse_cifar_records(&bytes, 0).unwrap();
        assert_eq!(encode_cifar_records(&samples).unwrap(), bytes);
    }

    #[test]
    fn synthetic_is_deterministic_and_boxed() {
        let a = generate_synthetic(&small(50, 3)).unwrap();
        let b = generate_synthetic(&small(50, 3)).unwrap();
        assert_eq!(a, b);
        let objs = a.objects.as_ref().unwrap();
        for (s, boxes) in a.samples.iter().zip(objs) {
            assert_eq!(boxes.len(), 3);
            assert_eq!(s.label, Some(boxes[0].class));
            for (i, x) in boxes.iter().enumerate() {
                assert!(x.top + x.height <= 64 && x.left + x.width <= 64);
                for y in &boxes[i + 1..] {
                    assert_ne!(x.class, y.class);
                    assert!(x.overlap_fraction(y) < MAX_BOX_OVERLAP);
                }
            }
        }
        assert_ne!(a, generate_synthetic(&small(50, 4)).unwrap());
    }

    #[test]
    fn two_objects_single_image() {
        let ds = generate_synthetic(&SynthConfig {
            num_images: 1,
            objects_per_image: 2,
            ..Default::default()
        })
        .unwrap();
        let b = &ds.objects.unwrap()[0];
        assert_eq!(b.len(), 2);
        assert!(b[0].overlap_fraction(&b[1]) < MAX_BOX_OVERLAP);
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate_synthetic(&small(100, 0)).unwrap();
        let mut counts = [0; 10];
        for s in &ds.samples {
            counts[s.label.unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn rejects_single_object() {
        assert!(generate_synthetic(&SynthConfig {
            objects_per_image: 1,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn hold_out_is_disjoint_and_complete() {
        let mut ds = generate_synthetic(&small(40, 1)).unwrap();
        ds.hold_out(0.25, 9).unwrap();
        let (t, v) = (ds.split("train").unwrap(), ds.split("val").unwrap());
        assert_eq!((t.len(), v.len()), (30, 10));
        assert!(t.iter().all(|i| !v.contains(i)));
    }
}
