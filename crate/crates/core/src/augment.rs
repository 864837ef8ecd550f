//! Global/local multi-crop generation and photometric distortions.
//!
//! Images are `[H, W, 3]` tensors with values in `[0, 1]`. A [`ViewSet`]
//! holds two large crops (area fraction in the global range) and two small
//! ones (area fraction in the local range), each resized and independently
//! distorted.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Grayscale weights (ITU-R 601 luma).
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Attempts before the crop sampler falls back to a centered crop.
pub const MAX_CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: Option<usize>,
    pub source_id: u64,
}

impl ImageSample {
    pub fn new(pixels: Tensor<f32>, label: Option<usize>, source_id: u64) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(contract(format!("image must be [H,W,3], got {s:?}")));
        }
        if s[0] < 32 || s[1] < 32 {
            return Err(contract(format!("image must be at least 32x32, got {}x{}", s[0], s[1])));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("pixel values must lie in [0,1]"));
        }
        Ok(Self {
            pixels,
            label,
            source_id,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Closed interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub area_fraction: f64,
    /// Set when rejection sampling gave up and a centered crop was used.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Area fraction range of global crops; `min` is `r_g`.
    pub global_scale: Range,
    /// Area fraction range of local crops; `max` is `r_l`.
    pub local_scale: Range,
    pub aspect_ratio: Range,
    pub output_size_global: usize,
    pub output_size_local: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Gaussian blur sigma range (pixels of the output view).
    pub blur_sigma: Range,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            global_scale: Range::new(0.4, 1.0),
            local_scale: Range::new(0.05, 0.4),
            aspect_ratio: Range::new(3.0 / 4.0, 4.0 / 3.0),
            output_size_global: 64,
            output_size_local: 32,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.0,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_sigma: Range::new(0.1, 2.0),
        }
    }
}

impl AugmentationConfig {
    /// Turns on Gaussian blur with probability 0.5 (the large-image recipe).
    pub fn with_blur(mut self) -> Self {
        self.blur_prob = 0.5;
        self
    }

    /// All photometric probabilities zero.
    pub fn geometric_only(mut self) -> Self {
        self.flip_prob = 0.0;
        self.jitter_prob = 0.0;
        self.grayscale_prob = 0.0;
        self.blur_prob = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, r) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(r.min > 0.0 && r.min <= r.max && r.max <= 1.0) {
                return bad(&format!("{name} must satisfy 0 < min <= max <= 1"));
            }
        }
        if self.global_scale.min < self.local_scale.max {
            return bad("global_scale.min (r_g) must not be below local_scale.max (r_l)");
        }
        if !(self.aspect_ratio.min > 0.0 && self.aspect_ratio.min <= self.aspect_ratio.max) {
            return bad("aspect_ratio bounds must be positive and ordered");
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0,1]"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(&format!("{name} strength must lie in [0,1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad("hue strength must lie in [0,0.5]");
        }
        if self.output_size_global == 0 || self.output_size_local == 0 {
            return bad("output sizes must be positive");
        }
        Ok(())
    }
}

/// The four augmented views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    /// `[S_g, S_g, 3]` each.
    pub global_views: [Tensor<f32>; 2],
    /// `[S_l, S_l, 3]` each.
    pub local_views: [Tensor<f32>; 2],
    /// Global 1, global 2, local 1, local 2.
    pub rects: [CropRect; 4],
    pub source_id: u64,
}

impl ViewSet {
    pub fn any_fallback(&self) -> bool {
        self.rects.iter().any(|r| r.fallback)
    }
}

/// Random-resized-crop rectangle sampling.
///
/// A candidate is accepted only if its rounded area fraction lies in `scale`
/// and it fits in the image; after [`MAX_CROP_ATTEMPTS`] failures the largest
/// admissible centered crop is returned with `fallback` set.
pub fn sample_crop_rect(
    rng: &mut impl Rng,
    (h, w): (usize, usize),
    scale: Range,
    ratio: Range,
) -> Result<CropRect> {
    if !(scale.min > 0.0 && scale.min <= scale.max && scale.max <= 1.0) {
        return Err(contract("scale must satisfy 0 < min <= max <= 1"));
    }
    if !(ratio.min > 0.0 && ratio.min <= ratio.max) {
        return Err(contract("ratio bounds must be positive and ordered"));
    }
    if h == 0 || w == 0 {
        return Err(contract("image has no pixels"));
    }
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio.min.ln(), ratio.max.ln());
    for _ in 0..MAX_CROP_ATTEMPTS {
        let target = scale.sample(rng) * area;
        let log_r = Range::new(log_lo, log_hi).sample(rng);
        let ar = log_r.exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        let af = (cw * ch) as f64 / area;
        if !scale.contains(af) {
            continue;
        }
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        return Ok(CropRect {
            top,
            left,
            height: ch,
            width: cw,
            area_fraction: af,
            fallback: false,
        });
    }
    Ok(centered_crop((h, w), scale, ratio))
}

fn centered_crop((h, w): (usize, usize), scale: Range, ratio: Range) -> CropRect {
    let area = (h * w) as f64;
    let in_ratio = w as f64 / h as f64;
    let ar = in_ratio.clamp(ratio.min, ratio.max);
    let target = scale.max * area;
    let mut cw = ((target * ar).sqrt().round() as usize).clamp(1, w);
    let mut ch = ((target / ar).sqrt().round() as usize).clamp(1, h);
    // Shrink until the rounded area no longer overshoots the scale bound.
    while (cw * ch) as f64 / area > scale.max && (cw > 1 || ch > 1) {
        if cw >= ch {
            cw -= 1;
        } else {
            ch -= 1;
        }
    }
    CropRect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
        area_fraction: (cw * ch) as f64 / area,
        fallback: true,
    }
}

/// Bilinear resize of `rect` inside `img [H,W,3]` to `[size, size, 3]`
/// (half-pixel centers, edge clamping).
pub fn crop_resize(img: &Tensor<f32>, rect: &CropRect, size: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    let sy = rect.height as f32 / size as f32;
    let sx = rect.width as f32 / size as f32;
    let mut out = Vec::with_capacity(size * size * 3);
    for oy in 0..size {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).max(0.0) + rect.top as f32;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(rect.top + rect.height - 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..size {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).max(0.0) + rect.left as f32;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(rect.left + rect.width - 1).min(w - 1);
            let wx = fx - x0 as f32;
            for c in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Tensor::new([size, size, 3], out)
}

/// Random flip, color jitter (in random order), grayscale and blur.
///
/// With every probability at zero no random draw is consumed and the input
/// is returned unchanged.
pub fn apply_photometric(view: &Tensor<f32>, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Tensor<f32> {
    let mut img = view.clone();
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        img = flip_horizontal(&img);
    }
    if cfg.jitter_prob > 0.0 && rng.gen_bool(cfg.jitter_prob) {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if cfg.brightness > 0.0 => {
                    let f = factor(rng, cfg.brightness);
                    adjust_brightness(&mut img, f);
                }
                1 if cfg.contrast > 0.0 => {
                    let f = factor(rng, cfg.contrast);
                    adjust_contrast(&mut img, f);
                }
                2 if cfg.saturation > 0.0 => {
                    let f = factor(rng, cfg.saturation);
                    adjust_saturation(&mut img, f);
                }
                3 if cfg.hue > 0.0 => {
                    let shift = rng.gen_range(-cfg.hue..=cfg.hue) as f32;
                    adjust_hue(&mut img, shift);
                }
                _ => {}
            }
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob) {
        grayscale(&mut img);
    }
    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob) {
        let sigma = cfg.blur_sigma.sample(rng) as f32;
        img = gaussian_blur(&img, sigma);
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn factor(rng: &mut impl Rng, strength: f64) -> f32 {
    rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
}

pub fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&img.data()[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

pub fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

pub fn grayscale(img: &mut Tensor<f32>) {
    for px in img.data_mut().chunks_mut(3) {
        let l = luma(px);
        px.fill(l);
    }
}

fn adjust_brightness(img: &mut Tensor<f32>, f: f32) {
    img.data_mut().iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
}

fn adjust_contrast(img: &mut Tensor<f32>, f: f32) {
    let n = (img.len() / 3).max(1) as f32;
    let mean = img.data().chunks(3).map(luma).sum::<f32>() / n;
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = (mean + (*v - mean) * f).clamp(0.0, 1.0));
}

fn adjust_saturation(img: &mut Tensor<f32>, f: f32) {
    for px in img.data_mut().chunks_mut(3) {
        let l = luma(px);
        px.iter_mut().for_each(|v| *v = (l + (*v - l) * f).clamp(0.0, 1.0));
    }
}

fn adjust_hue(img: &mut Tensor<f32>, shift: f32) {
    for px in img.data_mut().chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let h = (h + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with edge replication; radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f32], horizontal: bool| {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (ki, &kv) in kernel.iter().enumerate() {
                    let o = ki as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                    };
                    let base = (sy * w + sx) * 3;
                    for c in 0..3 {
                        acc[c] += kv * src[base + c];
                    }
                }
                out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    Tensor::new(img.shape().to_vec(), pass(&tmp, false))
}

/// Two global and two local views, each from its own crop and distortion draws.
pub fn make_views(image: &ImageSample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<ViewSet> {
    cfg.validate()?;
    let dims = (image.height(), image.width());
    let view = |scale: Range, size: usize, rng: &mut _| -> Result<(Tensor<f32>, CropRect)> {
        let rect = sample_crop_rect(rng, dims, scale, cfg.aspect_ratio)?;
        let resized = crop_resize(&image.pixels, &rect, size);
        Ok((apply_photometric(&resized, cfg, rng), rect))
    };
    let (g1, rg1) = view(cfg.global_scale, cfg.output_size_global, rng)?;
    let (g2, rg2) = view(cfg.global_scale, cfg.output_size_global, rng)?;
    let (l1, rl1) = view(cfg.local_scale, cfg.output_size_local, rng)?;
    let (l2, rl2) = view(cfg.local_scale, cfg.output_size_local, rng)?;
    Ok(ViewSet {
        global_views: [g1, g2],
        local_views: [l1, l2],
        rects: [rg1, rg2, rl1, rl2],
        source_id: image.source_id,
    })
}
