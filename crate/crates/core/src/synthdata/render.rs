use std::f64::consts::PI;

use rayon::prelude::*;

use super::{Annotation, Registry, Scene, SceneConfig, Shape, SynthClass, Texture};
use crate::detector::{iou, BBox};
use crate::error::{Error, Result};
use crate::rng::{mix, XorShift64Star};
use crate::tensor::Tensor;

const TEXTURE_SHADE: f64 = 0.15;

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 0.95 * 0.95,
        Shape::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
        Shape::Triangle => v <= 0.7 && u.abs() <= 0.9 * (v + 0.9) / 1.6,
        Shape::Cross => (u.abs() <= 0.28 && v.abs() <= 0.9) || (v.abs() <= 0.28 && u.abs() <= 0.9),
        Shape::Ring => {
            let r = (u * u + v * v).sqrt();
            (0.5..=0.95).contains(&r)
        }
        Shape::Star => {
            let r = (u * u + v * v).sqrt();
            let t = v.atan2(u);
            let lobe = (0.5 * (1.0 + (5.0 * t).cos())).powi(2);
            r <= 0.4 + 0.55 * lobe
        }
        Shape::Bar => u.abs() <= 0.95 && v.abs() <= 0.38,
    }
}

fn shade(texture: Texture, u: f64, v: f64) -> f64 {
    match texture {
        Texture::Solid => 1.0,
        Texture::Stripes => {
            if ((u + 2.0) * 3.0).floor() as i64 % 2 == 0 {
                1.0
            } else {
                TEXTURE_SHADE
            }
        }
        Texture::Dots => {
            let du = u / 0.5 - (u / 0.5).round();
            let dv = v / 0.5 - (v / 0.5).round();
            if du * du + dv * dv < 0.3 * 0.3 {
                TEXTURE_SHADE
            } else {
                1.0
            }
        }
    }
}

struct Placed {
    pixels: Vec<(usize, usize, f64)>,
    bbox: BBox,
}

fn rasterize(
    class: &SynthClass,
    cx: f64,
    cy: f64,
    half: f64,
    angle: f64,
    size: usize,
) -> Option<Placed> {
    let (sin, cos) = angle.sin_cos();
    let reach = half * std::f64::consts::SQRT_2;
    let lo = |c: f64| (c - reach).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + reach).ceil() as usize).min(size);
    let mut pixels = Vec::new();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in lo(cy)..hi(cy) {
        for x in lo(cx)..hi(cx) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / half;
            let v = (-dx * sin + dy * cos) / half;
            if inside(class.shape, u, v) {
                pixels.push((x, y, shade(class.texture, u, v)));
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if pixels.is_empty() {
        return None;
    }
    let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).ok()?;
    Some(Placed { pixels, bbox })
}

fn overlaps(b: &BBox, placed: &[Annotation]) -> bool {
    placed.iter().any(|a| {
        let inter = b.intersection(&a.bbox);
        iou(b, &a.bbox) >= 0.3 || inter >= 0.5 * b.area().min(a.bbox.area())
    })
}

/// Renders scene `image_id`. Pure in `(registry, image_id, cfg)`.
///
/// Objects whose placement keeps failing are dropped, so a scene may hold
/// fewer objects than drawn, but never none.
pub fn render_scene(registry: &Registry, image_id: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let pool: Vec<&SynthClass> = registry
        .classes
        .iter()
        .filter(|c| !cfg.seen_only || registry.split.is_seen(c.class_id))
        .collect();
    if pool.is_empty() {
        return Err(Error::config("no classes available to render"));
    }
    let s = cfg.image_size;
    let mut rng = XorShift64Star::new(mix(cfg.seed, image_id));
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let min_area = (cfg.min_size * cfg.min_size) as f64;
    let mut canvas = vec![cfg.background; 3 * s * s];
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);

    for _ in 0..count {
        let class = pool[rng.below(pool.len())];
        for _ in 0..cfg.max_place_tries {
            let extent = rng.uniform(cfg.min_size as f64, cfg.max_size as f64 + 1.0);
            let half = extent / 2.0;
            let cx = rng.uniform(half, s as f64 - half);
            let cy = rng.uniform(half, s as f64 - half);
            let angle = rng.uniform(-1.0, 1.0) * cfg.max_rotation * PI / 180.0;
            let Some(p) = rasterize(class, cx, cy, half, angle, s) else {
                continue;
            };
            if p.bbox.area() < min_area || overlaps(&p.bbox, &annotations) {
                continue;
            }
            let rgb = class.fill_rgb();
            for &(x, y, f) in &p.pixels {
                for (ch, c) in rgb.iter().enumerate() {
                    canvas[(ch * s + y) * s + x] = c * f;
                }
            }
            annotations.push(Annotation {
                bbox: p.bbox,
                class_id: class.class_id,
            });
            break;
        }
    }
    if annotations.is_empty() {
        // Centered fallback that always fits and passes the size check.
        let class = pool[rng.below(pool.len())];
        let half = cfg.max_size as f64 / 2.0;
        let c = s as f64 / 2.0;
        let p = rasterize(class, c, c, half, 0.0, s)
            .ok_or_else(|| Error::config("fallback object is empty"))?;
        let rgb = class.fill_rgb();
        for &(x, y, f) in &p.pixels {
            for (ch, cc) in rgb.iter().enumerate() {
                canvas[(ch * s + y) * s + x] = cc * f;
            }
        }
        annotations.push(Annotation {
            bbox: p.bbox,
            class_id: class.class_id,
        });
    }
    for v in canvas.iter_mut() {
        *v = (*v + rng.uniform(-cfg.noise, cfg.noise)).clamp(0.0, 1.0);
    }
    Ok(Scene {
        image_id,
        image: Tensor::new(vec![3, s, s], canvas)?,
        annotations,
    })
}

/// Renders a range of scenes in parallel; output is in id order.
pub fn render_scenes(
    registry: &Registry,
    ids: std::ops::Range<u64>,
    cfg: &SceneConfig,
) -> Result<Vec<Scene>> {
    ids.into_par_iter()
        .map(|id| render_scene(registry, id, cfg))
        .collect()
}

/// Bilinear resize of the `bbox` region of a `C×H×W` image to `C×size×size`,
/// sampling at pixel centers.
pub fn crop_resize(image: &Tensor, bbox: &BBox, size: usize) -> Result<Tensor> {
    let sh = image.shape();
    if sh.len() != 3 || size == 0 {
        return Err(Error::dim(format!(
            "crop_resize: expected C×H×W image, got {sh:?}"
        )));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let d = image.data();
    let sample = |ch: usize, y: f64, x: f64| {
        let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    let sx = bbox.width() / size as f64;
    let sy = bbox.height() / size as f64;
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in 0..size {
            for j in 0..size {
                out.push(sample(
                    ch,
                    bbox.y1 + (i as f64 + 0.5) * sy,
                    bbox.x1 + (j as f64 + 0.5) * sx,
                ));
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}
