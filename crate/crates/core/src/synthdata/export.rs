use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) of a `3×H×W` image with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("write_ppm: expected 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            buf.push(to_byte(d[c * h * w + i]));
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Grayscale map as a P6 PPM, scaled so the maximum maps to white.
pub fn write_ppm_gray(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!(
            "write_ppm_gray: expected H×W, got {s:?}"
        )));
    }
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let plane: Vec<f64> = map.data().iter().map(|v| v * scale).collect();
    let rgb = [plane.clone(), plane.clone(), plane].concat();
    write_ppm(path, &Tensor::new(vec![3, s[0], s[1]], rgb)?)
}

/// `imageId classId x1 y1 x2 y2`, one line per annotation.
pub fn annotation_lines(scene: &Scene) -> Vec<String> {
    scene
        .annotations
        .iter()
        .map(|a| {
            format!(
                "{} {} {} {} {} {}",
                scene.image_id, a.class_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2
            )
        })
        .collect()
}

pub fn write_annotations(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in scenes {
        for line in annotation_lines(s) {
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}
