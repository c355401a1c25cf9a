//! Axial PNG overlays: CT slice in gray, prediction contour in red and
//! ground-truth contour in green.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

use mandible_seg::{Mask, Volume};

const WINDOW: (f64, f64) = (-200.0, 1800.0);
const PRED: Rgb<u8> = Rgb([230, 40, 40]);
const GT: Rgb<u8> = Rgb([40, 210, 60]);

/// Foreground pixels of slice `z` with a 4-neighbor outside the mask.
pub fn contour(m: &Mask, z: usize) -> Vec<(usize, usize)> {
    let [nx, ny, _] = m.dims();
    let mut out = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !m.get(x, y, z) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == nx || y + 1 == ny || {
                !m.get(x - 1, y, z) || !m.get(x + 1, y, z) || !m.get(x, y - 1, z) || !m.get(x, y + 1, z)
            };
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

pub fn render(v: &Volume, pred: &Mask, gt: Option<&Mask>, z: usize) -> Result<RgbImage> {
    let [nx, ny, nz] = v.dims();
    if pred.dims() != v.dims() || gt.is_some_and(|g| g.dims() != v.dims()) {
        bail!("overlay masks must match the volume dimensions");
    }
    if z >= nz {
        bail!("overlay slice z={z} outside 0..{nz}");
    }
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let t = ((v.get(x, y, z) - WINDOW.0) / (WINDOW.1 - WINDOW.0)).clamp(0.0, 1.0);
            let g = (t * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
        }
    }
    if let Some(g) = gt {
        for (x, y) in contour(g, z) {
            img.put_pixel(x as u32, y as u32, GT);
        }
    }
    for (x, y) in contour(pred, z) {
        img.put_pixel(x as u32, y as u32, PRED);
    }
    Ok(img)
}

pub fn write_overlay(v: &Volume, pred: &Mask, gt: Option<&Mask>, z: Option<usize>, path: &Path) -> Result<()> {
    let z = z.unwrap_or_else(|| (0..v.dims()[2]).max_by_key(|&z| (pred.slice_count(z), std::cmp::Reverse(z))).unwrap_or(0));
    render(v, pred, gt, z)?
        .save(path)
        .with_context(|| format!("writing overlay {}", path.display()))
}
