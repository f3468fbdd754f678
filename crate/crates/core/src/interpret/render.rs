use std::path::Path;

use image::{Rgb, RgbImage};

use super::{LatentMatrix, MModeImage, Pca2};
use crate::error::{Error, Result};
use crate::phantom::SegSequence;

/// Background, LV blood pool, LV myocardium, RV blood pool.
pub const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [220, 60, 50], [60, 170, 75], [65, 105, 225]];

/// Marker line drawn over M-mode and sequence images.
const LINE: [u8; 3] = [255, 255, 255];

fn color(class: u8) -> Rgb<u8> {
    Rgb(PALETTE[(class as usize).min(PALETTE.len() - 1)])
}

/// M-mode image: position along the line downwards, time to the right.
pub fn mmode_image(img: &MModeImage, scale: u32) -> RgbImage {
    let s = scale.max(1);
    let mut out = RgbImage::new(img.frames as u32 * s, img.length as u32 * s);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = color(img.get((y / s) as usize, (x / s) as usize));
    }
    out
}

pub fn mmode_png(img: &MModeImage, scale: u32, path: &Path) -> Result<()> {
    mmode_image(img, scale).save(path)?;
    Ok(())
}

/// Frames of one slice side by side, with an optional profile line drawn on
/// every frame.
pub fn sequence_image(seq: &SegSequence, slice: usize, line: Option<((usize, usize), (usize, usize))>) -> Result<RgbImage> {
    let (s, h, w) = seq.shape();
    if slice >= s {
        return Err(Error::invalid(format!("slice {slice} out of range (S = {s})")));
    }
    let t = seq.frames.len();
    let mut out = RgbImage::new((t * w) as u32, h as u32);
    let pts = line.map(|(a, b)| super::line_points(a, b)).unwrap_or_default();
    for (i, f) in seq.frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.put_pixel((i * w + x) as u32, y as u32, color(f.get(slice, y, x)));
            }
        }
        for &(x, y) in &pts {
            if x < w && y < h {
                out.put_pixel((i * w + x) as u32, y as u32, Rgb(LINE));
            }
        }
    }
    Ok(out)
}

pub fn sequence_png(seq: &SegSequence, slice: usize, line: Option<((usize, usize), (usize, usize))>, path: &Path) -> Result<()> {
    sequence_image(seq, slice, line)?.save(path)?;
    Ok(())
}

/// PCA scatter: primary class picks the colour, the first concept the
/// marker (filled square vs hollow square).
pub fn scatter_image(pca: &Pca2, lat: &LatentMatrix, size: u32) -> RgbImage {
    let size = size.max(32);
    let mut out = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let margin = 12.0;
    let span = |j: usize| {
        let lo = pca.coords.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
        let hi = pca.coords.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = span(0);
    let (y0, ys) = span(1);
    let inner = size as f64 - 2.0 * margin;
    for (i, c) in pca.coords.iter().enumerate() {
        let px = (margin + (c[0] - x0) / xs * inner).round() as i64;
        let py = (size as f64 - margin - (c[1] - y0) / ys * inner).round() as i64;
        let col = if lat.y[i] != 0 { Rgb([200, 40, 40]) } else { Rgb([40, 80, 200]) };
        let filled = lat.y_k[i].first().copied().unwrap_or(0) != 0;
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let edge = dx.abs() == 3 || dy.abs() == 3;
                if !(filled || edge) {
                    continue;
                }
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    out.put_pixel(x as u32, y as u32, col);
                }
            }
        }
    }
    out
}

pub fn scatter_png(pca: &Pca2, lat: &LatentMatrix, path: &Path) -> Result<()> {
    scatter_image(pca, lat, 480).save(path)?;
    Ok(())
}

/// `subject,pc1,pc2,y,y_k0,...`
pub fn write_coords_csv(pca: &Pca2, lat: &LatentMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = lat.y_k.first().map_or(0, Vec::len);
    let mut header = vec!["subject".to_string(), "pc1".into(), "pc2".into(), "y".into()];
    header.extend((0..k).map(|i| format!("y_k{i}")));
    w.write_record(&header)?;
    for (i, c) in pca.coords.iter().enumerate() {
        let mut rec = vec![lat.ids[i].to_string(), format!("{:.6}", c[0]), format!("{:.6}", c[1]), lat.y[i].to_string()];
        rec.extend(lat.y_k[i].iter().map(u8::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per traversal point, frames of `slice` left to right.
pub fn traversal_image(points: &[super::TraversalPoint], slice: usize) -> Result<RgbImage> {
    let first = points.first().ok_or_else(|| Error::invalid("no traversal points"))?;
    let (_, h, _) = first.sequence.shape();
    let rows = points
        .iter()
        .map(|p| sequence_image(&p.sequence, slice, None))
        .collect::<Result<Vec<_>>>()?;
    let mut out = RgbImage::new(rows[0].width(), (h * rows.len()) as u32);
    for (i, r) in rows.iter().enumerate() {
        image::imageops::replace(&mut out, r, 0, (i * h) as i64);
    }
    Ok(out)
}

pub fn traversal_png(points: &[super::TraversalPoint], slice: usize, path: &Path) -> Result<()> {
    traversal_image(points, slice)?.save(path)?;
    Ok(())
}
