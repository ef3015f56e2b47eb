//! Sample grids and small bar charts as 8-bit RGB images.

use std::io::Write as _;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// Maps a model-space value in `[-1, 1]` to a byte via `(x + 1)/2` clamped to `[0, 1]`.
pub fn to_byte(x: f64) -> u8 {
    (((x + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles `samples[B, C, S, S]` (C = 1 or 3) row-major into a `rows×cols` grid.
/// Unused cells stay black.
pub fn sample_grid<T: Float>(samples: &Tensor<T>, rows: usize, cols: usize) -> Result<RgbImage> {
    let sh = samples.shape();
    if sh.len() != 4 || !(sh[1] == 1 || sh[1] == 3) || sh[2] != sh[3] {
        return Err(Error::shape("sample_grid", format!("expected [B, 1|3, S, S], got {sh:?}")));
    }
    let (b, c, s) = (sh[0], sh[1], sh[2]);
    if rows * cols < b {
        return Err(Error::Invalid(format!("a {rows}x{cols} grid cannot hold {b} samples")));
    }
    let mut img = RgbImage::new((cols * s) as u32, (rows * s) as u32);
    let d = samples.data();
    for n in 0..b {
        let (gy, gx) = (n / cols, n % cols);
        for y in 0..s {
            for x in 0..s {
                let px = |ch: usize| to_byte(d[((n * c + ch) * s + y) * s + x].f64());
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                img.put_pixel((gx * s + x) as u32, (gy * s + y) as u32, image::Rgb(rgb));
            }
        }
    }
    Ok(img)
}

/// Saves by extension: `.ppm` as binary P6, anything else through `image`'s
/// format detection.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    let map = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    if path.extension().is_some_and(|e| e == "ppm") {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        PnmEncoder::new(&mut w)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
            .map_err(map)?;
        w.flush().map_err(|e| Error::io(path, e))
    } else {
        img.save(path).map_err(map)
    }
}

/// Writes the grid to `path`; a `.ppm` path also gets a `.png` sibling.
pub fn write_sample_grid<T: Float>(samples: &Tensor<T>, path: &Path, rows: usize, cols: usize) -> Result<()> {
    let img = sample_grid(samples, rows, cols)?;
    write_image(&img, path)?;
    if path.extension().is_some_and(|e| e == "ppm") {
        write_image(&img, &path.with_extension("png"))?;
    }
    Ok(())
}

/// One horizontal strip of bars per entry of `rows`, each value in `[0, 1]`
/// scaled to the strip height.
pub fn render_bar_rows(rows: &[Vec<f64>], bar_width: usize, strip_height: usize) -> RgbImage {
    let bars = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let gap = 2;
    let w = bars * (bar_width + gap) + gap;
    let h = rows.len().max(1) * (strip_height + gap) + gap;
    let mut img = RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    for (r, vals) in rows.iter().enumerate() {
        let base = gap + r * (strip_height + gap) + strip_height;
        for (k, v) in vals.iter().enumerate() {
            let len = (v.clamp(0.0, 1.0) * strip_height as f64).round() as usize;
            let x0 = gap + k * (bar_width + gap);
            for y in base - len..base {
                for x in x0..x0 + bar_width {
                    img.put_pixel(x as u32, y as u32, image::Rgb([40, 70, 140]));
                }
            }
        }
    }
    img
}
