//! Labelled image sources. Every example is `[C, S, S]` with values in `[-1, 1]`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub trait Dataset: Send + Sync {
    fn channels(&self) -> usize;
    fn size(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Draws one `(image, class)` pair.
    fn sample(&self, rng: &mut dyn rand::RngCore) -> (Tensor<f32>, usize);
}

/// Stacks `b` draws into `[B, C, S, S]`.
pub fn sample_batch(ds: &dyn Dataset, b: usize, rng: &mut dyn rand::RngCore) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut images = Vec::with_capacity(b);
    let mut classes = Vec::with_capacity(b);
    for _ in 0..b {
        let (x, c) = ds.sample(rng);
        images.push(x.reshape(&[1, ds.channels(), ds.size(), ds.size()])?);
        classes.push(c);
    }
    Ok((Tensor::concat0(&images)?, classes))
}

/// One bright Gaussian blob per image on a dark background. Class `k` centres
/// the blob at angle `π/4 + 2πk/K` on a circle around the image centre, so two
/// classes sit in opposite diagonal corners.
#[derive(Clone, Debug)]
pub struct GaussianBlobs {
    pub size: usize,
    pub classes: usize,
    /// Uniform centre jitter as a fraction of the side.
    pub jitter: f64,
}

impl GaussianBlobs {
    pub fn new(size: usize, classes: usize, jitter: f64) -> Result<Self> {
        if size < 4 || classes == 0 {
            return Err(Error::Config(format!("blob dataset needs size >= 4 and classes >= 1, got {size}, {classes}")));
        }
        Ok(GaussianBlobs { size, classes, jitter })
    }

    /// Nominal blob centre `(row, col)` in pixel coordinates.
    pub fn centre(&self, class: usize) -> (f64, f64) {
        let s = self.size as f64;
        let mid = (s - 1.0) / 2.0;
        let a = PI / 4.0 + 2.0 * PI * class as f64 / self.classes as f64;
        let rad = 0.28 * s;
        (mid - rad * a.sin(), mid + rad * a.cos())
    }

    fn sigma(&self) -> f64 {
        self.size as f64 / 8.0
    }

    pub fn render(&self, centre: (f64, f64)) -> Tensor<f32> {
        let s = self.size;
        let two_var = 2.0 * self.sigma() * self.sigma();
        Tensor::from_fn(&[1, s, s], |i| {
            let (r, c) = ((i / s) as f64, (i % s) as f64);
            let d2 = (r - centre.0).powi(2) + (c - centre.1).powi(2);
            (2.0 * (-d2 / two_var).exp() - 1.0) as f32
        })
    }
}

impl Dataset for GaussianBlobs {
    fn channels(&self) -> usize {
        1
    }

    fn size(&self) -> usize {
        self.size
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> (Tensor<f32>, usize) {
        let class = rng.random_range(0..self.classes);
        let (r, c) = self.centre(class);
        let j = self.jitter * self.size as f64;
        let (dr, dc) = if j > 0.0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0.0, 0.0) };
        (self.render((r + dr, c + dc)), class)
    }
}

/// `±1` checkerboards whose frequency grows with the class index, at a random phase.
#[derive(Clone, Debug)]
pub struct Checker {
    pub size: usize,
    pub classes: usize,
}

impl Checker {
    pub fn new(size: usize, classes: usize) -> Result<Self> {
        if size < 2 || classes == 0 {
            return Err(Error::Config(format!("checker dataset needs size >= 2 and classes >= 1, got {size}, {classes}")));
        }
        Ok(Checker { size, classes })
    }

    /// Square side in pixels for `class`.
    pub fn cell(&self, class: usize) -> usize {
        (self.size >> (class + 1)).max(1)
    }
}

impl Dataset for Checker {
    fn channels(&self) -> usize {
        1
    }

    fn size(&self) -> usize {
        self.size
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> (Tensor<f32>, usize) {
        let class = rng.random_range(0..self.classes);
        let cell = self.cell(class);
        let (pr, pc) = (rng.random_range(0..2 * cell), rng.random_range(0..2 * cell));
        let s = self.size;
        let img = Tensor::from_fn(&[1, s, s], |i| {
            let (r, c) = (i / s + pr, i % s + pc);
            if (r / cell + c / cell) % 2 == 0 { 1.0 } else { -1.0 }
        });
        (img, class)
    }
}

/// RGB images loaded from disk. Sub-directories name classes (sorted); files
/// directly inside the root are class 0 when there are no sub-directories.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub size: usize,
    pub class_names: Vec<String>,
    pub items: Vec<(Tensor<f32>, usize)>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

impl ImageFolder {
    pub fn load(root: &Path, size: usize) -> Result<Self> {
        let entries = sorted_entries(root)?;
        let dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
        let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
        if dirs.is_empty() {
            groups.push(("0".into(), entries.iter().filter(|p| is_image(p)).cloned().collect()));
        } else {
            for d in dirs {
                let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string();
                groups.push((name, sorted_entries(d)?.into_iter().filter(|p| is_image(p)).collect()));
            }
        }
        let mut items = Vec::new();
        for (class, (_, files)) in groups.iter().enumerate() {
            for f in files {
                items.push((load_image(f, size)?, class));
            }
        }
        if items.is_empty() {
            return Err(Error::Config(format!("no PNG/PPM images under {}", root.display())));
        }
        Ok(ImageFolder { size, class_names: groups.into_iter().map(|g| g.0).collect(), items })
    }
}

impl Dataset for ImageFolder {
    fn channels(&self) -> usize {
        3
    }

    fn size(&self) -> usize {
        self.size
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> (Tensor<f32>, usize) {
        self.items[rng.random_range(0..self.items.len())].clone()
    }
}

/// Reads an RGB image, box-filters it to `size × size` and maps bytes to `[-1, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = vec![0f64; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            planes[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    let out = box_resize(&planes, 3, h, w, size, size);
    Tensor::new(&[3, size, size], out.into_iter().map(|v| v as f32).collect())
}

/// Overlap weights of each output cell over input cells along one axis.
fn box_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resize of `c` planes of `h × w`.
pub fn box_resize(src: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (wr, wc) = (box_weights(h, oh), box_weights(w, ow));
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for (r, rw) in wr.iter().enumerate() {
            for (q, cw) in wc.iter().enumerate() {
                let mut acc = 0.0;
                for &(i, a) in rw {
                    for &(j, b) in cw {
                        acc += a * b * src[(ch * h + i) * w + j];
                    }
                }
                out[(ch * oh + r) * ow + q] = acc;
            }
        }
    }
    out
}
