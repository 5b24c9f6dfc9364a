//! Training data: a seeded synthetic image generator and directory ingestion
//! with random crops.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use lic_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image_io::from_rgb8;
use crate::{Error, Result};

/// Produces `[batch, 3, patch, patch]` tensors in `[0, 1]`.
pub trait PatchSource {
    fn next_batch(&mut self, batch: usize, patch: usize) -> Result<Tensor>;
}

/// Piecewise-smooth image: a bilinear colour ramp, overlapping discs and
/// rectangles, an oriented sinusoid and mild noise. Returns `[1, 3, h, w]`.
pub fn synthetic_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let corner: [[f64; 3]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)));
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        let v = y as f64 / (h.max(2) - 1) as f64;
        for x in 0..w {
            let u = x as f64 / (w.max(2) - 1) as f64;
            for c in 0..3 {
                let top = corner[0][c] * (1.0 - u) + corner[1][c] * u;
                let bot = corner[2][c] * (1.0 - u) + corner[3][c] * u;
                img[c * h * w + y * w + x] = top * (1.0 - v) + bot * v;
            }
        }
    }
    let shapes = rng.random_range(3..9);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.05..0.35) * h as f64;
        let rx = rng.random_range(0.05..0.35) * w as f64;
        let disc = rng.random_bool(0.5);
        let alpha = rng.random_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (c, &col) in colour.iter().enumerate() {
                        let p = &mut img[c * h * w + y * w + x];
                        *p = (1.0 - alpha) * *p + alpha * col;
                    }
                }
            }
        }
    }
    let freq = rng.random_range(0.05..0.6);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let amp = rng.random_range(0.0..0.12);
    let (s, c) = angle.sin_cos();
    let noise = Normal::new(0.0, rng.random_range(0.0..0.02)).expect("finite std");
    for y in 0..h {
        for x in 0..w {
            let t = amp * (freq * (c * x as f64 + s * y as f64)).sin();
            for ch in 0..3 {
                let p = &mut img[ch * h * w + y * w + x];
                *p = (*p + t + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    // 8-bit values, like decoded files
    for p in &mut img {
        *p = (*p * 255.0).round() / 255.0;
    }
    Tensor::from_vec(&[1, 3, h, w], img)
}

/// Endless stream of fresh synthetic patches.
pub struct SyntheticPatches {
    rng: ChaCha8Rng,
}

impl SyntheticPatches {
    pub fn new(seed: u64) -> Self {
        SyntheticPatches { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl PatchSource for SyntheticPatches {
    fn next_batch(&mut self, batch: usize, patch: usize) -> Result<Tensor> {
        let imgs: Vec<Tensor> = (0..batch).map(|_| synthetic_image(&mut self.rng, patch, patch)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        Ok(Tensor::cat(&refs, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct IngestFilters {
    /// Files whose size in bits per pixel is below this are excluded.
    pub min_bpp: f64,
    /// Re-downsample JPEG sources by a random factor in `jpeg_scale`.
    pub jpeg_downscale: bool,
    pub jpeg_scale: (f64, f64),
    pub seed: u64,
}

impl Default for IngestFilters {
    fn default() -> Self {
        IngestFilters { min_bpp: 3.0, jpeg_downscale: true, jpeg_scale: (0.5, 1.0), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Exclusion {
    LowBpp(f64),
    TooSmall(u32, u32),
    Unreadable(String),
}

/// Decoded training images, in sorted file-name order.
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub sources: Vec<PathBuf>,
    pub excluded: Vec<(PathBuf, Exclusion)>,
}

fn is_jpeg(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"))
}

/// Loads every readable image of `dir` whose shorter side is at least
/// `min_size`.
pub fn ingest_dataset(dir: &Path, min_size: usize, filters: &IngestFilters) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(filters.seed);
    let mut ds = Dataset { images: Vec::new(), sources: Vec::new(), excluded: Vec::new() };
    for path in paths {
        let size = fs::metadata(&path)?.len();
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping unreadable file {}: {e}", path.display());
                ds.excluded.push((path, Exclusion::Unreadable(e.to_string())));
                continue;
            }
        };
        let (w, h) = img.dimensions();
        let bpp = size as f64 * 8.0 / (w as f64 * h as f64);
        if bpp < filters.min_bpp {
            log::info!("excluding {} ({bpp:.2} bpp)", path.display());
            ds.excluded.push((path, Exclusion::LowBpp(bpp)));
            continue;
        }
        let mut img = img;
        if filters.jpeg_downscale && is_jpeg(&path) {
            let (lo, hi) = filters.jpeg_scale;
            let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let nw = ((w as f64 * f).round() as u32).max(1);
            let nh = ((h as f64 * f).round() as u32).max(1);
            if nw.min(nh) as usize >= min_size {
                img = image::imageops::resize(&img, nw, nh, FilterType::Lanczos3);
            }
        }
        let (w, h) = img.dimensions();
        if (w.min(h) as usize) < min_size {
            ds.excluded.push((path, Exclusion::TooSmall(w, h)));
            continue;
        }
        ds.images.push(from_rgb8(&img));
        ds.sources.push(path);
    }
    Ok(ds)
}

impl Dataset {
    pub fn patches(&self, seed: u64) -> DatasetPatches<'_> {
        DatasetPatches { ds: self, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Random crops of random dataset images.
pub struct DatasetPatches<'a> {
    ds: &'a Dataset,
    rng: ChaCha8Rng,
}

impl PatchSource for DatasetPatches<'_> {
    fn next_batch(&mut self, batch: usize, patch: usize) -> Result<Tensor> {
        if self.ds.images.is_empty() {
            return Err(Error::Usage("dataset has no usable images".into()));
        }
        let mut data = Vec::with_capacity(batch * 3 * patch * patch);
        for _ in 0..batch {
            let img = &self.ds.images[self.rng.random_range(0..self.ds.images.len())];
            let (_, _, h, w) = img.dims4()?;
            if h < patch || w < patch {
                return Err(Error::Shape(format!("image {h}x{w} smaller than patch {patch}")));
            }
            let oy = self.rng.random_range(0..=h - patch);
            let ox = self.rng.random_range(0..=w - patch);
            for c in 0..3 {
                for y in 0..patch {
                    let row = c * h * w + (oy + y) * w + ox;
                    data.extend_from_slice(&img.data()[row..row + patch]);
                }
            }
        }
        Ok(Tensor::from_vec(&[batch, 3, patch, patch], data))
    }
}
