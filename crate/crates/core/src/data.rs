//! Datasets: seeded synthetic generators for desk-scale experiments and a
//! PPM/PGM image-directory loader. Every dataset is normalized to [0,1]
//! per channel, matching the sigmoid output range of the generators.

use crate::error::{Error, Result};
use crate::ppm;
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Sub-stream tag for dataset synthesis, distinct from training streams.
const STREAM_DATA: u64 = 100;
const STREAM_SPLIT: u64 = 101;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub sample_shape: Vec<usize>,
    data: Vec<f64>,
    n: usize,
}

impl Dataset {
    pub fn new(name: &str, sample_shape: Vec<usize>, data: Vec<f64>) -> Result<Dataset> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || !data.len().is_multiple_of(per) {
            return Err(Error::Dataset(format!(
                "data length {} does not tile sample shape {:?}",
                data.len(),
                sample_shape
            )));
        }
        let n = data.len() / per;
        Ok(Dataset {
            name: name.to_string(),
            sample_shape,
            data,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample_numel(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_numel();
        &self.data[i * per..(i + 1) * per]
    }

    /// Assembles a batch `[len(indices), ...sample_shape]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty index set".into()));
        }
        let per = self.sample_numel();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Dataset(format!(
                    "index {i} out of range for dataset of {} samples",
                    self.n
                )));
            }
            out.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::from_vec(shape, out)
    }
}

/// Disjoint train/test index sets drawn with a fixed seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub fn split(n: usize, test_size: usize, seed: u64) -> Result<DatasetSplit> {
    if test_size >= n {
        return Err(Error::Dataset(format!(
            "test size {test_size} must be smaller than dataset size {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = DetRng::new(seed).substream(STREAM_SPLIT);
    rng.shuffle(&mut indices);
    let test = indices[..test_size].to_vec();
    let train = indices[test_size..].to_vec();
    Ok(DatasetSplit { train, test, seed })
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Number of synthetic samples to generate.
    pub size: usize,
    pub seed: u64,
    /// Target square size for image-directory loading.
    pub image_size: Option<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            size: 2048,
            seed: 1,
            image_size: None,
        }
    }
}

/// Loads a builtin dataset by name or a directory of PPM/PGM images.
pub fn load_dataset(source: &str, opts: &DatasetOptions) -> Result<Dataset> {
    match source {
        "gauss2d-mixture" => Ok(gauss2d_mixture(opts.size, opts.seed)),
        "rings" => Ok(rings(opts.size, opts.seed)),
        "synthetic-shapes-8x8" => Ok(synthetic_shapes(8, opts.size, opts.seed)),
        path => {
            let meta = std::fs::metadata(path)
                .map_err(|e| Error::Dataset(format!("unknown builtin or unreadable path '{path}': {e}")))?;
            if !meta.is_dir() {
                return Err(Error::Dataset(format!(
                    "'{path}' is not a builtin dataset name or a directory"
                )));
            }
            image_dir(path, opts)
        }
    }
}

/// Truncated standard normal: redrawn beyond six standard deviations, so
/// every sample stays within 6 sigma of its mode center by construction.
fn truncated_normal(rng: &mut DetRng) -> f64 {
    loop {
        let v = rng.normal();
        if v.abs() <= 6.0 {
            return v;
        }
    }
}

const GAUSS_MODES: usize = 8;
const GAUSS_RADIUS: f64 = 2.0;
const GAUSS_SIGMA: f64 = 0.05;

/// Eight Gaussian modes on a circle of radius 2, normalized into [0,1]^2.
pub fn gauss2d_mixture(size: usize, seed: u64) -> Dataset {
    let mut rng = DetRng::new(seed).substream(STREAM_DATA);
    let extent = GAUSS_RADIUS + 6.0 * GAUSS_SIGMA;
    let mut data = Vec::with_capacity(size * 2);
    for _ in 0..size {
        let mode = rng.below(GAUSS_MODES);
        let angle = 2.0 * std::f64::consts::PI * mode as f64 / GAUSS_MODES as f64;
        let x = GAUSS_RADIUS * angle.cos() + GAUSS_SIGMA * truncated_normal(&mut rng);
        let y = GAUSS_RADIUS * angle.sin() + GAUSS_SIGMA * truncated_normal(&mut rng);
        data.push((x + extent) / (2.0 * extent));
        data.push((y + extent) / (2.0 * extent));
    }
    Dataset::new("gauss2d-mixture", vec![2], data).unwrap()
}

/// Mode centers of the mixture in normalized coordinates, for tests.
pub fn gauss2d_mode_centers() -> Vec<(f64, f64)> {
    let extent = GAUSS_RADIUS + 6.0 * GAUSS_SIGMA;
    (0..GAUSS_MODES)
        .map(|m| {
            let angle = 2.0 * std::f64::consts::PI * m as f64 / GAUSS_MODES as f64;
            (
                (GAUSS_RADIUS * angle.cos() + extent) / (2.0 * extent),
                (GAUSS_RADIUS * angle.sin() + extent) / (2.0 * extent),
            )
        })
        .collect()
}

/// Normalized-coordinate distance that corresponds to 6 sigma in the
/// mixture's data space.
pub fn gauss2d_six_sigma() -> f64 {
    let extent = GAUSS_RADIUS + 6.0 * GAUSS_SIGMA;
    6.0 * GAUSS_SIGMA / (2.0 * extent)
}

/// Two concentric noisy rings, normalized into [0,1]^2.
pub fn rings(size: usize, seed: u64) -> Dataset {
    let mut rng = DetRng::new(seed).substream(STREAM_DATA);
    let radii = [0.8, 1.8];
    let sigma = 0.04;
    let extent = radii[1] + 6.0 * sigma;
    let mut data = Vec::with_capacity(size * 2);
    for _ in 0..size {
        let r = radii[rng.below(radii.len())] + sigma * truncated_normal(&mut rng);
        let angle = 2.0 * std::f64::consts::PI * rng.uniform();
        let x = r * angle.cos();
        let y = r * angle.sin();
        data.push((x + extent) / (2.0 * extent));
        data.push((y + extent) / (2.0 * extent));
    }
    Dataset::new("rings", vec![2], data).unwrap()
}

/// Small RGB images of simple shapes (filled squares, outlines, crosses,
/// discs) at random positions, sizes and colors.
pub fn synthetic_shapes(side: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = DetRng::new(seed).substream(STREAM_DATA);
    let per = 3 * side * side;
    let mut data = Vec::with_capacity(size * per);
    for _ in 0..size {
        let mut img = vec![0.05; per];
        let color = [
            rng.uniform_in(0.25, 1.0),
            rng.uniform_in(0.25, 1.0),
            rng.uniform_in(0.25, 1.0),
        ];
        let kind = rng.below(4);
        let extent = 2 + rng.below(side / 2);
        let cx = rng.below(side - extent + 1);
        let cy = rng.below(side - extent + 1);
        let put = |x: usize, y: usize, img: &mut Vec<f64>| {
            for (c, col) in color.iter().enumerate() {
                img[c * side * side + y * side + x] = *col;
            }
        };
        for dy in 0..extent {
            for dx in 0..extent {
                let (x, y) = (cx + dx, cy + dy);
                let on = match kind {
                    0 => true, // filled square
                    1 => dy == 0 || dx == 0 || dy == extent - 1 || dx == extent - 1,
                    2 => dx == extent / 2 || dy == extent / 2, // cross
                    _ => {
                        // disc
                        let fx = dx as f64 - (extent - 1) as f64 / 2.0;
                        let fy = dy as f64 - (extent - 1) as f64 / 2.0;
                        (fx * fx + fy * fy).sqrt() <= extent as f64 / 2.0
                    }
                };
                if on {
                    put(x, y, &mut img);
                }
            }
        }
        data.extend_from_slice(&img);
    }
    Dataset::new("synthetic-shapes-8x8", vec![3, side, side], data).unwrap()
}

/// Center-crops to the smaller side, then box-resamples to `target` by
/// area averaging (exact fractional overlaps).
pub fn crop_resize(img: &Tensor, target: usize) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let ratio = side as f64 / target as f64;
    let mut out = vec![0.0; c * target * target];
    for ch in 0..c {
        for ty in 0..target {
            for tx in 0..target {
                // source window [ty*r, (ty+1)*r) x [tx*r, (tx+1)*r)
                let sy0 = ty as f64 * ratio;
                let sy1 = (ty + 1) as f64 * ratio;
                let sx0 = tx as f64 * ratio;
                let sx1 = (tx + 1) as f64 * ratio;
                let mut acc = 0.0;
                let mut area = 0.0;
                let mut sy = sy0.floor() as usize;
                while (sy as f64) < sy1 && sy < side {
                    let hy = (sy1.min((sy + 1) as f64) - sy0.max(sy as f64)).max(0.0);
                    let mut sx = sx0.floor() as usize;
                    while (sx as f64) < sx1 && sx < side {
                        let wx = (sx1.min((sx + 1) as f64) - sx0.max(sx as f64)).max(0.0);
                        acc += img.at4_3(ch, y0 + sy, x0 + sx, h, w) * hy * wx;
                        area += hy * wx;
                        sx += 1;
                    }
                    sy += 1;
                }
                out[ch * target * target + ty * target + tx] = acc / area;
            }
        }
    }
    Tensor::from_vec(vec![c, target, target], out)
}

trait At3 {
    fn at4_3(&self, c: usize, y: usize, x: usize, h: usize, w: usize) -> f64;
}

impl At3 for Tensor {
    fn at4_3(&self, c: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
        self.data()[c * h * w + y * w + x]
    }
}

/// Loads every `.ppm`/`.pgm` file in a directory (sorted by name),
/// center-crops and resizes to `opts.image_size`. Grayscale images are
/// replicated to three channels. Unreadable files are reported together.
pub fn image_dir(path: &str, opts: &DatasetOptions) -> Result<Dataset> {
    let target = opts.image_size.ok_or_else(|| {
        Error::Dataset("image-dir datasets need a target image size".into())
    })?;
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::Dataset(format!("cannot read directory '{path}': {e}")))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no .ppm or .pgm files in '{path}'"
        )));
    }
    let mut data = Vec::new();
    let mut offenders = Vec::new();
    for f in &files {
        match ppm::read_image(f) {
            Ok(img) => {
                let rgb = if img.shape()[0] == 1 {
                    let hw = img.shape()[1] * img.shape()[2];
                    let mut d = Vec::with_capacity(3 * hw);
                    for _ in 0..3 {
                        d.extend_from_slice(&img.data()[..hw]);
                    }
                    Tensor::from_vec(vec![3, img.shape()[1], img.shape()[2]], d)?
                } else {
                    img
                };
                let resized = crop_resize(&rgb, target)?;
                data.extend_from_slice(resized.data());
            }
            Err(e) => offenders.push(format!("{}: {e}", f.display())),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Dataset(format!(
            "unreadable image files: {}",
            offenders.join("; ")
        )));
    }
    Dataset::new("image-dir", vec![3, target, target], data)
}
