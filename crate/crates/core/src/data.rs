//! Synthetic stand-ins for the two task datasets, seeded splitting and the
//! on-disk dataset cache.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::fsutil::{write_atomic, Reader};
use crate::graph::Task;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An input image and its regression or segmentation target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub input: Tensor<S>,
    /// Box `[x_min, y_min, x_max, y_max]` normalised to `[0, 1]`, or a
    /// binary mask `[1, H, W]`.
    pub target: Tensor<S>,
}

impl<S: Scalar> Sample<S> {
    pub fn cast<T: Scalar>(&self) -> Sample<T> {
        Sample { input: self.input.cast(), target: self.target.cast() }
    }
}

/// Box generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxParams {
    /// Square image side in pixels.
    pub size: usize,
    /// Range of the shape's box area as a fraction of the image.
    pub area: (f64, f64),
    /// Maximum background noise level.
    pub noise: f64,
}

impl Default for BoxParams {
    fn default() -> Self {
        Self { size: 64, area: (0.05, 0.4), noise: 0.3 }
    }
}

/// Mask generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams {
    pub size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { size: 32, noise: 0.12 }
    }
}

/// Default dataset sizes.
pub const BOX_SAMPLES: usize = 800;
pub const MASK_SAMPLES: usize = 5280;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One bright ellipse or rectangle over noise, with its tight bounding box.
pub fn gen_box_dataset<S: Scalar>(n: usize, seed: u64) -> Result<Vec<Sample<S>>> {
    gen_box_dataset_with(n, seed, &BoxParams::default())
}

pub fn gen_box_dataset_with<S: Scalar>(n: usize, seed: u64, p: &BoxParams) -> Result<Vec<Sample<S>>> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    if p.size < 8 || !(0.0 < p.area.0 && p.area.0 < p.area.1 && p.area.1 <= 1.0) || !(0.0..=1.0).contains(&p.noise) {
        return invalid(format!("bad box generator settings {p:?}"));
    }
    (0..n).map(|i| box_sample(&mut sample_rng(seed, i), p)).collect()
}

fn box_sample<S: Scalar>(rng: &mut ChaCha8Rng, p: &BoxParams) -> Result<Sample<S>> {
    let size = p.size as f64;
    let area = rng.gen_range(p.area.0..p.area.1);
    let aspect: f64 = rng.gen_range(0.5f64..2.0).min(1.0 / area).max(area);
    let w = (area * aspect).sqrt().min(1.0) * size;
    let h = (area / aspect).sqrt().min(1.0) * size;
    let x0 = rng.gen_range(0.0..=(size - w));
    let y0 = rng.gen_range(0.0..=(size - h));
    let ellipse = rng.gen_bool(0.5);
    let level = rng.gen_range(0.65..1.0);
    let (cx, cy, rx, ry) = (x0 + w / 2.0, y0 + h / 2.0, w / 2.0, h / 2.0);

    let mut img = vec![0.0f64; p.size * p.size];
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..p.size {
        for c in 0..p.size {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let inside = if ellipse {
                ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
            } else {
                px >= x0 && px <= x0 + w && py >= y0 && py <= y0 + h
            };
            let bg = rng.gen_range(0.0..=p.noise);
            img[r * p.size + c] = if inside {
                xmin = xmin.min(c);
                xmax = xmax.max(c);
                ymin = ymin.min(r);
                ymax = ymax.max(r);
                (level + 0.5 * bg - 0.25 * p.noise).clamp(0.0, 1.0)
            } else {
                bg
            };
        }
    }
    if xmin == usize::MAX {
        // shape smaller than a pixel centre grid; light its centre pixel
        let (c, r) = ((cx as usize).min(p.size - 1), (cy as usize).min(p.size - 1));
        img[r * p.size + c] = level;
        (xmin, xmax, ymin, ymax) = (c, c, r, r);
    }
    let bx = [xmin as f64 / size, ymin as f64 / size, (xmax + 1) as f64 / size, (ymax + 1) as f64 / size];
    Ok(Sample {
        input: Tensor::new(vec![1, p.size, p.size], img.into_iter().map(S::from_acc).collect())?,
        target: Tensor::new(vec![4], bx.iter().map(|&v| S::from_acc(v)).collect())?,
    })
}

/// Thresholded sum of one to three Gaussian bumps as the mask; the image is
/// the mask intensity over a smooth background texture plus noise.
pub fn gen_mask_dataset<S: Scalar>(n: usize, seed: u64) -> Result<Vec<Sample<S>>> {
    gen_mask_dataset_with(n, seed, &MaskParams::default())
}

pub fn gen_mask_dataset_with<S: Scalar>(n: usize, seed: u64, p: &MaskParams) -> Result<Vec<Sample<S>>> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    if p.size < 8 || !(p.noise >= 0.0) {
        return invalid(format!("bad mask generator settings {p:?}"));
    }
    (0..n).map(|i| mask_sample(&mut sample_rng(seed, i), p)).collect()
}

fn mask_sample<S: Scalar>(rng: &mut ChaCha8Rng, p: &MaskParams) -> Result<Sample<S>> {
    let n = p.size;
    let size = n as f64;
    let bumps = rng.gen_range(1..=3);
    let cx0 = rng.gen_range(0.3..0.7) * size;
    let cy0 = rng.gen_range(0.3..0.7) * size;
    let mut centres = vec![(cx0, cy0, rng.gen_range(0.08..0.16) * size)];
    for _ in 1..bumps {
        let s = rng.gen_range(0.06..0.12) * size;
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let d = rng.gen_range(0.5..1.2) * centres[0].2;
        centres.push((cx0 + d * ang.cos(), cy0 + d * ang.sin(), s));
    }
    let mut field = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            field[r * n + c] = centres.iter().map(|&(cx, cy, s)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()).sum();
        }
    }
    let mask: Vec<bool> = field.iter().map(|&f| f > 0.5).collect();
    let mask = largest_component(&mask, n, n);

    let level = rng.gen_range(0.55..0.8);
    let (fx, fy, phase) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), rng.gen_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, p.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut img = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let t = 0.2 + 0.1 * ((fx * c as f64 / size + fy * r as f64 / size) * std::f64::consts::TAU + phase).sin();
            let base = if mask[r * n + c] { level } else { t };
            img[r * n + c] = (base + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        input: Tensor::new(vec![1, n, n], img.into_iter().map(S::from_acc).collect())?,
        target: Tensor::new(vec![1, n, n], mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect())?,
    })
}

fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Number of 4-connected foreground components.
pub fn component_count(mask: &[bool], h: usize, w: usize) -> usize {
    components(mask, h, w).len()
}

fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    if let Some(best) = components(mask, h, w).into_iter().max_by_key(|c| c.len()) {
        best.into_iter().for_each(|i| out[i] = true);
    }
    out
}

/// Seeded shuffle into disjoint train and test parts.
pub fn split<T: Clone>(data: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return invalid(format!("train fraction must lie in (0, 1), got {train_fraction}"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * data.len() as f64).round() as usize;
    let n_train = if data.len() >= 2 { n_train.clamp(1, data.len() - 1) } else { n_train.min(data.len()) };
    let train = idx[..n_train].iter().map(|&i| data[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, test))
}

/// Default generator for a task at default settings.
pub fn gen_task_dataset<S: Scalar>(task: Task, n: usize, seed: u64, size: usize) -> Result<Vec<Sample<S>>> {
    match task {
        Task::Locnet => gen_box_dataset_with(n, seed, &BoxParams { size, ..BoxParams::default() }),
        Task::Cae => gen_mask_dataset_with(n, seed, &MaskParams { size, ..MaskParams::default() }),
    }
}

const DATA_MAGIC: &[u8; 4] = b"SFDS";
const DATA_VERSION: u32 = 1;

fn put_tensor_header(buf: &mut Vec<u8>, shape: &[usize]) {
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn get_shape(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("dataset: bad tensor rank {rank}")));
    }
    (0..rank).map(|_| r.u32().map(|d| d as usize)).collect()
}

/// Encodes samples as little-endian `f32`.
pub fn encode_dataset<S: Scalar>(samples: &[Sample<S>]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATA_MAGIC);
    buf.extend_from_slice(&DATA_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        put_tensor_header(&mut buf, s.input.shape());
        put_tensor_header(&mut buf, s.target.shape());
        for v in s.input.data().iter().chain(s.target.data()) {
            buf.extend_from_slice(&(v.to_acc() as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_dataset<S: Scalar>(bytes: &[u8]) -> Result<Vec<Sample<S>>> {
    let mut r = Reader::new(bytes, "dataset");
    if r.bytes(4)? != DATA_MAGIC {
        return Err(Error::Format("dataset: bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("dataset: unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let ishape = get_shape(&mut r)?;
        let tshape = get_shape(&mut r)?;
        let mut read = |shape: Vec<usize>| -> Result<Tensor<S>> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f32().map(|v| S::from_acc(v as f64))).collect::<Result<Vec<S>>>()?;
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("dataset: {e}")))
        };
        let input = read(ishape)?;
        let target = read(tshape)?;
        out.push(Sample { input, target });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_dataset<S: Scalar>(path: &Path, samples: &[Sample<S>]) -> Result<()> {
    write_atomic(path, &encode_dataset(samples))
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<Vec<Sample<S>>> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_samples_are_deterministic_and_valid() {
        let a = gen_box_dataset::<f32>(40, 7).unwrap();
        assert_eq!(a, gen_box_dataset::<f32>(40, 7).unwrap());
        assert_ne!(a, gen_box_dataset::<f32>(40, 8).unwrap());
        for s in &a {
            assert_eq!(s.input.shape(), &[1, 64, 64]);
            let b = s.target.data();
            assert!(b[0] < b[2] && b[1] < b[3]);
            assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn box_is_tight_around_bright_pixels() {
        let p = BoxParams { noise: 0.0, ..BoxParams::default() };
        for s in gen_box_dataset_with::<f64>(20, 3, &p).unwrap() {
            let b: Vec<usize> = s.target.data().iter().map(|v| (v * 64.0).round() as usize).collect();
            let img = s.input.data();
            let lit = |r: usize, c: usize| img[r * 64 + c] > 0.0;
            for r in 0..64 {
                for c in 0..64 {
                    let inside = c >= b[0] && c < b[2] && r >= b[1] && r < b[3];
                    if lit(r, c) {
                        assert!(inside);
                    }
                }
            }
            assert!((b[0]..b[2]).any(|c| lit(b[1], c)) && (b[0]..b[2]).any(|c| lit(b[3] - 1, c)));
            assert!((b[1]..b[3]).any(|r| lit(r, b[0])) && (b[1]..b[3]).any(|r| lit(r, b[2] - 1)));
        }
    }

    #[test]
    fn masks_are_single_nonempty_components() {
        let data = gen_mask_dataset::<f32>(100, 11).unwrap();
        assert_eq!(data, gen_mask_dataset::<f32>(100, 11).unwrap());
        for s in &data {
            let m: Vec<bool> = s.target.data().iter().map(|&v| v == 1.0).collect();
            assert!(s.target.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(m.iter().any(|&v| v));
            assert_eq!(component_count(&m, 32, 32), 1);
        }
    }

    #[test]
    fn split_counts_and_coverage() {
        let data: Vec<usize> = (0..800).collect();
        let (tr, te) = split(&data, 0.9, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (720, 80));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, data);
        assert_eq!(split(&data, 0.9, 5).unwrap(), (tr, te));
        assert!(split(&data, 1.0, 5).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let data = gen_mask_dataset::<f32>(3, 1).unwrap();
        let bytes = encode_dataset(&data);
        assert_eq!(&bytes[..4], b"SFDS");
        assert_eq!(decode_dataset::<f32>(&bytes).unwrap(), data);
        assert!(decode_dataset::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset::<f32>(&bad).is_err());
    }
}
