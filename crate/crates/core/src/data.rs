//! Procedural shape dataset and graded corruptions.
//!
//! Images are `[3, S, S]` in `[0, 1]`: one filled shape (disk, square,
//! triangle or ring) with random position, size, rotation and colours over a
//! flat background. All four classes are closed under horizontal flip, so
//! labels are flip-invariant.
//!
//! Corruptions are applied after rendering and before any augmentation. Each
//! sample's corruption noise comes from its own stream derived from the
//! corruption seed and the sample id, so corrupted pixels do not depend on
//! batching or iteration order.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; CLASSES] = ["disk", "square", "triangle", "ring"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapeSample {
    pub id: usize,
    /// `[3, S, S]`
    pub image: Tensor,
    pub label: usize,
}

/// Rendering ranges for the nuisance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Shape radius as a fraction of the image size.
    pub radius: (f64, f64),
    /// Per-channel colour range for both foreground and background.
    pub color: (f64, f64),
    /// Minimum gap between foreground and background mean intensity.
    pub min_contrast: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            radius: (0.22, 0.36),
            color: (0.05, 0.95),
            min_contrast: 0.25,
        }
    }
}

fn inside(class: usize, u: f64, v: f64, r: f64) -> bool {
    match class {
        0 => u * u + v * v <= r * r,
        1 => u.abs().max(v.abs()) <= 0.8 * r,
        2 => (0..3).all(|k| {
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            u * a.cos() + v * a.sin() <= 0.5 * r
        }),
        _ => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= (0.55 * r).powi(2)
        }
    }
}

fn draw_colors(rng: &mut Rng, cfg: &RenderConfig) -> ([f64; 3], [f64; 3]) {
    loop {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for c in 0..3 {
            a[c] = rng.uniform_f64(cfg.color.0, cfg.color.1);
            b[c] = rng.uniform_f64(cfg.color.0, cfg.color.1);
        }
        let ma = a.iter().sum::<f64>() / 3.0;
        let mb = b.iter().sum::<f64>() / 3.0;
        if (ma - mb).abs() >= cfg.min_contrast {
            return (a, b);
        }
    }
}

/// Renders one sample of `class` with nuisance parameters drawn from `rng`.
pub fn render(rng: &mut Rng, class: usize, cfg: &RenderConfig) -> Result<Tensor> {
    if class >= CLASSES {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: CLASSES,
        });
    }
    let s = cfg.image_size as f64;
    let r = s * rng.uniform_f64(cfg.radius.0, cfg.radius.1);
    let cx = rng.uniform_f64(r + 1.0, s - r - 1.0);
    let cy = rng.uniform_f64(r + 1.0, s - r - 1.0);
    let theta = rng.uniform_f64(0.0, 2.0 * std::f64::consts::PI);
    let (fg, bg) = draw_colors(rng, cfg);
    let (st, ct) = theta.sin_cos();
    let n = cfg.image_size;
    let mut img = Tensor::zeros(&[3, n, n])?;
    let d = img.data_mut();
    for y in 0..n {
        for x in 0..n {
            // 2x2 supersampling
            let mut cover = 0.0;
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    let (px, py) = (x as f64 + sx - cx, y as f64 + sy - cy);
                    let (u, v) = (ct * px + st * py, -st * px + ct * py);
                    if inside(class, u, v, r) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                d[(c * n + y) * n + x] = (cover * fg[c] + (1.0 - cover) * bg[c]) as f32;
            }
        }
    }
    Ok(img)
}

/// `n` samples, labels cycling through the classes (balanced within one),
/// in shuffled order. Fully determined by the generator state.
pub fn gen_dataset(rng: &mut Rng, n: usize, cfg: &RenderConfig) -> Result<Vec<ShapeSample>> {
    if n == 0 {
        return Err(invalid("gen_dataset", "n must be >= 1"));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            Ok(ShapeSample {
                id,
                image: render(rng, label, cfg)?,
                label,
            })
        })
        .collect()
}

/// Horizontal flip (reverses the width axis).
pub fn hflip(x: &Tensor) -> Tensor {
    x.flip_last_axis()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise
        )
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
const BLUR_SIGMA: [f64; 5] = [0.4, 0.6, 0.8, 1.1, 1.5];
const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.10, 0.15, 0.22, 0.30];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
/// Pixelation blocks as (rows, cols). Successive severities refine into
/// nested partitions, so distortion grows strictly with severity.
const PIXELATE_BLOCK: [(usize, usize); 5] = [(2, 2), (2, 4), (4, 4), (4, 8), (8, 8)];

/// A concrete distortion with its magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    GaussianNoise { sigma: f64 },
    ImpulseNoise { fraction: f64 },
    GaussianBlur { sigma: f64 },
    Brightness { shift: f64 },
    Contrast { factor: f64 },
    Pixelate { rows: usize, cols: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(invalid(
                "corruption",
                format!("severity {severity} outside 1..=5"),
            ));
        }
        Ok(Self { kind, severity })
    }

    pub fn distortion(&self) -> Distortion {
        let i = self.severity as usize - 1;
        match self.kind {
            CorruptionKind::GaussianNoise => Distortion::GaussianNoise {
                sigma: NOISE_SIGMA[i],
            },
            CorruptionKind::ImpulseNoise => Distortion::ImpulseNoise {
                fraction: IMPULSE_FRACTION[i],
            },
            CorruptionKind::GaussianBlur => Distortion::GaussianBlur {
                sigma: BLUR_SIGMA[i],
            },
            CorruptionKind::Brightness => Distortion::Brightness {
                shift: BRIGHTNESS_SHIFT[i],
            },
            CorruptionKind::Contrast => Distortion::Contrast {
                factor: CONTRAST_FACTOR[i],
            },
            CorruptionKind::Pixelate => {
                let (rows, cols) = PIXELATE_BLOCK[i];
                Distortion::Pixelate { rows, cols }
            }
        }
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    match s.len() {
        3 => Ok((s[0], s[1], s[2])),
        4 => Ok((s[0] * s[1], s[2], s[3])),
        _ => Err(invalid(
            "corrupt",
            format!("expected [C,H,W] or [N,C,H,W], got {s:?}"),
        )),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

fn blur_plane(p: &mut [f32], h: usize, w: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * p[y * w + xx] as f64
                })
                .sum();
            tmp[y * w + x] = s as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x] as f64
                })
                .sum();
            p[y * w + x] = s as f32;
        }
    }
}

fn pixelate_plane(p: &mut [f32], h: usize, w: usize, rows: usize, cols: usize) {
    for by in (0..h).step_by(rows) {
        for bx in (0..w).step_by(cols) {
            let (ey, ex) = ((by + rows).min(h), (bx + cols).min(w));
            let mut s = 0f64;
            for y in by..ey {
                for x in bx..ex {
                    s += p[y * w + x] as f64;
                }
            }
            let m = (s / ((ey - by) * (ex - bx)) as f64) as f32;
            for y in by..ey {
                for x in bx..ex {
                    p[y * w + x] = m;
                }
            }
        }
    }
}

/// Applies a distortion to an image or image batch; output is clamped to
/// `[0, 1]`.
pub fn apply_distortion(x: &Tensor, d: Distortion, rng: &mut Rng) -> Result<Tensor> {
    let (planes, h, w) = image_dims(x)?;
    let mut out = x.clone();
    let data = out.data_mut();
    match d {
        Distortion::GaussianNoise { sigma } => {
            if sigma < 0.0 {
                return Err(invalid("gaussian_noise", "sigma must be >= 0"));
            }
            if sigma > 0.0 {
                for v in data.iter_mut() {
                    *v += (sigma * rng.standard_normal()) as f32;
                }
            }
        }
        Distortion::ImpulseNoise { fraction } => {
            for v in data.iter_mut() {
                if rng.unit() < fraction {
                    *v = if rng.unit() < 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        Distortion::GaussianBlur { sigma } => {
            if sigma > 0.0 {
                let k = gaussian_kernel(sigma);
                for p in data.chunks_exact_mut(h * w) {
                    blur_plane(p, h, w, &k);
                }
            }
        }
        Distortion::Brightness { shift } => {
            for v in data.iter_mut() {
                *v += shift as f32;
            }
        }
        Distortion::Contrast { factor } => {
            for v in data.iter_mut() {
                *v = (*v - 0.5) * factor as f32 + 0.5;
            }
        }
        Distortion::Pixelate { rows, cols } => {
            if rows == 0 || cols == 0 {
                return Err(invalid("pixelate", "block extents must be >= 1"));
            }
            for p in data.chunks_exact_mut(h * w) {
                pixelate_plane(p, h, w, rows, cols);
            }
        }
    }
    debug_assert_eq!(planes * h * w, data.len());
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn corrupt(x: &Tensor, spec: CorruptionSpec, rng: &mut Rng) -> Result<Tensor> {
    apply_distortion(x, spec.distortion(), rng)
}

/// Corrupts every sample with noise from its own derived stream.
pub fn corrupt_dataset(
    samples: &[ShapeSample],
    spec: CorruptionSpec,
    seed: u64,
) -> Result<Vec<ShapeSample>> {
    crate::par::map_slice(samples, |s| {
        let mut rng = Rng::new(derive_seed(seed, s.id as u64));
        Ok(ShapeSample {
            id: s.id,
            image: corrupt(&s.image, spec, &mut rng)?,
            label: s.label,
        })
    })
    .into_iter()
    .collect()
}

/// A stacked batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, S, S]`
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

/// Stacks the given samples into one batch.
pub fn stack(samples: &[&ShapeSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| invalid("stack", "empty batch"))?;
    let per = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != per.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: per.clone(),
                right: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&per);
    Ok(Batch {
        x: Tensor::new(&shape, data)?,
        labels: samples.iter().map(|s| s.label).collect(),
        ids: samples.iter().map(|s| s.id).collect(),
    })
}

/// Splits a dataset into batches of `batch_size` (last one partial), in
/// dataset order or in a permutation drawn from `rng`.
pub fn batch_iter<'a>(
    data: &'a [ShapeSample],
    batch_size: usize,
    rng: Option<&mut Rng>,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(invalid("batch_iter", "batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(r) = rng {
        r.shuffle(&mut order);
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let refs: Vec<&ShapeSample> = idx.iter().map(|&i| &data[i]).collect();
        stack(&refs)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().norm2() as f64
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let cfg = RenderConfig::default();
        let a = gen_dataset(&mut Rng::new(42), 8, &cfg).unwrap();
        let b = gen_dataset(&mut Rng::new(42), 8, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert!(x.image.bitwise_eq(&y.image));
        }
        let d = gen_dataset(&mut Rng::new(1), 400, &cfg).unwrap();
        let mut hist = [0; CLASSES];
        d.iter().for_each(|s| hist[s.label] += 1);
        assert_eq!(hist, [100; 4]);
        let d = gen_dataset(&mut Rng::new(1), 10, &cfg).unwrap();
        let mut hist = [0; CLASSES];
        d.iter().for_each(|s| hist[s.label] += 1);
        assert!(hist.iter().all(|&h| (2..=3).contains(&h)));
        assert!(gen_dataset(&mut Rng::new(1), 0, &cfg).is_err());
    }

    #[test]
    fn images_in_unit_range() {
        let d = gen_dataset(&mut Rng::new(3), 16, &RenderConfig::default()).unwrap();
        for s in &d {
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn hflip_examples() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(hflip(&x).data(), &[2., 1., 4., 3.]);
        assert!(hflip(&hflip(&x)).bitwise_eq(&x));
        let sym = Tensor::new(&[1, 1, 1, 3], vec![1., 5., 1.]).unwrap();
        assert!(hflip(&sym).bitwise_eq(&sym));
    }

    #[test]
    fn corruption_examples() {
        let mut rng = Rng::new(0);
        let x = rng.uniform::<f32>(&[3, 8, 8], 0.0, 1.0).unwrap();
        let y = apply_distortion(&x, Distortion::GaussianNoise { sigma: 0.0 }, &mut rng).unwrap();
        assert!(y.bitwise_eq(&x));

        let half = Tensor::full(&[3, 4, 4], 0.5f32).unwrap();
        let y = apply_distortion(&half, Distortion::Brightness { shift: 0.2 }, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let img = gen_dataset(&mut Rng::new(5), 1, &RenderConfig::default()).unwrap()[0]
            .image
            .clone();
        for sev in 3..=5 {
            let p = corrupt(
                &img,
                CorruptionSpec::new(CorruptionKind::Pixelate, sev).unwrap(),
                &mut rng,
            )
            .unwrap();
            for c in 0..3 {
                for by in (0..32).step_by(4) {
                    for bx in (0..32).step_by(4) {
                        let v0 = p.data()[(c * 32 + by) * 32 + bx];
                        for y in by..by + 4 {
                            for x in bx..bx + 4 {
                                assert_eq!(p.data()[(c * 32 + y) * 32 + x], v0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn corruption_preserves_shape_and_range() {
        let d = gen_dataset(&mut Rng::new(8), 4, &RenderConfig::default()).unwrap();
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                for s in &d {
                    let y = corrupt(&s.image, spec, &mut Rng::new(1)).unwrap();
                    assert_eq!(y.shape(), s.image.shape());
                    assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0).is_err());
        assert!(matches!(
            "fog".parse::<CorruptionKind>(),
            Err(Error::UnknownCorruption(_))
        ));
        assert_eq!(
            "pixelate".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::Pixelate
        );
    }

    #[test]
    fn severity_is_monotone() {
        let d = gen_dataset(&mut Rng::new(100), 100, &RenderConfig::default()).unwrap();
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for sev in 1..=5 {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                let c = corrupt_dataset(&d, spec, 77).unwrap();
                let mean: f64 = d
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| l2(&a.image, &b.image))
                    .sum::<f64>()
                    / 100.0;
                assert!(mean > prev, "{kind} severity {sev}: {mean} <= {prev}");
                prev = mean;
            }
        }
    }

    #[test]
    fn batches() {
        let d = gen_dataset(&mut Rng::new(2), 10, &RenderConfig::default()).unwrap();
        let sizes: Vec<usize> = batch_iter(&d, 4, None)
            .unwrap()
            .map(|b| b.unwrap().labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let ids: Vec<usize> = batch_iter(&d, 4, None)
            .unwrap()
            .flat_map(|b| b.unwrap().ids)
            .collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        let p1: Vec<usize> = batch_iter(&d, 3, Some(&mut Rng::new(9)))
            .unwrap()
            .flat_map(|b| b.unwrap().ids)
            .collect();
        let p2: Vec<usize> = batch_iter(&d, 3, Some(&mut Rng::new(9)))
            .unwrap()
            .flat_map(|b| b.unwrap().ids)
            .collect();
        assert_eq!(p1, p2);
        assert!(batch_iter(&d, 0, None).is_err());
    }

    #[test]
    fn corrupted_pixels_independent_of_order() {
        let d = gen_dataset(&mut Rng::new(4), 6, &RenderConfig::default()).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap();
        let a = corrupt_dataset(&d, spec, 3).unwrap();
        let rev: Vec<ShapeSample> = d.iter().rev().cloned().collect();
        let b = corrupt_dataset(&rev, spec, 3).unwrap();
        for s in &a {
            let t = b.iter().find(|t| t.id == s.id).unwrap();
            assert!(s.image.bitwise_eq(&t.image));
        }
    }
}
