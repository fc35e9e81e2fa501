//! Data-level augmentations and feature-level perturbations.
//!
//! Images are `[channels, height, width]` slices with values in `[0, 1]`.
//! Feature perturbations produce multiplicative masks so the same draw can be
//! applied inside the autodiff tape or to a plain tensor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn square(channels: usize, size: usize) -> Self {
        Self {
            channels,
            height: size,
            width: size,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SimCLR-style strong view. Ops run in the order jitter, grayscale, blur, flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    pub color_jitter_p: f32,
    /// Brightness, contrast and saturation factors are drawn from `1 ± 0.8·strength`.
    pub jitter_strength: f32,
    pub grayscale_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
    pub hflip_p: f32,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            color_jitter_p: 1.0,
            jitter_strength: 0.4,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            hflip_p: 0.5,
        }
    }
}

impl StrongAugConfig {
    /// Every op disabled.
    pub fn identity() -> Self {
        Self {
            color_jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            hflip_p: 0.0,
            ..Self::default()
        }
    }
}

/// The view fed to the contrastive image–text branch: mild rescale plus flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakAugConfig {
    pub resize_p: f32,
    pub scale_range: (f32, f32),
    /// Off by default: captions name left/right positions.
    pub hflip_p: f32,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        Self {
            resize_p: 0.5,
            scale_range: (0.95, 1.05),
            hflip_p: 0.0,
        }
    }
}

impl WeakAugConfig {
    pub fn identity() -> Self {
        Self {
            resize_p: 0.0,
            hflip_p: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub dropblock_p: f32,
    pub dropblock_size: usize,
    /// Rescale surviving activations by total/surviving units per sample.
    pub dropblock_rescale: bool,
    pub text_dropout_p: f32,
    pub strong: StrongAugConfig,
    pub weak: WeakAugConfig,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            dropblock_p: 0.5,
            dropblock_size: 3,
            dropblock_rescale: true,
            text_dropout_p: 0.75,
            strong: StrongAugConfig::default(),
            weak: WeakAugConfig::default(),
        }
    }
}

fn check_probability(name: &str, p: f32) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability("perturb.dropblock_p", self.dropblock_p)?;
        check_probability("perturb.text_dropout_p", self.text_dropout_p)?;
        if self.text_dropout_p >= 1.0 {
            return Err(Error::Config("perturb.text_dropout_p must be < 1".into()));
        }
        if self.dropblock_size == 0 || self.dropblock_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "perturb.dropblock_size must be odd and positive, got {}",
                self.dropblock_size
            )));
        }
        let s = &self.strong;
        check_probability("perturb.strong.color_jitter_p", s.color_jitter_p)?;
        check_probability("perturb.strong.grayscale_p", s.grayscale_p)?;
        check_probability("perturb.strong.blur_p", s.blur_p)?;
        check_probability("perturb.strong.hflip_p", s.hflip_p)?;
        if !(0.0..1.25).contains(&s.jitter_strength) {
            return Err(Error::Config(format!("perturb.strong.jitter_strength = {}", s.jitter_strength)));
        }
        if !(s.blur_sigma.0 > 0.0 && s.blur_sigma.0 <= s.blur_sigma.1) {
            return Err(Error::Config(format!("perturb.strong.blur_sigma = {:?}", s.blur_sigma)));
        }
        let w = &self.weak;
        check_probability("perturb.weak.resize_p", w.resize_p)?;
        check_probability("perturb.weak.hflip_p", w.hflip_p)?;
        if !(w.scale_range.0 > 0.0 && w.scale_range.0 <= w.scale_range.1) {
            return Err(Error::Config(format!("perturb.weak.scale_range = {:?}", w.scale_range)));
        }
        Ok(())
    }
}

/// Per-unit seed probability that makes the expected zeroed fraction of an
/// `h×w` map equal `p`, accounting for overlap between blocks and for the
/// reduced coverage near the border (seeds only where a full block fits).
pub fn dropblock_seed_rate(p: f32, block: usize, h: usize, w: usize) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let cover = |i: usize, n: usize| -> usize {
        // seeds s (top-left corner) in 0..=n-block whose block s..s+block covers i
        let lo = i.saturating_sub(block - 1);
        let hi = i.min(n - block);
        hi + 1 - lo.min(hi + 1)
    };
    let counts: Vec<usize> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| cover(y, h) * cover(x, w))
        .collect();
    let expected = |gamma: f64| -> f64 {
        counts.iter().map(|&n| 1.0 - (1.0 - gamma).powi(n as i32)).sum::<f64>() / counts.len() as f64
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < p as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Multiplicative DropBlock mask for a `[B, C, H, W]` map: zeros inside dropped
/// blocks, and either 1 or the per-sample rescale factor elsewhere.
pub fn dropblock_mask<R: Rng + ?Sized>(
    shape: &[usize],
    p: f32,
    block: usize,
    rescale: bool,
    rng: &mut R,
) -> Result<Vec<f32>> {
    check_probability("dropblock p", p)?;
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if block == 0 || block > h.min(w) {
        return Err(Error::Config(format!(
            "dropblock block size {block} does not fit a {h}x{w} feature map"
        )));
    }
    let gamma = dropblock_seed_rate(p, block, h, w);
    let plane = h * w;
    let mut mask = vec![1.0f32; b * c * plane];
    for bi in 0..b {
        let sample = &mut mask[bi * c * plane..(bi + 1) * c * plane];
        for ci in 0..c {
            let m = &mut sample[ci * plane..(ci + 1) * plane];
            for sy in 0..=h - block {
                for sx in 0..=w - block {
                    if rng.gen::<f64>() < gamma {
                        for y in sy..sy + block {
                            m[y * w + sx..y * w + sx + block].fill(0.0);
                        }
                    }
                }
            }
        }
        if rescale {
            let kept = sample.iter().filter(|&&v| v != 0.0).count();
            if kept > 0 {
                let k = sample.len() as f32 / kept as f32;
                for v in sample.iter_mut() {
                    *v *= k;
                }
            }
        }
    }
    Ok(mask)
}

/// DropBlock on a `[B, C, H, W]` tensor. Identity outside training.
pub fn dropblock<R: Rng + ?Sized>(
    feature_map: &Tensor,
    p: f32,
    block: usize,
    training: bool,
    rescale: bool,
    rng: &mut R,
) -> Result<Tensor> {
    check_probability("dropblock p", p)?;
    if feature_map.ndim() != 4 {
        return Err(Error::Input(format!("dropblock expects [B, C, H, W], got {:?}", feature_map.shape())));
    }
    if !training || p == 0.0 {
        return Ok(feature_map.clone());
    }
    let mask = dropblock_mask(feature_map.shape(), p, block, rescale, rng)?;
    let data = feature_map.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok(Tensor::from_vec(feature_map.shape(), data))
}

/// [`dropout_mask`] over `rows × width` units where a row that would lose
/// every unit is redrawn, so a dropped feature vector is never all zero.
pub fn row_dropout_mask<R: Rng + ?Sized>(rows: usize, width: usize, p: f32, rng: &mut R) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        loop {
            let row = dropout_mask(width, p, rng)?;
            if width == 0 || row.iter().any(|&v| v != 0.0) {
                out.extend(row);
                break;
            }
        }
    }
    Ok(out)
}

/// Inverted-dropout mask: 0 with probability `p`, `1/(1-p)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f32, rng: &mut R) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} must lie in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..n).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect())
}

pub fn feature_dropout<R: Rng + ?Sized>(features: &Tensor, p: f32, training: bool, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} must lie in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(features.clone());
    }
    let mask = dropout_mask(features.len(), p, rng)?;
    let data = features.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok(Tensor::from_vec(features.shape(), data))
}

fn validate_image(image: &[f32], dims: ImageDims) -> Result<()> {
    if image.len() != dims.len() {
        return Err(Error::Input(format!("image has {} values, expected {:?}", image.len(), dims)));
    }
    if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

fn clip(image: &mut [f32]) {
    for v in image {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn hflip(image: &mut [f32], dims: ImageDims) {
    for row in image.chunks_exact_mut(dims.width) {
        row.reverse();
    }
}

fn luminance(image: &[f32], dims: ImageDims) -> Vec<f32> {
    let plane = dims.height * dims.width;
    if dims.channels == 3 {
        (0..plane)
            .map(|i| 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i])
            .collect()
    } else {
        image[..plane].to_vec()
    }
}

fn color_jitter<R: Rng + ?Sized>(image: &mut [f32], dims: ImageDims, strength: f32, rng: &mut R) {
    let spread = 0.8 * strength;
    let mut factor = || rng.gen_range(1.0 - spread..=1.0 + spread);
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    for v in image.iter_mut() {
        *v *= brightness;
    }
    clip(image);
    let mean = luminance(image, dims).iter().sum::<f32>() / (dims.height * dims.width) as f32;
    for v in image.iter_mut() {
        *v = (*v - mean) * contrast + mean;
    }
    clip(image);
    if dims.channels == 3 {
        let gray = luminance(image, dims);
        let plane = gray.len();
        for c in 0..3 {
            for (i, g) in gray.iter().enumerate() {
                let v = &mut image[c * plane + i];
                *v = (*v - g) * saturation + g;
            }
        }
        clip(image);
    }
}

fn grayscale(image: &mut [f32], dims: ImageDims) {
    if dims.channels == 3 {
        let gray = luminance(image, dims);
        let plane = gray.len();
        for c in 0..3 {
            image[c * plane..(c + 1) * plane].copy_from_slice(&gray);
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &mut [f32], dims: ImageDims, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= s;
    }
    let (h, w) = (dims.height as isize, dims.width as isize);
    let plane = dims.height * dims.width;
    let mut tmp = vec![0.0; plane];
    for c in 0..dims.channels {
        let p = &mut image[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let sx = (x + j as isize - radius).clamp(0, w - 1);
                    acc += k * p[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let sy = (y + j as isize - radius).clamp(0, h - 1);
                    acc += k * tmp[(sy * w + x) as usize];
                }
                p[(y * w + x) as usize] = acc;
            }
        }
    }
}

/// Zoom about the image centre by `scale` with bilinear sampling; the output
/// keeps the input extent and out-of-frame samples clamp to the border.
pub fn rescale(image: &[f32], dims: ImageDims, scale: f32) -> Vec<f32> {
    let (h, w) = (dims.height, dims.width);
    let plane = h * w;
    let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
    let mut out = vec![0.0; image.len()];
    for c in 0..dims.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let sy = ((y as f32 + 0.5 - cy) / scale + cy - 0.5).clamp(0.0, (h - 1) as f32);
                let sx = ((x as f32 + 0.5 - cx) / scale + cx - 0.5).clamp(0.0, (w - 1) as f32);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[c * plane + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn strong_view<R: Rng + ?Sized>(image: &[f32], dims: ImageDims, cfg: &StrongAugConfig, rng: &mut R) -> Vec<f32> {
    let mut view = image.to_vec();
    if rng.gen::<f32>() < cfg.color_jitter_p {
        color_jitter(&mut view, dims, cfg.jitter_strength, rng);
    }
    if rng.gen::<f32>() < cfg.grayscale_p {
        grayscale(&mut view, dims);
    }
    if rng.gen::<f32>() < cfg.blur_p {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut view, dims, sigma);
    }
    if rng.gen::<f32>() < cfg.hflip_p {
        hflip(&mut view, dims);
    }
    clip(&mut view);
    view
}

/// Two independent strong views of one image.
pub fn strong_augment_pair<R: Rng + ?Sized>(
    image: &[f32],
    dims: ImageDims,
    cfg: &StrongAugConfig,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>)> {
    validate_image(image, dims)?;
    let a = strong_view(image, dims, cfg, rng);
    let b = strong_view(image, dims, cfg, rng);
    Ok((a, b))
}

pub fn weak_augment<R: Rng + ?Sized>(
    image: &[f32],
    dims: ImageDims,
    cfg: &WeakAugConfig,
    rng: &mut R,
) -> Result<Vec<f32>> {
    validate_image(image, dims)?;
    let mut view = if rng.gen::<f32>() < cfg.resize_p {
        let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        rescale(image, dims, scale)
    } else {
        image.to_vec()
    };
    if rng.gen::<f32>() < cfg.hflip_p {
        hflip(&mut view, dims);
    }
    clip(&mut view);
    Ok(view)
}
