//! ClassMix: paste the pixels of a random half of the source image's classes
//! onto a target image, mixing labels with the same mask.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::datagen::LabeledImage;
use crate::error::{Error, Result};
use crate::io;
use crate::label::{ClassId, LabelMap, IGNORE_ID};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default share of the present classes pasted from the source.
pub const DEFAULT_SUBSET_FRACTION: f64 = 0.5;

/// A mixed image with its partly-pseudo labels and the binary mask used.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Tensor,
    pub labels: LabelMap,
    /// 1 where the pixel came from the source, 0 where it came from the target.
    pub mask: Vec<u8>,
    /// Sorted ids of the pasted classes.
    pub chosen: Vec<ClassId>,
}

/// Number of classes chosen out of `k` present: `ceil(k * fraction)`, at least one.
pub fn subset_size(k: usize, fraction: f64) -> usize {
    ((k as f64 * fraction).ceil() as usize).clamp(1, k.max(1))
}

/// Uniformly picks `ceil(k/2)` of the `k` valid classes present in `labels`.
pub fn sample_class_subset(labels: &LabelMap, rng: &mut Rng) -> Result<Vec<ClassId>> {
    sample_class_subset_with(labels, rng, DEFAULT_SUBSET_FRACTION)
}

pub fn sample_class_subset_with(labels: &LabelMap, rng: &mut Rng, fraction: f64) -> Result<Vec<ClassId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let mut present = labels.present_classes();
    if present.is_empty() {
        return Err(Error::invalid("source label map has no valid class"));
    }
    let n = subset_size(present.len(), fraction);
    present.shuffle(rng);
    present.truncate(n);
    present.sort_unstable();
    Ok(present)
}

/// `x^M = x^S * M + x^T * (1 - M)` and the same for labels, with
/// `M[p] = 1` iff the source label at `p` is in `subset`.
pub fn classmix(source: &LabeledImage, target_image: &Tensor, pseudo: &LabelMap, subset: &[ClassId]) -> Result<MixedSample> {
    let (h, w) = (source.labels.height(), source.labels.width());
    if target_image.shape() != source.image.shape() || pseudo.height() != h || pseudo.width() != w {
        return Err(Error::dim(format!(
            "classmix needs equal sizes: source {:?}, target {:?}, pseudo {}x{}",
            source.image.shape(),
            target_image.shape(),
            pseudo.height(),
            pseudo.width()
        )));
    }
    let mask: Vec<u8> = source
        .labels
        .values()
        .iter()
        .map(|&c| u8::from(c != IGNORE_ID && subset.contains(&c)))
        .collect();
    let plane = h * w;
    let channels = source.image.numel() / plane;
    let mut image = vec![0.0; source.image.numel()];
    for c in 0..channels {
        for p in 0..plane {
            let m = f64::from(mask[p]);
            let i = c * plane + p;
            image[i] = source.image.data()[i] * m + target_image.data()[i] * (1.0 - m);
        }
    }
    let labels: Vec<ClassId> = (0..plane)
        .map(|p| if mask[p] == 1 { source.labels.values()[p] } else { pseudo.values()[p] })
        .collect();
    let mut chosen = subset.to_vec();
    chosen.sort_unstable();
    chosen.dedup();
    Ok(MixedSample {
        image: Tensor::new(source.image.shape().to_vec(), image)?,
        labels: LabelMap::new(h, w, labels)?,
        mask,
        chosen,
    })
}

/// Normalised 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur of a `[C, H, W]` image with edge clamping.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(Error::dim(format!("blur expects [C,H,W], got {:?}", image.shape())));
    }
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[base + y * w + clamp(x as i64 + k as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[base + clamp(y as i64 + k as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Brightness/contrast jitter then, with probability one half, a Gaussian blur
/// whose sigma is drawn from `[0.5, 1.5] * blur_sigma`. The same four random
/// numbers are drawn whatever the strengths, so streams stay aligned. Labels and
/// mask are returned untouched.
pub fn augment_mixed(sample: &MixedSample, rng: &mut Rng, jitter_strength: f64, blur_sigma: f64) -> Result<MixedSample> {
    if jitter_strength < 0.0 || blur_sigma < 0.0 {
        return Err(Error::invalid("augmentation strengths must be >= 0"));
    }
    let brightness: f64 = rng.random_range(-1.0..1.0);
    let contrast: f64 = rng.random_range(-1.0..1.0);
    let blur_draw: f64 = rng.random();
    let sigma_draw: f64 = rng.random();
    let mut image = sample.image.clone();
    if jitter_strength > 0.0 {
        let mean = image.data().iter().sum::<f64>() / image.numel() as f64;
        let b = brightness * jitter_strength;
        let c = 1.0 + contrast * jitter_strength;
        for v in image.data_mut() {
            *v = ((*v - mean) * c + mean + b).clamp(0.0, 1.0);
        }
    }
    if blur_sigma > 0.0 && blur_draw < 0.5 {
        image = gaussian_blur(&image, blur_sigma * (0.5 + sigma_draw))?;
    }
    Ok(MixedSample { image, ..sample.clone() })
}

/// Writes `<stem>_mask.pgm`, `<stem>_image.ppm` and `<stem>_labels.pgm`.
pub fn dump_pixmaps(sample: &MixedSample, dir: &Path, stem: &str) -> Result<()> {
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let mask: Vec<u8> = sample.mask.iter().map(|&m| m * 255).collect();
    io::write_bytes(&dir.join(format!("{stem}_mask.pgm")), &io::encode_pgm(w, h, &mask))?;
    io::write_ppm(&dir.join(format!("{stem}_image.ppm")), &sample.image)?;
    io::write_labels(&dir.join(format!("{stem}_labels.pgm")), &sample.labels)
}
