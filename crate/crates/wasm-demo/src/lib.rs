//! WebAssembly bindings for the static page in `www/`.
//!
//! The page has three panels: a source/target scene pair mixed with ClassMix,
//! an explorer for the Monte-Carlo overlap of two 2-D Gaussians, and the
//! cosine relationship matrix of a class prior. Each exported function has a
//! plain Rust twin returning the core error type so it can be tested natively.

use dap_lab::analysis::{self, ClassGaussian, Covariance};
use dap_lab::datagen::{self, LabeledImage};
use dap_lab::mixing;
use dap_lab::priors::{self, EmbeddingSet};
use dap_lab::rng::{self, Concern};
use dap_lab::{Error, LabelMap, Result, Tensor, CLASS_NAMES, IGNORE_ID};
use wasm_bindgen::prelude::*;

/// Display colours for the six classes, in class-id order.
pub const LABEL_COLORS: [[u8; 3]; 6] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 130, 180],
    [70, 70, 70],
    [119, 11, 32],
    [0, 0, 230],
];

/// Panels in a [`MixView`] strip, left to right.
pub const MIX_PANELS: [&str; 5] = ["source", "source labels", "target", "mixed", "mixed labels"];

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct MixView {
    size: usize,
    rgba: Vec<u8>,
    chosen: Vec<String>,
    mixed_share: f64,
}

#[wasm_bindgen]
impl MixView {
    /// Side length of one square panel.
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA strip of all panels, `5 * size` pixels wide.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Comma-separated names of the pasted source classes.
    #[wasm_bindgen(getter)]
    pub fn chosen(&self) -> String {
        self.chosen.join(", ")
    }

    /// Fraction of mixed pixels taken from the source.
    #[wasm_bindgen(getter, js_name = mixedShare)]
    pub fn mixed_share(&self) -> f64 {
        self.mixed_share
    }
}

fn paint_image(strip: &mut [u8], strip_w: usize, panel: usize, image: &Tensor) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let o = 4 * (y * strip_w + panel * w + x);
            for c in 0..3 {
                strip[o + c] = (image.data()[c * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            strip[o + 3] = 255;
        }
    }
}

fn paint_labels(strip: &mut [u8], strip_w: usize, panel: usize, labels: &LabelMap) {
    let w = labels.width();
    for y in 0..labels.height() {
        for x in 0..w {
            let o = 4 * (y * strip_w + panel * w + x);
            let c = labels.get(y, x);
            let rgb = if c == IGNORE_ID { [0, 0, 0] } else { LABEL_COLORS[usize::from(c)] };
            strip[o..o + 3].copy_from_slice(&rgb);
            strip[o + 3] = 255;
        }
    }
}

/// Renders scene `index` of both domains of the `gap-default` preset (with the
/// target hue shift overridden) and mixes them. The target's own labels stand
/// in for teacher pseudo labels.
pub fn mix_scenes(seed: u64, index: u64, size: usize, hue_shift: f64) -> Result<MixView> {
    if !(16..=256).contains(&size) {
        return Err(Error::InvalidArgument(format!("scene size {size} outside 16..=256")));
    }
    let (source_spec, mut target_spec) = datagen::preset("gap-default", seed)?;
    target_spec.hue_shift = hue_shift;
    target_spec.validate()?;
    let source: LabeledImage = datagen::scene_at(&source_spec, size, size, index)?;
    let target = datagen::scene_at(&target_spec, size, size, index)?;
    let subset = mixing::sample_class_subset(&source.labels, &mut rng::stream(seed, Concern::Subset, index))?;
    let mixed = mixing::classmix(&source, &target.image, &target.labels, &subset)?;

    let strip_w = MIX_PANELS.len() * size;
    let mut rgba = vec![0u8; 4 * strip_w * size];
    paint_image(&mut rgba, strip_w, 0, &source.image);
    paint_labels(&mut rgba, strip_w, 1, &source.labels);
    paint_image(&mut rgba, strip_w, 2, &target.image);
    paint_image(&mut rgba, strip_w, 3, &mixed.image);
    paint_labels(&mut rgba, strip_w, 4, &mixed.labels);
    let pasted = mixed.mask.iter().filter(|&&m| m == 1).count();
    Ok(MixView {
        size,
        rgba,
        chosen: mixed.chosen.iter().map(|&c| CLASS_NAMES[usize::from(c)].to_string()).collect(),
        mixed_share: pasted as f64 / mixed.mask.len() as f64,
    })
}

#[wasm_bindgen(js_name = mixScenes)]
pub fn mix_scenes_js(seed: u32, index: u32, size: u32, hue_shift: f64) -> std::result::Result<MixView, JsError> {
    mix_scenes(u64::from(seed), u64::from(index), size as usize, hue_shift).map_err(|e| JsError::new(&e.to_string()))
}

/// One axis-aligned 2-D Gaussian: `[mean_x, mean_y, sd_x, sd_y]`.
pub type Gaussian2 = [f64; 4];

/// Half-width of the square plotted by [`overlap`].
pub const PLOT_RADIUS: f64 = 5.0;

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct OverlapView {
    iou: f64,
    closed_form: f64,
    size: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl OverlapView {
    /// Monte-Carlo overlap IOU.
    #[wasm_bindgen(getter)]
    pub fn iou(&self) -> f64 {
        self.iou
    }

    /// Exact value when the pair differs only along x with equal spread, else NaN.
    #[wasm_bindgen(getter, js_name = closedForm)]
    pub fn closed_form(&self) -> f64 {
        self.closed_form
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// Square RGBA density plot, A in red and B in blue.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn to_gaussian(class: u8, g: &Gaussian2) -> Result<ClassGaussian> {
    if g.iter().any(|v| !v.is_finite()) || g[2] <= 0.0 || g[3] <= 0.0 {
        return Err(Error::InvalidArgument(format!("gaussian {class} needs finite means and positive spreads, got {g:?}")));
    }
    Ok(ClassGaussian {
        class,
        mean: vec![g[0], g[1]],
        covariance: Covariance::Diagonal(vec![g[2] * g[2], g[3] * g[3]]),
        count: 0,
    })
}

fn density(g: &Gaussian2, x: f64, y: f64) -> f64 {
    let zx = (x - g[0]) / g[2];
    let zy = (y - g[1]) / g[3];
    (-0.5 * (zx * zx + zy * zy)).exp()
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// For equal spreads differing only in the x mean, each side of the midpoint
/// holds `r = Phi(-d / 2 sd)` of the other's mass, so the overlap is `r / (1 - r)`.
fn closed_form(a: &Gaussian2, b: &Gaussian2) -> f64 {
    if a[1] == b[1] && a[2] == b[2] && a[3] == b[3] {
        let r = phi(-(a[0] - b[0]).abs() / (2.0 * a[2]));
        r / (1.0 - r)
    } else {
        f64::NAN
    }
}

pub fn overlap(a: &Gaussian2, b: &Gaussian2, samples: usize, seed: u64, size: usize) -> Result<OverlapView> {
    let (ga, gb) = (to_gaussian(0, a)?, to_gaussian(1, b)?);
    let iou = analysis::gaussian_iou(&ga, &gb, samples, &mut rng::stream(seed, Concern::MonteCarlo, 0))?;
    let mut rgba = vec![0u8; 4 * size * size];
    let step = 2.0 * PLOT_RADIUS / size as f64;
    for row in 0..size {
        let y = PLOT_RADIUS - (row as f64 + 0.5) * step;
        for col in 0..size {
            let x = -PLOT_RADIUS + (col as f64 + 0.5) * step;
            let o = 4 * (row * size + col);
            let (da, db) = (density(a, x, y), density(b, x, y));
            rgba[o] = (255.0 * da).round() as u8;
            rgba[o + 1] = (64.0 * da.min(db)).round() as u8;
            rgba[o + 2] = (255.0 * db).round() as u8;
            rgba[o + 3] = 255;
        }
    }
    Ok(OverlapView { iou, closed_form: closed_form(a, b), size, rgba })
}

#[wasm_bindgen(js_name = gaussianOverlap)]
pub fn overlap_js(a: &[f64], b: &[f64], samples: u32, seed: u32, size: u32) -> std::result::Result<OverlapView, JsError> {
    let pick = |v: &[f64]| -> std::result::Result<Gaussian2, JsError> {
        v.try_into().map_err(|_| JsError::new("each gaussian takes [mean_x, mean_y, sd_x, sd_y]"))
    };
    overlap(&pick(a)?, &pick(b)?, samples as usize, u64::from(seed), size as usize)
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct RelationView {
    names: Vec<String>,
    values: Vec<f64>,
    gray: Vec<u8>,
}

#[wasm_bindgen]
impl RelationView {
    /// Comma-separated class names, in row order.
    #[wasm_bindgen(getter)]
    pub fn names(&self) -> String {
        self.names.join(",")
    }

    /// Row-major cosine matrix.
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Row-major heatmap gray level per cell.
    #[wasm_bindgen(getter)]
    pub fn gray(&self) -> Vec<u8> {
        self.gray.clone()
    }
}

/// Builds a prior (`onehot`, `random` or `file`) and its cosine relationship
/// matrix. `vectors` is word-vector text and is read only for `file`.
pub fn relation(kind: &str, vectors: &str, dim: usize, seed: u64) -> Result<RelationView> {
    let prior: EmbeddingSet = match kind.parse::<priors::PriorKind>()? {
        priors::PriorKind::OneHot => priors::build_one_hot(&CLASS_NAMES)?,
        priors::PriorKind::Random => priors::build_random(&CLASS_NAMES, dim, seed)?,
        priors::PriorKind::Loaded => priors::parse_vectors(vectors, &CLASS_NAMES)?,
    };
    let rows: Vec<Vec<f64>> = prior.rows().map(<[f64]>::to_vec).collect();
    let names = prior.class_names().to_vec();
    let matrix = analysis::relationship_matrix(&rows, &names)?;
    let gray = analysis::heatmap_levels(&matrix)?.gray;
    Ok(RelationView { names, values: matrix.into_iter().flatten().collect(), gray })
}

#[wasm_bindgen(js_name = relationMatrix)]
pub fn relation_js(kind: &str, vectors: &str, dim: u32, seed: u32) -> std::result::Result<RelationView, JsError> {
    relation(kind, vectors, dim as usize, u64::from(seed)).map_err(|e| JsError::new(&e.to_string()))
}
