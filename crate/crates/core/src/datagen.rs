//! Procedural two-domain scene generator.
//!
//! Scenes are street-like strata (sky, buildings, sidewalk, road) with small
//! bike and motorbike silhouettes placed on the ground band. The silhouettes
//! share one shape and differ only by a small rectangular engine block, so the
//! two classes are confusable by construction. A domain is a palette plus a
//! hue rotation, additive texture noise and per-class pixel frequencies; the
//! gap between two domains is the difference in those knobs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{self, KeyValues};
use crate::label::{self, ClassId, LabelMap, NUM_CLASSES};
use crate::rng::{self, Concern, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 64;
pub const MIN_SIZE: usize = 16;
pub const BUNDLE_FORMAT: &str = "dap-lab-bundle-1";

/// Generative parameters of one visual domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    /// Base RGB colour per class, components in [0, 1].
    pub palette: Vec<[f64; 3]>,
    pub texture_noise_sigma: f64,
    /// Hue rotation applied to the palette, in turns (1.0 = 360 degrees).
    pub hue_shift: f64,
    /// Target pixel share per class; non-negative, sums to 1.
    pub class_frequency: Vec<f64>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.len() != NUM_CLASSES || self.class_frequency.len() != NUM_CLASSES {
            return Err(Error::invalid(format!("palette and class_frequency need {NUM_CLASSES} entries")));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("palette components must lie in [0, 1]"));
        }
        if !(self.texture_noise_sigma >= 0.0) || !self.hue_shift.is_finite() {
            return Err(Error::invalid("texture_noise_sigma must be >= 0 and hue_shift finite"));
        }
        if self.class_frequency.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::invalid("class frequencies must be >= 0"));
        }
        let total: f64 = self.class_frequency.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class frequencies sum to {total}, not 1")));
        }
        let ground: f64 = [label::ROAD, label::SIDEWALK, label::BIKE, label::MOTORBIKE]
            .iter()
            .map(|&c| self.class_frequency[c as usize])
            .sum();
        if ground <= 0.0 || self.class_frequency[label::ROAD as usize] + self.class_frequency[label::SIDEWALK as usize] <= 0.0 {
            return Err(Error::invalid("road and sidewalk need a positive share"));
        }
        Ok(())
    }

    /// True when the two specs share every appearance parameter (seed aside).
    pub fn same_domain(&self, other: &DomainSpec) -> bool {
        self.palette == other.palette
            && self.texture_noise_sigma == other.texture_noise_sigma
            && self.hue_shift == other.hue_shift
            && self.class_frequency == other.class_frequency
    }

    /// Palette after the domain's hue rotation.
    pub fn rendered_palette(&self) -> Vec<[f64; 3]> {
        self.palette.iter().map(|&c| rotate_hue(c, self.hue_shift)).collect()
    }

    fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        let palette: Vec<String> = self.palette.iter().map(|c| format!("{},{},{}", c[0], c[1], c[2])).collect();
        let freq: Vec<String> = self.class_frequency.iter().map(f64::to_string).collect();
        kv.push(format!("{prefix}.seed"), self.seed);
        kv.push(format!("{prefix}.hue_shift"), self.hue_shift);
        kv.push(format!("{prefix}.texture_noise_sigma"), self.texture_noise_sigma);
        kv.push(format!("{prefix}.palette"), palette.join(";"));
        kv.push(format!("{prefix}.class_frequency"), freq.join(","));
    }

    fn read_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let floats = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number {v:?}"))))
                .collect()
        };
        let palette = kv
            .require(&format!("{prefix}.palette"))?
            .split(';')
            .map(|rgb| {
                let v = floats(rgb)?;
                <[f64; 3]>::try_from(v).map_err(|_| Error::invalid("palette entries need 3 components"))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = DomainSpec {
            palette,
            texture_noise_sigma: kv.parse_value(&format!("{prefix}.texture_noise_sigma"))?,
            hue_shift: kv.parse_value(&format!("{prefix}.hue_shift"))?,
            class_frequency: floats(kv.require(&format!("{prefix}.class_frequency"))?)?,
            seed: kv.parse_value(&format!("{prefix}.seed"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Base palette shared by the presets. Road/sidewalk and bike/motorbike are
/// deliberately close in colour.
pub fn base_palette() -> Vec<[f64; 3]> {
    vec![
        [0.42, 0.42, 0.45], // road
        [0.56, 0.50, 0.46], // sidewalk
        [0.55, 0.72, 0.92], // sky
        [0.62, 0.36, 0.28], // building
        [0.20, 0.55, 0.30], // bike
        [0.24, 0.47, 0.36], // motorbike
    ]
}

/// Named source/target domain pairs. `seed` feeds both domains' generators.
pub fn preset(name: &str, seed: u64) -> Result<(DomainSpec, DomainSpec)> {
    let source = DomainSpec {
        palette: base_palette(),
        texture_noise_sigma: 0.04,
        hue_shift: 0.0,
        class_frequency: vec![0.30, 0.16, 0.22, 0.22, 0.05, 0.05],
        seed: seed.wrapping_mul(2).wrapping_add(1),
    };
    let target_seed = seed.wrapping_mul(2).wrapping_add(2);
    match name {
        "gap-default" => {
            let target = DomainSpec {
                palette: base_palette(),
                texture_noise_sigma: 0.08,
                hue_shift: 0.05,
                class_frequency: vec![0.36, 0.14, 0.22, 0.24, 0.02, 0.02],
                seed: target_seed,
            };
            Ok((source, target))
        }
        "no-gap" => {
            let target = DomainSpec { seed: target_seed, ..source.clone() };
            Ok((source, target))
        }
        other => Err(Error::invalid(format!("unknown preset {other:?} (expected gap-default or no-gap)"))),
    }
}

/// Loading real driving datasets is outside this crate.
pub fn load_external_dataset(name: &str) -> Result<()> {
    Err(Error::Unsupported(format!("dataset {name}: only synthetic bundles are supported")))
}

/// An image with per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl LabeledImage {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if h == labels.height() && w == labels.width() => Ok(Self { image, labels }),
            s => Err(Error::dim(format!(
                "image {s:?} vs labels {}x{}",
                labels.height(),
                labels.width()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }
}

/// A target-domain image whose labels are hidden from training.
///
/// [`UnlabeledImage::image`] is the trainer-facing accessor. The labels are
/// reachable only through [`UnlabeledImage::hidden_labels`], which counts every
/// call on an attached tripwire counter.
#[derive(Clone, Debug)]
pub struct UnlabeledImage {
    image: Tensor,
    hidden: Option<LabelMap>,
    tripwire: Option<Arc<AtomicUsize>>,
}

impl UnlabeledImage {
    pub fn new(image: Tensor, hidden: Option<LabelMap>) -> Self {
        Self { image, hidden, tripwire: None }
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    /// Evaluation-only access to the sealed labels.
    pub fn hidden_labels(&self) -> Option<&LabelMap> {
        if let Some(t) = &self.tripwire {
            t.fetch_add(1, Ordering::SeqCst);
        }
        self.hidden.as_ref()
    }

    pub fn attach_tripwire(&mut self, counter: Arc<AtomicUsize>) {
        self.tripwire = Some(counter);
    }
}

/// Applies a hue rotation of `turns` in HSV space.
pub fn rotate_hue(rgb: [f64; 3], turns: f64) -> [f64; 3] {
    if turns == 0.0 {
        return rgb;
    }
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return rgb;
    }
    let hue = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let sat = delta / max;
    let h6 = (hue + turns).rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (max * (1.0 - sat), max * (1.0 - sat * f), max * (1.0 - sat * (1.0 - f)));
    match sector as i32 {
        0 => [max, t, p],
        1 => [q, max, p],
        2 => [p, max, t],
        3 => [p, q, max],
        4 => [t, p, max],
        _ => [max, p, q],
    }
}

/// Bike silhouette; motorbikes add [`ENGINE`].
const BIKE_SHAPE: [&str; 7] = [
    "..XXXXXXXX..",
    ".XXXXXXXXXX.",
    "XXXXXXXXXXXX",
    "XXXXXXXXXXXX",
    "XXXXXXXXXXXX",
    ".XXXX..XXXX.",
    "..XX....XX..",
];
/// Engine block `(row, col, height, width)` inside the silhouette box.
const ENGINE: (usize, usize, usize, usize) = (5, 4, 2, 4);
const OBJECT_H: usize = 7;
const OBJECT_W: usize = 12;

fn object_mask(class: ClassId, flip: bool) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for (r, row) in BIKE_SHAPE.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            let engine = class == label::MOTORBIKE
                && (ENGINE.0..ENGINE.0 + ENGINE.2).contains(&r)
                && (ENGINE.1..ENGINE.1 + ENGINE.3).contains(&c);
            if ch == b'X' || engine {
                cells.push((r, if flip { OBJECT_W - 1 - c } else { c }));
            }
        }
    }
    cells
}

/// Pixel area of one object of `class`.
pub fn object_area(class: ClassId) -> usize {
    object_mask(class, false).len()
}

/// Integer count with expectation `x`.
fn stochastic_round(x: f64, rng: &mut Rng) -> usize {
    let base = x.floor();
    base as usize + usize::from(rng.random::<f64>() < x - base)
}

/// Label layout of one scene.
fn layout(spec: &DomainSpec, h: usize, w: usize, rng: &mut Rng) -> LabelMap {
    let f = &spec.class_frequency;
    let at = |c: ClassId| f[c as usize];
    let objects = at(label::BIKE) + at(label::MOTORBIKE);
    let ground = at(label::ROAD) + at(label::SIDEWALK) + objects;
    let upper = at(label::SKY) + at(label::BUILDING);
    let mut labels = LabelMap::filled(h, w, label::ROAD);

    // Horizon: top of the ground band, with a small per-scene wobble.
    let horizon_mean = h as f64 * (1.0 - ground);
    let horizon = (horizon_mean + rng.random_range(-2.0..2.0)).round().clamp(1.0, (h - 4) as f64) as usize;

    // Buildings: contiguous blocks standing on the horizon.
    let coverage = if upper > 0.0 { at(label::BUILDING) / upper } else { 0.0 };
    let mut x = 0;
    while x < w {
        let width = rng.random_range(5..=14).min(w - x);
        let height = (horizon as f64 * coverage * rng.random_range(0.5..1.5)).round() as usize;
        let top = horizon.saturating_sub(height.min(horizon));
        for y in 0..horizon {
            let class = if y >= top { label::BUILDING } else { label::SKY };
            for xx in x..x + width {
                labels.set(y, xx, class);
            }
        }
        x += width;
    }

    // Sidewalk over road, boundary as a bounded random walk around its mean.
    let ground_rows = (h - horizon) as f64;
    let sidewalk_share = at(label::SIDEWALK) / (at(label::ROAD) + at(label::SIDEWALK));
    let mean_depth = ground_rows * sidewalk_share;
    let mut offset: f64 = 0.0;
    for xx in 0..w {
        offset = (offset + rng.random_range(-1.0..1.0)).clamp(-3.0, 3.0);
        let depth = (mean_depth + offset).round().clamp(0.0, ground_rows) as usize;
        for y in horizon..h {
            let class = if y < horizon + depth { label::SIDEWALK } else { label::ROAD };
            labels.set(y, xx, class);
        }
    }

    // Objects: counts chosen so the expected pixel share matches the spec.
    if h - horizon >= OBJECT_H && w >= OBJECT_W {
        let mut occupied = vec![false; h * w];
        for class in [label::BIKE, label::MOTORBIKE] {
            let expected = at(class) * (h * w) as f64 / object_area(class) as f64;
            let count = stochastic_round(expected, rng);
            for _ in 0..count {
                let flip = rng.random::<bool>();
                let cells = object_mask(class, flip);
                for _attempt in 0..20 {
                    let oy = rng.random_range(horizon..=h - OBJECT_H);
                    let ox = rng.random_range(0..=w - OBJECT_W);
                    // one pixel of margin so objects never touch
                    let clear = (oy.saturating_sub(1)..(oy + OBJECT_H + 1).min(h))
                        .all(|y| (ox.saturating_sub(1)..(ox + OBJECT_W + 1).min(w)).all(|x| !occupied[y * w + x]));
                    if !clear {
                        continue;
                    }
                    for y in oy..oy + OBJECT_H {
                        for x in ox..ox + OBJECT_W {
                            occupied[y * w + x] = true;
                        }
                    }
                    for &(r, c) in &cells {
                        labels.set(oy + r, ox + c, class);
                    }
                    break;
                }
            }
        }
    }
    labels
}

/// Renders one labelled scene. Labels are exact by construction; the image is
/// the rendered palette colour of each pixel's class plus texture noise.
pub fn generate_scene(spec: &DomainSpec, h: usize, w: usize, rng: &mut Rng) -> Result<LabeledImage> {
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::invalid(format!("scenes must be at least {MIN_SIZE}x{MIN_SIZE}")));
    }
    spec.validate()?;
    let labels = layout(spec, h, w, rng);
    let colours = spec.rendered_palette();
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, &class) in labels.values().iter().enumerate() {
        for ch in 0..3 {
            let mut v = colours[class as usize][ch];
            if spec.texture_noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v = (v + spec.texture_noise_sigma * z).clamp(0.0, 1.0);
            }
            data[ch * plane + p] = v;
        }
    }
    LabeledImage::new(Tensor::new(vec![3, h, w], data)?, labels)
}

/// Scene `index` of a domain; pure in `(spec, index)`.
pub fn scene_at(spec: &DomainSpec, h: usize, w: usize, index: u64) -> Result<LabeledImage> {
    generate_scene(spec, h, w, &mut rng::stream(spec.seed, Concern::Scene, index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchmarkSize {
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BenchmarkSize {
    fn default() -> Self {
        Self { n_source: 64, n_target: 64, n_test: 16, height: DEFAULT_SIZE, width: DEFAULT_SIZE }
    }
}

pub const SPLIT_SOURCE: &str = "source";
pub const SPLIT_TARGET_TRAIN: &str = "target-train";
pub const SPLIT_TARGET_TEST: &str = "target-test";
pub const HIDDEN_DIR: &str = "hidden";

fn image_rel(split: &str, i: usize) -> String {
    format!("{split}/images/{i:05}.ppm")
}

fn label_rel(split: &str, i: usize) -> String {
    if split == SPLIT_TARGET_TRAIN {
        format!("{HIDDEN_DIR}/{split}/labels/{i:05}.pgm")
    } else {
        format!("{split}/labels/{i:05}.pgm")
    }
}

/// Writes source, target-train (labels sealed under `hidden/`) and
/// target-test splits plus `manifest.txt`. Returns the manifest.
pub fn make_benchmark(
    preset_name: &str,
    source: &DomainSpec,
    target: &DomainSpec,
    size: BenchmarkSize,
    out: &Path,
) -> Result<KeyValues> {
    source.validate()?;
    target.validate()?;
    if source == target {
        return Err(Error::invalid("source and target specs are identical, including the seed"));
    }
    let BenchmarkSize { n_source, n_target, n_test, height, width } = size;
    let mut kv = KeyValues::new();
    kv.push("format", BUNDLE_FORMAT);
    kv.push("preset", preset_name);
    kv.push("height", height);
    kv.push("width", width);
    kv.push("n_source", n_source);
    kv.push("n_target", n_target);
    kv.push("n_test", n_test);
    source.write_kv(&mut kv, "source");
    target.write_kv(&mut kv, "target");

    // Test scenes continue the target index sequence after the training scenes.
    let splits: [(&str, &DomainSpec, usize, u64); 3] = [
        (SPLIT_SOURCE, source, n_source, 0),
        (SPLIT_TARGET_TRAIN, target, n_target, 0),
        (SPLIT_TARGET_TEST, target, n_test, n_target as u64),
    ];
    let mut items = Vec::new();
    for (split, spec, count, offset) in splits {
        let mut digest = Vec::new();
        for i in 0..count {
            let scene = scene_at(spec, height, width, offset + i as u64)?;
            let (img_rel, lab_rel) = (image_rel(split, i), label_rel(split, i));
            let img = io::encode_ppm(&scene.image)?;
            let lab = io::encode_pgm(width, height, scene.labels.values());
            io::write_bytes(&out.join(&img_rel), &img)?;
            io::write_bytes(&out.join(&lab_rel), &lab)?;
            digest.extend_from_slice(io::sha256_hex(&img).as_bytes());
            digest.extend_from_slice(io::sha256_hex(&lab).as_bytes());
            items.push((format!("item.{split}.{i:05}"), format!("{img_rel} {lab_rel}")));
        }
        kv.push(format!("split.{split}.count"), count);
        kv.push(format!("split.{split}.sha256"), io::sha256_hex(&digest));
    }
    for (k, v) in items {
        kv.push(k, v);
    }
    kv.save(&out.join("manifest.txt"))?;
    Ok(kv)
}

/// Rebuilds a bundle from a manifest written by [`make_benchmark`].
pub fn regenerate(manifest: &Path, out: &Path) -> Result<KeyValues> {
    let kv = KeyValues::load(manifest)?;
    if kv.get("format") != Some(BUNDLE_FORMAT) {
        return Err(Error::Format { path: manifest.to_path_buf(), msg: "not a bundle manifest".into() });
    }
    let size = BenchmarkSize {
        n_source: kv.parse_value("n_source")?,
        n_target: kv.parse_value("n_target")?,
        n_test: kv.parse_value("n_test")?,
        height: kv.parse_value("height")?,
        width: kv.parse_value("width")?,
    };
    let source = DomainSpec::read_kv(&kv, "source")?;
    let target = DomainSpec::read_kv(&kv, "target")?;
    make_benchmark(kv.require("preset")?, &source, &target, size, out)
}

/// A dataset bundle loaded from disk.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub root: PathBuf,
    pub manifest: KeyValues,
    pub source: Vec<LabeledImage>,
    pub target_train: Vec<UnlabeledImage>,
    pub target_test: Vec<LabeledImage>,
}

impl Bundle {
    /// Loads the bundle without touching `hidden/`.
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_inner(root, false)
    }

    /// Loads the bundle including the sealed target-train labels, for
    /// evaluation and auditing code.
    pub fn load_with_hidden(root: &Path) -> Result<Self> {
        Self::load_inner(root, true)
    }

    fn load_inner(root: &Path, hidden: bool) -> Result<Self> {
        let manifest = KeyValues::load(&root.join("manifest.txt"))?;
        if manifest.get("format") != Some(BUNDLE_FORMAT) {
            return Err(Error::Format { path: root.join("manifest.txt"), msg: "not a bundle manifest".into() });
        }
        let labeled = |split: &str, n: usize| -> Result<Vec<LabeledImage>> {
            (0..n)
                .map(|i| {
                    let image = io::read_ppm(&root.join(image_rel(split, i)))?;
                    let labels = io::read_labels(&root.join(label_rel(split, i)))?;
                    labels.validate(NUM_CLASSES)?;
                    LabeledImage::new(image, labels)
                })
                .collect()
        };
        let n_target: usize = manifest.parse_value("n_target")?;
        let target_train = (0..n_target)
            .map(|i| {
                let image = io::read_ppm(&root.join(image_rel(SPLIT_TARGET_TRAIN, i)))?;
                let labels = if hidden {
                    Some(io::read_labels(&root.join(label_rel(SPLIT_TARGET_TRAIN, i)))?)
                } else {
                    None
                };
                Ok(UnlabeledImage::new(image, labels))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            source: labeled(SPLIT_SOURCE, manifest.parse_value("n_source")?)?,
            target_test: labeled(SPLIT_TARGET_TEST, manifest.parse_value("n_test")?)?,
            target_train,
            manifest,
        })
    }

    /// Combined checksum of the three splits as recorded in the manifest.
    pub fn checksum(&self) -> String {
        manifest_checksum(&self.manifest)
    }
}

/// Combined checksum of the per-split digests recorded in a bundle manifest.
pub fn manifest_checksum(manifest: &KeyValues) -> String {
    let parts: Vec<&str> = [SPLIT_SOURCE, SPLIT_TARGET_TRAIN, SPLIT_TARGET_TEST]
        .iter()
        .filter_map(|s| manifest.get(&format!("split.{s}.sha256")))
        .collect();
    io::sha256_hex(parts.join(",").as_bytes())
}

/// Relative paths of every file a bundle manifest lists, plus the manifest.
pub fn manifest_files(manifest: &KeyValues) -> Vec<String> {
    let mut files = vec!["manifest.txt".to_string()];
    for (_, v) in manifest.with_prefix("item.") {
        files.extend(v.split_whitespace().map(str::to_string));
    }
    files
}

/// Builds a bundle directly in memory (no files), with target-train labels
/// attached as hidden labels.
pub fn bundle_in_memory(source: &DomainSpec, target: &DomainSpec, size: BenchmarkSize) -> Result<Bundle> {
    let gen = |spec: &DomainSpec, n: usize, offset: u64| -> Result<Vec<LabeledImage>> {
        (0..n).map(|i| scene_at(spec, size.height, size.width, offset + i as u64)).collect()
    };
    let target_train = gen(target, size.n_target, 0)?
        .into_iter()
        .map(|s| UnlabeledImage::new(s.image, Some(s.labels)))
        .collect();
    Ok(Bundle {
        root: PathBuf::new(),
        manifest: KeyValues::new(),
        source: gen(source, size.n_source, 0)?,
        target_train,
        target_test: gen(target, size.n_test, size.n_target as u64)?,
    })
}
