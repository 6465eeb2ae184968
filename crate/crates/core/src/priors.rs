//! Domain-agnostic class priors: one frozen embedding vector per class, and
//! the construction of spatial embedding maps from label maps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io;
use crate::label::{LabelMap, IGNORE_ID};
use crate::rng::{self, Concern};
use crate::tensor::{self, Tensor};

/// Word-level aliases tried when a class name is missing from a vector file.
pub const ALIASES: &[(&str, &[&str])] = &[
    ("bike", &["bicycle"]),
    ("motorbike", &["motorcycle"]),
    ("sidewalk", &["pavement"]),
    ("person", &["pedestrian"]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    OneHot,
    Random,
    Loaded,
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::OneHot => "onehot",
            PriorKind::Random => "random",
            PriorKind::Loaded => "file",
        })
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" | "one-hot" => Ok(PriorKind::OneHot),
            "random" => Ok(PriorKind::Random),
            "file" | "loaded" => Ok(PriorKind::Loaded),
            other => Err(Error::invalid(format!("unknown prior kind {other:?}"))),
        }
    }
}

/// How the full-resolution embedding map is brought to feature resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interp::Bilinear => "bilinear",
            Interp::Nearest => "nearest",
        })
    }
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interp::Bilinear),
            "nearest" => Ok(Interp::Nearest),
            other => Err(Error::invalid(format!("unknown interpolation {other:?}"))),
        }
    }
}

/// One fixed vector per class. Immutable after construction and never part
/// of any gradient computation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    kind: PriorKind,
    dim: usize,
    /// `C x D`, row-major.
    vectors: Vec<f64>,
    class_names: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(kind: PriorKind, dim: usize, vectors: Vec<f64>, class_names: Vec<String>) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * class_names.len() {
            return Err(Error::dim(format!(
                "{} values for {} classes of dimension {dim}",
                vectors.len(),
                class_names.len()
            )));
        }
        Ok(Self { kind, dim, vectors, class_names })
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        &self.vectors[class * self.dim..(class + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks(self.dim)
    }

    /// Same set with rows reordered: row `i` of the result is row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.num_classes() {
            return Err(Error::dim("permutation length"));
        }
        let vectors = order.iter().flat_map(|&i| self.vector(i).to_vec()).collect();
        let names = order.iter().map(|&i| self.class_names[i].clone()).collect();
        Self::new(self.kind, self.dim, vectors, names)
    }

    /// Writes the vector text format (`D <int>` header, one `name v1 .. vD` row per class).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("D {}\n", self.dim);
        for (name, row) in self.class_names.iter().zip(self.rows()) {
            s.push_str(name);
            for v in row {
                s.push(' ');
                s.push_str(&format!("{v:e}"));
            }
            s.push('\n');
        }
        io::write_bytes(path, s.as_bytes())
    }
}

fn names_of(class_names: &[&str]) -> Vec<String> {
    class_names.iter().map(|s| s.to_string()).collect()
}

/// Standard basis vectors, `D == C`.
pub fn build_one_hot(class_names: &[&str]) -> Result<EmbeddingSet> {
    let c = class_names.len();
    if c < 2 {
        return Err(Error::invalid("one-hot priors need at least 2 classes"));
    }
    let vectors = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
    EmbeddingSet::new(PriorKind::OneHot, c, vectors, names_of(class_names))
}

/// I.i.d. standard-normal rows scaled to unit L2 norm, deterministic in `seed`.
pub fn build_random(class_names: &[&str], dim: usize, seed: u64) -> Result<EmbeddingSet> {
    if dim < 2 {
        return Err(Error::invalid("random priors need D >= 2"));
    }
    let mut rng = rng::stream(seed, Concern::Prior, 0);
    let mut vectors = Vec::with_capacity(class_names.len() * dim);
    for _ in class_names {
        let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        vectors.extend(row.iter().map(|v| v / norm));
    }
    EmbeddingSet::new(PriorKind::Random, dim, vectors, names_of(class_names))
}

/// Parses a vector file and resolves each class name (case-insensitively,
/// then through [`ALIASES`]). Rows come out in `class_names` order; vectors
/// are used as stored, without renormalisation.
pub fn parse_vectors(text: &str, class_names: &[&str]) -> Result<EmbeddingSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty vector file".into() })?;
    let dim = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["D", d] => d.parse::<usize>().ok().filter(|&d| d > 0),
        _ => None,
    }
    .ok_or(Error::Parse { line: 1, msg: format!("expected `D <int>` header, got {header:?}") })?;

    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    for (n, line) in lines {
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_lowercase();
        let values = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::Parse { line: n + 1, msg: format!("bad number in row {name:?}") })?;
        if values.len() != dim {
            return Err(Error::Parse { line: n + 1, msg: format!("row {name:?} has {} values, expected {dim}", values.len()) });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: n + 1, msg: format!("non-finite value in row {name:?}") });
        }
        table.push((name, values));
    }

    let lookup = |key: &str| table.iter().find(|(n, _)| n == key).map(|(_, v)| v);
    let mut vectors = Vec::with_capacity(class_names.len() * dim);
    for &class in class_names {
        let lower = class.to_lowercase();
        let aliases = ALIASES.iter().find(|(c, _)| *c == lower).map_or(&[][..], |(_, a)| *a);
        let row = std::iter::once(lower.as_str())
            .chain(aliases.iter().copied())
            .find_map(lookup)
            .ok_or_else(|| Error::UnresolvedClass(class.to_string()))?;
        vectors.extend_from_slice(row);
    }
    EmbeddingSet::new(PriorKind::Loaded, dim, vectors, names_of(class_names))
}

pub fn load_vectors(path: &Path, class_names: &[&str]) -> Result<EmbeddingSet> {
    parse_vectors(&io::read_text(path)?, class_names)
}

/// Pastes `e_{label(p)}` at every pixel; ignore pixels get the zero vector.
/// Output is `[N, D, H, W]`.
pub fn proj(labels: &[&LabelMap], prior: &EmbeddingSet) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| Error::invalid("proj of empty label batch"))?;
    let (h, w, d) = (first.height(), first.width(), prior.dim());
    let plane = h * w;
    let mut data = vec![0.0; labels.len() * d * plane];
    for (i, map) in labels.iter().enumerate() {
        if map.height() != h || map.width() != w {
            return Err(Error::dim("label maps in a batch differ in size"));
        }
        let out = &mut data[i * d * plane..(i + 1) * d * plane];
        for (p, &class) in map.values().iter().enumerate() {
            if class == IGNORE_ID {
                continue;
            }
            if class as usize >= prior.num_classes() {
                return Err(Error::invalid(format!("label {class} has no prior vector")));
            }
            for (k, &v) in prior.vector(class as usize).iter().enumerate() {
                out[k * plane + p] = v;
            }
        }
    }
    Tensor::new(vec![labels.len(), d, h, w], data)
}

/// Resamples an embedding map to feature resolution.
pub fn downsample_embedding(map: &Tensor, h: usize, w: usize, mode: Interp) -> Result<Tensor> {
    let (_, _, mh, mw) = map.dims4()?;
    if h > mh || w > mw {
        return Err(Error::invalid(format!("cannot down-sample {mh}x{mw} to {h}x{w}")));
    }
    match mode {
        Interp::Bilinear => tensor::bilinear_resize(map, h, w),
        Interp::Nearest => tensor::nearest_resize(map, h, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::CLASS_NAMES;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn one_hot_is_identity() {
        let e = build_one_hot(&["a", "b", "c"]).unwrap();
        assert_eq!(e.vector(0), &[1.0, 0.0, 0.0]);
        assert_eq!(e.vector(1), &[0.0, 1.0, 0.0]);
        assert_eq!(e.vector(2), &[0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert_eq!(dot(e.vector(i), e.vector(i)), 1.0);
            for j in 0..3 {
                if i != j {
                    assert_eq!(dot(e.vector(i), e.vector(j)), 0.0);
                }
            }
        }
        assert!(build_one_hot(&["solo"]).is_err());
    }

    #[test]
    fn random_rows_are_unit_and_seeded() {
        let a = build_random(&CLASS_NAMES, 300, 4).unwrap();
        let b = build_random(&CLASS_NAMES, 300, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_random(&CLASS_NAMES, 300, 5).unwrap());
        for row in a.rows() {
            assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(build_random(&CLASS_NAMES, 1, 0).is_err());
    }

    #[test]
    fn random_rows_are_nearly_orthogonal() {
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..20 {
            let e = build_random(&CLASS_NAMES, 300, seed).unwrap();
            for i in 0..6 {
                for j in i + 1..6 {
                    total += dot(e.vector(i), e.vector(j)).abs();
                    count += 1;
                }
            }
        }
        assert!(total / (count as f64) < 0.15);
    }

    #[test]
    fn missing_class_is_named() {
        let text = "D 2\nroad 1 0\nsky 0 1\nbuilding 1 1\nbicycle 0.5 0.5\nmotorbike 2 2\n";
        let err = parse_vectors(text, &CLASS_NAMES).unwrap_err();
        assert_eq!(err.to_string(), "class sidewalk unresolved");
    }

    #[test]
    fn aliases_and_case_are_resolved() {
        let text = "D 2\nROAD 1 0\nPavement 0 1\nsky 1 1\nbuilding 2 0\nbicycle 0.5 0.5\nMotorcycle 3e-1 -1.5E0\nextra 9 9\n";
        let e = parse_vectors(text, &CLASS_NAMES).unwrap();
        assert_eq!(e.kind(), PriorKind::Loaded);
        assert_eq!(e.vector(1), &[0.0, 1.0]);
        assert_eq!(e.vector(4), &[0.5, 0.5]);
        assert_eq!(e.vector(5), &[0.3, -1.5]);
    }

    #[test]
    fn ragged_row_reports_line() {
        let text = "D 3\nroad 1 2 3\nsidewalk 1 2\n";
        match parse_vectors(text, &CLASS_NAMES) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_vectors("dim 3\n", &CLASS_NAMES), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn proj_matches_figure_layout() {
        let e = build_random(&["c0", "c1", "c2", "c3"], 5, 1).unwrap();
        let labels = LabelMap::new(2, 2, vec![1, 1, 2, 3]).unwrap();
        let map = proj(&[&labels], &e).unwrap();
        assert_eq!(map.shape(), &[1, 5, 2, 2]);
        for (p, class) in [1usize, 1, 2, 3].into_iter().enumerate() {
            let got: Vec<f64> = (0..5).map(|k| map.data()[k * 4 + p]).collect();
            assert_eq!(got, e.vector(class));
        }
    }

    #[test]
    fn proj_zeroes_ignore_pixels_and_one_hot_sums_to_one() {
        let e = build_one_hot(&CLASS_NAMES).unwrap();
        let labels = LabelMap::new(1, 3, vec![0, IGNORE_ID, 5]).unwrap();
        let map = proj(&[&labels], &e).unwrap();
        let sums: Vec<f64> = (0..3).map(|p| (0..6).map(|k| map.data()[k * 3 + p]).sum()).collect();
        assert_eq!(sums, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn downsample_rejects_upsampling() {
        let map = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(downsample_embedding(&map, 8, 4, Interp::Bilinear).is_err());
        assert_eq!(downsample_embedding(&map, 4, 4, Interp::Nearest).unwrap(), map);
    }
}
