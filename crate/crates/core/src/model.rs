//! The segmentation network: a three-block convolutional backbone, a 1x1
//! classification head whose logits are bilinearly up-sampled to input size,
//! and the two 1x1 projectors that map visual features (`gvi`) and prior
//! embeddings (`gpr`) into a common space.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{self, Concern};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each backbone block.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub num_classes: usize,
    /// Width of the common space both projectors map into.
    pub proj_dim: usize,
    /// Dimensionality of the prior embeddings fed to `gpr`.
    pub prior_dim: usize,
    /// Multiplier on the initial standard deviation of both projectors.
    pub proj_init_gain: f64,
}

impl ModelConfig {
    /// Desk-scale default: blocks of 16, 32, 32 channels at strides 1, 2, 2.
    pub fn desk(num_classes: usize, prior_dim: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32],
            strides: vec![1, 2, 2],
            kernel: 3,
            num_classes,
            proj_dim: 32,
            prior_dim,
            proj_init_gain: 1.0,
        }
    }

    /// Spatial reduction between input and backbone features.
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::invalid("backbone widths and strides must be non-empty and equal length"));
        }
        if !(self.proj_init_gain >= 0.0) {
            return Err(Error::invalid("projector init gain must be >= 0"));
        }
        if self.kernel % 2 == 0 || self.strides.contains(&0) {
            return Err(Error::invalid("kernel must be odd and strides >= 1"));
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Recovers a configuration from checkpoint records; strides are not stored
    /// and must be supplied.
    pub fn from_records(records: &[(String, Tensor)], strides: &[usize]) -> Result<Self> {
        let shape = |name: &str| -> Result<&[usize]> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape())
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {name}")))
        };
        let mut widths = Vec::new();
        let mut in_channels = None;
        let mut kernel = 1;
        while let Ok(s) = shape(&format!("backbone.{}.weight", widths.len())) {
            in_channels.get_or_insert(s[1]);
            kernel = s[2];
            widths.push(s[0]);
        }
        if widths.len() != strides.len() {
            return Err(Error::Incompatible(format!("{} backbone blocks but {} strides", widths.len(), strides.len())));
        }
        let gpr = shape("gpr.weight")?;
        Ok(Self {
            in_channels: in_channels.unwrap_or(3),
            widths,
            strides: strides.to_vec(),
            kernel,
            num_classes: shape("head.weight")?[0],
            proj_dim: gpr[0],
            prior_dim: gpr[1],
            proj_init_gain: 1.0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

/// Learning-rate groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Projector,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("head.") {
        ParamGroup::Head
    } else if name.starts_with("gvi.") || name.starts_with("gpr.") {
        ParamGroup::Projector
    } else {
        ParamGroup::Backbone
    }
}

/// Named parameters of one network. Student and teacher share names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    role: Role,
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

/// Graph handles of a model's parameters, index-aligned with its parameter list.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Backbone features `[N, F, H/s, W/s]`.
    pub features: Var,
    /// Class logits up-sampled to `[N, C, H, W]`.
    pub logits: Var,
    /// `gvi(features)`, `[N, P, H/s, W/s]`.
    pub projected: Var,
}

/// Forward results without gradient bookkeeping.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor,
    pub logits: Tensor,
}

fn conv_weight(cout: usize, cin: usize, k: usize, std: f64, rng: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(&[cout, cin, k, k], |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

impl ModelState {
    /// He-initialised backbone, scaled-normal head and projectors, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Concern::Init, 0);
        let mut params = Vec::new();
        let mut cin = config.in_channels;
        for (i, &width) in config.widths.iter().enumerate() {
            let fan_in = (cin * config.kernel * config.kernel) as f64;
            params.push((format!("backbone.{i}.weight"), conv_weight(width, cin, config.kernel, (2.0 / fan_in).sqrt(), &mut rng)));
            params.push((format!("backbone.{i}.bias"), Tensor::zeros(&[width])));
            cin = width;
        }
        let f = config.feature_dim();
        params.push(("head.weight".into(), conv_weight(config.num_classes, f, 1, (1.0 / f as f64).sqrt(), &mut rng)));
        params.push(("head.bias".into(), Tensor::zeros(&[config.num_classes])));
        let gain = config.proj_init_gain;
        params.push(("gvi.weight".into(), conv_weight(config.proj_dim, f, 1, gain * (1.0 / f as f64).sqrt(), &mut rng)));
        let d = config.prior_dim as f64;
        params.push(("gpr.weight".into(), conv_weight(config.proj_dim, config.prior_dim, 1, gain * (1.0 / d).sqrt(), &mut rng)));
        Ok(Self { role: Role::Student, config, params })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// A teacher copy of this state (identical parameters).
    pub fn to_teacher(&self) -> Self {
        Self { role: Role::Teacher, ..self.clone() }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn param_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].1
    }

    /// Puts every parameter on `graph`. Only a student may bind trainable
    /// parameters.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<Bound> {
        if trainable && self.role == Role::Teacher {
            return Err(Error::invalid("teacher parameters never take gradients"));
        }
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape");
                if trainable {
                    graph.param(value)
                } else {
                    graph.leaf(value)
                }
            })
            .collect();
        Ok(Bound { vars })
    }

    /// Uses caller-created graph variables as this model's parameters, given
    /// in parameter order with matching shapes.
    pub fn bound_from(&self, graph: &Graph, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::dim(format!("{} variables for {} parameters", vars.len(), self.params.len())));
        }
        for ((name, t), &v) in self.params.iter().zip(&vars) {
            if graph.value(v).shape() != t.shape() {
                return Err(Error::dim(format!("{name}: variable shape {:?} vs {:?}", graph.value(v).shape(), t.shape())));
            }
        }
        Ok(Bound { vars })
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        let i = self.params.iter().position(|(n, _)| n == name).expect("parameter exists");
        bound.vars[i]
    }

    /// Backbone, head and `gvi` on an `[N, 3, H, W]` image batch.
    pub fn forward(&self, graph: &mut Graph, bound: &Bound, image: Var) -> Result<ForwardOutput> {
        let (_, c, h, w) = graph.value(image).dims4()?;
        let s = self.config.downsample();
        if c != self.config.in_channels || h % s != 0 || w % s != 0 {
            return Err(Error::dim(format!(
                "input {c}x{h}x{w}: need {} channels and sides divisible by {s}",
                self.config.in_channels
            )));
        }
        let pad = self.config.kernel / 2;
        let mut x = image;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let weight = self.var(bound, &format!("backbone.{i}.weight"));
            let bias = self.var(bound, &format!("backbone.{i}.bias"));
            x = graph.conv2d(x, weight, stride, pad)?;
            x = graph.add_bias(x, bias)?;
            x = graph.relu(x)?;
        }
        let features = x;
        let head = graph.conv2d(features, self.var(bound, "head.weight"), 1, 0)?;
        let head = graph.add_bias(head, self.var(bound, "head.bias"))?;
        let logits = graph.bilinear_resize(head, h, w)?;
        let projected = self.project_features(graph, bound, features)?;
        Ok(ForwardOutput { features, logits, projected })
    }

    /// `gvi` applied to an `[N, C, h, w]` feature map.
    pub fn project_features(&self, graph: &mut Graph, bound: &Bound, features: Var) -> Result<Var> {
        graph.conv2d(features, self.var(bound, "gvi.weight"), 1, 0)
    }

    /// `gpr` applied to an `[N, D, h, w]` embedding map.
    pub fn project_prior(&self, graph: &mut Graph, bound: &Bound, embedding_map: Var) -> Result<Var> {
        let (_, d, _, _) = graph.value(embedding_map).dims4()?;
        if d != self.config.prior_dim {
            return Err(Error::dim(format!("prior has {d} channels, model expects {}", self.config.prior_dim)));
        }
        graph.conv2d(embedding_map, self.var(bound, "gpr.weight"), 1, 0)
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let x = g.leaf(images.clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(Inference { features: g.value(out.features).clone(), logits: g.value(out.logits).clone() })
    }

    /// Gradients accumulated on `graph` for each bound parameter.
    pub fn gradients<'g>(&self, graph: &'g Graph, bound: &Bound) -> Vec<Option<&'g [f64]>> {
        bound.vars.iter().map(|&v| graph.grad(v)).collect()
    }

    fn check_compatible(&self, other: &ModelState) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Incompatible("parameter counts differ".into()));
        }
        for ((a, ta), (b, tb)) in self.params.iter().zip(&other.params) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Incompatible(format!("{a} {:?} vs {b} {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        io::encode_checkpoint(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.checkpoint_bytes())
    }

    /// Replaces parameters with the records of a checkpoint; names and shapes
    /// must match this state exactly.
    pub fn load_params(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let loaded = ModelState { role: self.role, config: self.config.clone(), params: records };
        self.check_compatible(&loaded)?;
        self.params = loaded.params;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_params(io::read_checkpoint(path)?)
    }
}

/// Loads a student checkpoint, inferring its configuration from the records.
pub fn load_student(path: &Path, strides: &[usize]) -> Result<ModelState> {
    let records = io::read_checkpoint(path)?;
    let config = ModelConfig::from_records(&records, strides)?;
    let mut state = ModelState::init(config, 0)?;
    state.load_params(records)?;
    Ok(state)
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, parameter-wise.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("EMA decay {lambda} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    for ((_, t), (_, s)) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = *tv * lambda + sv * (1.0 - lambda);
        }
    }
    Ok(())
}
