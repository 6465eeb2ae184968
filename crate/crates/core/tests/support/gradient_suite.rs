//! Central finite-difference checks (eps = 1e-4, norm-wise relative error
//! below 1e-3) for every differentiable operation and for both training
//! losses on a small two-block model with 8x8 inputs.
//!
//! Each check returns a description of every failing case, so callers can
//! either assert on it or report it.

use dap_lab::label::LabelMap;
use dap_lab::model::{ModelConfig, ModelState};
use dap_lab::priors::{build_one_hot, build_random, Interp};
use dap_lab::rng::{stream, Concern};
use dap_lab::tensor::gradcheck::{check, GradReport};
use dap_lab::tensor::{Graph, Tensor, Var};
use dap_lab::trainer::dap_term;
use dap_lab::{Result, CLASS_NAMES, IGNORE_ID};
use rand::Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

pub type Failures = Vec<String>;

fn random(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = stream(seed, Concern::Init, 1000 + salt);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_labels(h: usize, w: usize, seed: u64, salt: u64, with_ignore: bool) -> LabelMap {
    let mut rng = stream(seed, Concern::Subset, 1000 + salt);
    let values = (0..h * w)
        .map(|_| if with_ignore && rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..6u8) })
        .collect();
    LabelMap::new(h, w, values).unwrap()
}

/// Agreement on smooth coordinates. One pre-activation sitting on a ReLU
/// kink affects every weight feeding its channel, so up to a quarter of a
/// tensor may be dropped.
pub fn passes(r: &GradReport) -> bool {
    r.relative_error < TOL && r.kinks * 4 <= r.len
}

fn collect(name: &str, seed: u64, reports: &[GradReport], failures: &mut Failures) {
    for (i, r) in reports.iter().enumerate() {
        if !passes(r) {
            failures.push(format!("{name} seed {seed} input {i}: {r:?}"));
        }
    }
}

fn op_check(name: &str, inputs: impl Fn(u64) -> Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Failures {
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        match check(&inputs(seed), EPS, &f) {
            Ok(reports) => collect(name, seed, &reports, &mut failures),
            Err(e) => failures.push(format!("{name} seed {seed}: {e}")),
        }
    }
    failures
}

/// Contracts an output tensor with fixed random weights so every element
/// contributes to the scalar being checked.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = g.leaf(random(g.value(v).shape(), seed, 99));
    let p = g.mul(v, w)?;
    g.sum(p)
}

pub fn conv2d_strided_and_padded() -> Failures {
    let mut failures = Vec::new();
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        failures.extend(op_check(
            &format!("conv2d s{stride} p{pad}"),
            |s| vec![random(&[2, 3, 6, 6], s, 0), random(&[4, 3, 3, 3], s, 1)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(g, y, 5)
            },
        ));
    }
    failures
}

pub fn pointwise_conv() -> Failures {
    op_check(
        "conv2d 1x1",
        |s| vec![random(&[1, 5, 4, 4], s, 0), random(&[3, 5, 1, 1], s, 1)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 0)?;
            weighted_sum(g, y, 6)
        },
    )
}

pub fn bias_relu_add_scale_mul() -> Failures {
    op_check(
        "bias/relu/add/scale/mul",
        |s| vec![random(&[2, 3, 4, 4], s, 0), random(&[3], s, 1), random(&[2, 3, 4, 4], s, 2)],
        |g, v| {
            let b = g.add_bias(v[0], v[1])?;
            let r = g.relu(b)?;
            let a = g.add(r, v[2])?;
            let s = g.scale(a, -1.7)?;
            let m = g.mul(s, v[2])?;
            weighted_sum(g, m, 7)
        },
    )
}

pub fn bilinear_up_and_down() -> Failures {
    let mut failures = Vec::new();
    for (oh, ow) in [(8, 8), (2, 3), (5, 5)] {
        failures.extend(op_check(
            &format!("bilinear to {oh}x{ow}"),
            |s| vec![random(&[1, 2, 4, 4], s, 0)],
            |g, v| {
                let y = g.bilinear_resize(v[0], oh, ow)?;
                weighted_sum(g, y, 8)
            },
        ));
    }
    failures
}

fn scaled(mut t: Tensor, k: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= k);
    t
}

pub fn cross_entropy_with_ignore() -> Failures {
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        let labels = random_labels(4, 4, seed, 0, true);
        match check(&[scaled(random(&[1, 6, 4, 4], seed, 0), 3.0)], EPS, |g, v| g.cross_entropy(v[0], labels.values(), IGNORE_ID)) {
            Ok(reports) => collect("cross_entropy", seed, &reports, &mut failures),
            Err(e) => failures.push(format!("cross_entropy seed {seed}: {e}")),
        }
    }
    failures
}

pub fn squared_error() -> Failures {
    op_check(
        "sum_squared_error",
        |s| vec![random(&[1, 5, 3, 3], s, 0), random(&[1, 5, 3, 3], s, 1)],
        |g, v| g.sum_squared_error(v[0], v[1]),
    )
}

fn small_model(seed: u64, prior_dim: usize) -> ModelState {
    let config = ModelConfig {
        in_channels: 3,
        widths: vec![4, 6],
        strides: vec![1, 2],
        kernel: 3,
        num_classes: 6,
        proj_dim: 5,
        prior_dim,
        proj_init_gain: 1.0,
    };
    ModelState::init(config, seed).unwrap()
}

fn image(seed: u64, salt: u64) -> Tensor {
    let mut rng = stream(seed, Concern::Augment, 2000 + salt);
    Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random_range(0.0..1.0))
}

fn model_inputs(model: &ModelState) -> Vec<Tensor> {
    model.params().iter().map(|(_, t)| t.clone()).collect()
}

/// Checks every parameter, requiring an exactly zero gradient for the
/// parameters the loss does not reach.
fn model_check(
    name: &str,
    seed: u64,
    model: &ModelState,
    unreached: &[&str],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    failures: &mut Failures,
) {
    let reports = match check(&model_inputs(model), EPS, f) {
        Ok(r) => r,
        Err(e) => return failures.push(format!("{name} seed {seed}: {e}")),
    };
    for ((param, _), r) in model.params().iter().zip(&reports) {
        if unreached.iter().any(|p| param.starts_with(p)) {
            if r.analytic_norm != 0.0 {
                failures.push(format!("{name} seed {seed}: {param} must not receive a gradient"));
            }
        } else if !passes(r) {
            failures.push(format!("{name} seed {seed} {param}: {r:?}"));
        }
    }
}

pub fn segmentation_loss_path() -> Failures {
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        let model = small_model(seed, 6);
        let (xs, xm) = (image(seed, 0), image(seed, 1));
        let (ys, ym) = (random_labels(8, 8, seed, 1, true), random_labels(8, 8, seed, 2, false));
        let loss = |g: &mut Graph, v: &[Var]| {
            let bound = model.bound_from(g, v.to_vec())?;
            let (a, b) = (g.leaf(xs.clone()), g.leaf(xm.clone()));
            let out_s = model.forward(g, &bound, a)?;
            let out_m = model.forward(g, &bound, b)?;
            let ce_s = g.cross_entropy(out_s.logits, ys.values(), IGNORE_ID)?;
            let ce_m = g.cross_entropy(out_m.logits, ym.values(), IGNORE_ID)?;
            g.add(ce_s, ce_m)
        };
        model_check("segmentation loss", seed, &model, &["gvi", "gpr"], loss, &mut failures);
    }
    failures
}

pub fn alignment_loss_path() -> Failures {
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        let prior = if seed % 2 == 0 { build_one_hot(&CLASS_NAMES).unwrap() } else { build_random(&CLASS_NAMES, 7, seed).unwrap() };
        let model = small_model(seed, prior.dim());
        let interp = if seed % 3 == 0 { Interp::Nearest } else { Interp::Bilinear };
        let (xs, xm) = (image(seed, 2), image(seed, 3));
        let (ys, ym) = (random_labels(8, 8, seed, 3, true), random_labels(8, 8, seed, 4, false));
        let loss = |g: &mut Graph, v: &[Var]| {
            let bound = model.bound_from(g, v.to_vec())?;
            let (a, b) = (g.leaf(xs.clone()), g.leaf(xm.clone()));
            let out_s = model.forward(g, &bound, a)?;
            let out_m = model.forward(g, &bound, b)?;
            let d_s = dap_term(&model, g, &bound, out_s.projected, &ys, &prior, interp)?;
            let d_m = dap_term(&model, g, &bound, out_m.projected, &ym, &prior, interp)?;
            g.add(d_s, d_m)
        };
        model_check("alignment loss", seed, &model, &["head"], loss, &mut failures);
    }
    failures
}

/// Every check above, in order. Used by the acceptance target.
#[allow(dead_code)]
pub fn all() -> Failures {
    [
        conv2d_strided_and_padded,
        pointwise_conv,
        bias_relu_add_scale_mul,
        bilinear_up_and_down,
        cross_entropy_with_ignore,
        squared_error,
        segmentation_loss_path,
        alignment_loss_path,
    ]
    .iter()
    .flat_map(|check| check())
    .collect()
}
