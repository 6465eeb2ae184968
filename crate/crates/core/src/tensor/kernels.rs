//! Forward kernels. The autodiff graph calls into these and adds the matching
//! backward passes; they are also usable directly when no gradient is needed.

use crate::error::{Error, Result};
use crate::label::ClassId;

use super::Tensor;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::dim(format!("kernel {kernel} exceeds padded extent {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::dim(format!("kernel expects {kcin} input channels, input has {cin}")));
        }
        let oh = conv_output_size(h, kh, stride, pad)?;
        let ow = conv_output_size(w, kw, stride, pad)?;
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// A 1x1, stride-1, unpadded convolution needs no unfolding.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index along one axis for output `o` and kernel offset `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + k) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }
}

/// Unfolds one image `[Cin, H, W]` into `[Cin*kh*kw, oh*ow]`.
pub(crate) fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let l = g.positions();
    for c in 0..g.cin {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                let out = &mut cols[row..row + l];
                for oy in 0..g.oh {
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ky, g.h) {
                        None => dst.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = g.source(ox, kx, g.w).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `[Cin*kh*kw, oh*ow]` back onto an image, accumulating overlaps.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let l = g.positions();
    for c in 0..g.cin {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                let src = &cols[row..row + l];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = op(A) (m x k) * op(B) (k x n)`, optionally accumulating into C.
/// `a_t`/`b_t` select the transposed view of a row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above guarantees every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward. Returns the output and, when `keep_cols`, the unfolded
/// patches of every image for reuse in the backward pass.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Tensor, Vec<f64>) {
    let (k, l) = (g.patch(), g.positions());
    let mut out = vec![0.0; g.n * g.cout * l];
    let mut kept = if keep_cols && !g.is_pointwise() { Vec::with_capacity(g.n * k * l) } else { Vec::new() };
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * l }];
    for i in 0..g.n {
        let image = &input.data()[i * g.in_plane()..(i + 1) * g.in_plane()];
        let patches: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(g.cout, k, l, kernel.data(), false, patches, false, &mut out[i * g.cout * l..(i + 1) * g.cout * l], false);
        if keep_cols && !g.is_pointwise() {
            kept.extend_from_slice(&cols);
        }
    }
    let t = Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out).expect("conv output shape");
    (t, kept)
}

/// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    Ok(conv2d_forward(input, kernel, &g, false).0)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Adds `bias[c]` to every element of channel `c`.
pub(crate) fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if bias.numel() != c {
        return Err(Error::dim(format!("bias of {} for {c} channels", bias.numel())));
    }
    let mut data = input.data().to_vec();
    let plane = h * w;
    for (i, chunk) in data.chunks_mut(plane).enumerate().take(n * c) {
        let b = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(input.shape().to_vec(), data)
}

/// Per-axis interpolation taps for half-pixel (align-corners-false) bilinear
/// sampling: output index `d` reads source coordinate `(d + 0.5) * in/out - 0.5`,
/// clamped to `[0, in - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl BilinearTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut taps = Self { lo: Vec::with_capacity(output), hi: Vec::with_capacity(output), w_hi: Vec::with_capacity(output) };
        for d in 0..output {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_hi.push(s - lo as f64);
        }
        taps
    }
}

pub(crate) fn bilinear_planes(input: &Tensor, rows: &BilinearTaps, cols: &BilinearTaps) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for y in 0..oh {
            let (r0, r1, wy) = (rows.lo[y] * w, rows.hi[y] * w, rows.w_hi[y]);
            for x in 0..ow {
                let (c0, c1, wx) = (cols.lo[x], cols.hi[x], cols.w_hi[x]);
                let top = plane[r0 + c0] * (1.0 - wx) + plane[r0 + c1] * wx;
                let bottom = plane[r1 + c0] * (1.0 - wx) + plane[r1 + c1] * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Bilinear resampling of every `[H, W]` plane to `[out_h, out_w]`.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    bilinear_planes(input, &BilinearTaps::new(h, out_h), &BilinearTaps::new(w, out_w))
}

/// Nearest source index under the half-pixel convention: the source pixel
/// whose centre is closest to `(d + 0.5) * in/out - 0.5`, rounding half up.
pub fn nearest_indices(input: usize, output: usize) -> Vec<usize> {
    (0..output).map(|d| ((2 * d + 1) * input / (2 * output)).min(input - 1)).collect()
}

pub fn nearest_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let rows = nearest_indices(h, out_h);
    let cols = nearest_indices(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &sy in &rows {
            out.extend(cols.iter().map(|&sx| plane[sy * w + sx]));
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub(crate) struct CrossEntropy {
    pub loss: f64,
    /// Softmax probabilities, same layout as the logits.
    pub probs: Vec<f64>,
    pub counted: usize,
}

pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[ClassId], ignore: ClassId) -> Result<CrossEntropy> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::dim(format!("{} labels for logits {:?}", labels.len(), logits.shape())));
    }
    let x = logits.data();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..n {
        for p in 0..plane {
            let base = i * c * plane + p;
            let max = (0..c).map(|k| x[base + k * plane]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..c).map(|k| (x[base + k * plane] - max).exp()).sum();
            let log_denom = denom.ln();
            for k in 0..c {
                probs[base + k * plane] = (x[base + k * plane] - max - log_denom).exp();
            }
            let label = labels[i * plane + p];
            if label == ignore {
                continue;
            }
            if label as usize >= c {
                return Err(Error::invalid(format!("label {label} outside [0, {c})")));
            }
            total -= x[base + label as usize * plane] - max - log_denom;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("cross-entropy over zero labelled pixels"));
    }
    Ok(CrossEntropy { loss: total / counted as f64, probs, counted })
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[ClassId], ignore: ClassId) -> Result<f64> {
    cross_entropy_forward(logits, labels, ignore).map(|ce| ce.loss)
}

/// Number of channel vectors compared by [`sum_squared_error`]: the channel
/// axis is 1 for rank >= 2 tensors and the whole tensor for rank 1.
pub(crate) fn sse_positions(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => 1,
        _ => shape.iter().product::<usize>() / shape[1],
    }
}

/// Mean over spatial positions of the squared channel-vector distance.
pub fn sum_squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("sse of {:?} and {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / sse_positions(a.shape()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| (i as f64).sin());
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(Error::Dimension(_))));
        let big = Tensor::zeros(&[1, 2, 7, 7]);
        assert!(conv2d(&x, &big, 1, 1).is_err());
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(64, 3, 2, 1).unwrap(), 32);
        assert_eq!(conv_output_size(5, 3, 1, 0).unwrap(), 3);
        assert!(conv_output_size(5, 3, 0, 0).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn bilinear_two_by_two_to_one() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 1, 1).unwrap().data(), &[1.5]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::full(&[1, 2, 5, 7], 7.0);
        for (h, w) in [(1, 1), (3, 9), (10, 14)] {
            assert!(bilinear_resize(&x, h, w).unwrap().data().iter().all(|&v| v == 7.0));
        }
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 5, 6], |i| (i as f64 * 0.37).cos());
        assert_eq!(bilinear_resize(&x, 5, 6).unwrap().data(), x.data());
    }

    #[test]
    fn nearest_decimation_takes_every_other_pixel() {
        assert_eq!(nearest_indices(8, 4), vec![1, 3, 5, 7]);
        assert_eq!(nearest_indices(8, 2), vec![2, 6]);
        assert_eq!(nearest_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros(&[1, 4, 2, 3]);
        let loss = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 0, 1], 255).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_saturate() {
        let mut logits = Tensor::zeros(&[1, 3, 1, 2]);
        // pixel 0 -> class 2, pixel 1 -> class 0, margin 20
        logits.data_mut()[2 * 2] = 20.0;
        logits.data_mut()[1] = 20.0;
        let loss = softmax_cross_entropy(&logits, &[2, 0], 255).unwrap();
        assert!(loss < 1e-8, "{loss}");
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::zeros(&[1, 2, 1, 2]);
        assert!(softmax_cross_entropy(&logits, &[255, 255], 255).is_err());
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let logits = Tensor::new(vec![1, 2, 1, 2], vec![3.0, -1.0, 0.0, 5.0]).unwrap();
        let only_first = softmax_cross_entropy(&logits, &[0, 255], 255).unwrap();
        let expected = -(3f64 - (3f64.exp() + 1.0).ln());
        assert!((only_first - expected).abs() < 1e-12);
    }

    #[test]
    fn sse_examples() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(sum_squared_error(&a, &b).unwrap(), 5.0);
        assert_eq!(sum_squared_error(&a, &a).unwrap(), 0.0);
        assert!(sum_squared_error(&a, &Tensor::zeros(&[3])).is_err());
    }
}
