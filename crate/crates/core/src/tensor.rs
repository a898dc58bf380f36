//! Dense array kernels for the embedding backbone.
//!
//! Everything here is the minimum needed to run and train the small
//! convolutional stack: valid (no padding) correlation, channelwise max
//! pooling, ReLU and L2 normalization, each with an explicit backward pass.
//! Storage is `f32`, reductions accumulate in `f64`.

use crate::error::{Error, Result};

/// Row-major dense float array. Image payloads use `[H, W, C]`, convolution
/// kernel banks use `[Kh, Kw, C, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index for a `[H, W, C]` tensor.
    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        let (_h, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite value in {context}"
            )));
        }
        Ok(())
    }

    fn dims3(&self, context: &str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "{context}: expected rank-3 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }
}

/// Output extent of a valid (no padding) sliding window.
#[inline]
pub fn out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Valid cross-correlation of a `[H, W, C]` input with a `[Kh, Kw, C, F]`
/// kernel bank. Output is `[(H-Kh)/s+1, (W-Kw)/s+1, F]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w, c) = input.dims3("conv2d input")?;
    if kernels.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d kernels: expected rank-4 tensor, got shape {:?}",
            kernels.shape()
        )));
    }
    let (kh, kw, kc, f) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if stride == 0 {
        return Err(Error::Dimension("conv2d: stride must be >= 1".into()));
    }
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d: kernel channels {kc} != input channels {c}"
        )));
    }
    if kh > h || kw > w {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {kh}x{kw} exceeds input {h}x{w}"
        )));
    }
    let (oh, ow) = (out_extent(h, kh, stride), out_extent(w, kw, stride));
    let mut out = vec![0.0f32; oh * ow * f];
    let id = input.data();
    let kd = kernels.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for fi in 0..f {
                let mut acc = 0.0f64;
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    for kx in 0..kw {
                        let ix = ox * stride + kx;
                        let ibase = (iy * w + ix) * c;
                        let kbase = ((ky * kw + kx) * c) * f + fi;
                        for ci in 0..c {
                            acc += id[ibase + ci] as f64 * kd[kbase + ci * f] as f64;
                        }
                    }
                }
                out[(oy * ow + ox) * f + fi] = acc as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, f], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
///
/// `input` and `kernels` must be the tensors from the matching forward call;
/// a `grad_out` whose shape disagrees with that forward output is rejected
/// as stale state.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = input.dims3("conv2d_backward input")?;
    let (kh, kw, f) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[3]);
    let (oh, ow) = (out_extent(h, kh, stride), out_extent(w, kw, stride));
    if grad_out.shape() != [oh, ow, f] {
        return Err(Error::State(format!(
            "conv2d_backward: grad shape {:?} does not match forward output [{oh}, {ow}, {f}]",
            grad_out.shape()
        )));
    }
    let gd = grad_out.data();
    let id = input.data();
    let kd = kernels.data();
    let mut gin = vec![0.0f64; id.len()];
    let mut gker = vec![0.0f64; kd.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            for fi in 0..f {
                let g = gd[(oy * ow + ox) * f + fi] as f64;
                if g == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    for kx in 0..kw {
                        let ix = ox * stride + kx;
                        let ibase = (iy * w + ix) * c;
                        let kbase = ((ky * kw + kx) * c) * f + fi;
                        for ci in 0..c {
                            gin[ibase + ci] += g * kd[kbase + ci * f] as f64;
                            gker[kbase + ci * f] += g * id[ibase + ci] as f64;
                        }
                    }
                }
            }
        }
    }
    let gin: Vec<f32> = gin.into_iter().map(|v| v as f32).collect();
    let gker: Vec<f32> = gker.into_iter().map(|v| v as f32).collect();
    Ok((
        Tensor::new(vec![h, w, c], gin)?,
        Tensor::new(kernels.shape().to_vec(), gker)?,
    ))
}

/// Max pooling output together with the flat input index that produced each
/// output value, kept for the backward pass and for local-feature positions.
#[derive(Clone, Debug)]
pub struct MaxPool {
    pub output: Tensor,
    /// One flat index into the pooled input per output element.
    pub argmax: Vec<usize>,
}

/// Per-channel max over `kernel x kernel` windows of a `[H, W, C]` input.
/// Ties break to the first candidate in row-major scan order.
pub fn maxpool(input: &Tensor, kernel: usize, stride: usize) -> Result<MaxPool> {
    let (h, w, c) = input.dims3("maxpool input")?;
    if stride == 0 {
        return Err(Error::Dimension("maxpool: stride must be >= 1".into()));
    }
    if kernel == 0 || kernel > h.min(w) {
        return Err(Error::Dimension(format!(
            "maxpool: kernel {kernel} invalid for {h}x{w} input"
        )));
    }
    let (oh, ow) = (out_extent(h, kernel, stride), out_extent(w, kernel, stride));
    let mut out = vec![0.0f32; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    let id = input.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for ci in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..kernel {
                    let iy = oy * stride + ky;
                    for kx in 0..kernel {
                        let ix = ox * stride + kx;
                        let idx = (iy * w + ix) * c + ci;
                        if id[idx] > best {
                            best = id[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ci;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(MaxPool {
        output: Tensor::new(vec![oh, ow, c], out)?,
        argmax,
    })
}

/// Routes `grad_out` back to the argmax positions recorded by [`maxpool`];
/// every other input position receives exactly zero. Overlapping windows
/// accumulate.
pub fn maxpool_backward(
    grad_out: &Tensor,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::State(format!(
            "maxpool_backward: grad has {} values but cached argmax has {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let n: usize = input_shape.iter().product();
    let mut gin = vec![0.0f32; n];
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        if idx >= n {
            return Err(Error::State(format!(
                "maxpool_backward: cached argmax {idx} outside input of {n} values"
            )));
        }
        gin[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::State(format!(
            "relu_backward: grad shape {:?} does not match cached input shape {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape().to_vec(),
        data,
    })
}

/// Euclidean norm with `f64` accumulation.
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Scales `v` to unit Euclidean norm. The zero vector is an error: a zero
/// descriptor means a dead network and must surface, not be patched over.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(Error::Degenerate(
            "l2_normalize: zero vector has no direction".into(),
        ));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Gradient of [`l2_normalize`]: with `y = x / ||x||`,
/// `dL/dx = (g - y (g . y)) / ||x||`.
pub fn l2_normalize_backward(grad_out: &[f32], input: &[f32]) -> Result<Vec<f32>> {
    if grad_out.len() != input.len() {
        return Err(Error::State(format!(
            "l2_normalize_backward: grad length {} does not match cached input length {}",
            grad_out.len(),
            input.len()
        )));
    }
    let norm = l2_norm(input);
    if norm == 0.0 {
        return Err(Error::Degenerate(
            "l2_normalize_backward: zero-vector forward state".into(),
        ));
    }
    let y: Vec<f64> = input.iter().map(|&x| x as f64 / norm).collect();
    let gy: f64 = grad_out
        .iter()
        .zip(&y)
        .map(|(&g, &yi)| g as f64 * yi)
        .sum();
    Ok(grad_out
        .iter()
        .zip(&y)
        .map(|(&g, &yi)| ((g as f64 - yi * gy) / norm) as f32)
        .collect())
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Direct quadruple-loop correlation, independent of the strided
    /// implementation above.
    fn conv2d_oracle(input: &Tensor, kernels: &Tensor, stride: usize) -> Tensor {
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, f) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for fi in 0..f {
                    let mut acc = 0.0f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..c {
                                let iv = input.at3(oy * stride + ky, ox * stride + kx, ci) as f64;
                                let kv = kernels.data()
                                    [((ky * kw + kx) * c + ci) * f + fi]
                                    as f64;
                                acc += iv * kv;
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * f + fi] = acc as f32;
                }
            }
        }
        out
    }

    fn maxpool_oracle(input: &Tensor, kernel: usize, stride: usize) -> Tensor {
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let mut out = Tensor::zeros(vec![oh, ow, c]);
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            best = best.max(input.at3(oy * stride + ky, ox * stride + kx, ci));
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * c + ci] = best;
                }
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0, 2], vec![]).is_err());
    }

    #[test]
    fn conv2d_scalar_product() {
        let input = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let out = conv2d(&input, &kernel, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let input = Tensor::new(vec![3, 3, 1], vec![1.0; 9]).unwrap();
        let kernel = Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &kernel, 1).unwrap();
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv2d_matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor(vec![5, 5, 2], &mut rng);
        let kernels = random_tensor(vec![3, 3, 2, 4], &mut rng);
        for stride in [1, 2] {
            let got = conv2d(&input, &kernels, stride).unwrap();
            let want = conv2d_oracle(&input, &kernels, stride);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-6, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_oversized_kernel_and_bad_channels() {
        let input = Tensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap();
        let big = Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        assert!(matches!(conv2d(&input, &big, 1), Err(Error::Dimension(_))));
        let wrong_c = Tensor::new(vec![2, 2, 2, 1], vec![1.0; 8]).unwrap();
        assert!(matches!(
            conv2d(&input, &wrong_c, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(vec![4, 4, 2], &mut rng);
        let y = random_tensor(vec![4, 4, 2], &mut rng);
        let k = random_tensor(vec![2, 2, 2, 3], &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mixed = Tensor::new(
            vec![4, 4, 2],
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&xv, &yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d(&mixed, &k, 1).unwrap();
        let cx = conv2d(&x, &k, 1).unwrap();
        let cy = conv2d(&y, &k, 1).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn maxpool_two_by_two() {
        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = maxpool(&input, 2, 2).unwrap();
        assert_eq!(pooled.output.data(), &[4.0]);
        // flat index 3 == position (1, 1)
        assert_eq!(pooled.argmax, vec![3]);
    }

    #[test]
    fn maxpool_constant_input_breaks_ties_to_first_index() {
        let input = Tensor::new(vec![2, 2, 1], vec![5.0; 4]).unwrap();
        let pooled = maxpool(&input, 2, 2).unwrap();
        assert_eq!(pooled.output.data(), &[5.0]);
        assert_eq!(pooled.argmax, vec![0]);
    }

    #[test]
    fn maxpool_matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = random_tensor(vec![8, 8, 1], &mut rng);
        let got = maxpool(&input, 3, 2).unwrap();
        let want = maxpool_oracle(&input, 3, 2);
        assert_eq!(got.output, want);
    }

    #[test]
    fn maxpool_output_bounded_by_global_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let input = random_tensor(vec![7, 6, 3], &mut rng);
            let global = input.data().iter().cloned().fold(f32::MIN, f32::max);
            let pooled = maxpool(&input, 2, 1).unwrap();
            let oracle = maxpool_oracle(&input, 2, 1);
            for (i, &v) in pooled.output.data().iter().enumerate() {
                assert!(v <= global);
                assert!(v >= oracle.data()[i]);
            }
        }
    }

    #[test]
    fn maxpool_rejects_kernel_larger_than_input() {
        let input = Tensor::new(vec![2, 2, 1], vec![0.0; 4]).unwrap();
        assert!(matches!(
            maxpool(&input, 3, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_definition() {
        let input = Tensor::new(vec![1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-6);
        assert!((out[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_unit_vector_is_fixed_point() {
        let v = l2_normalize(&[0.6, 0.8]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_zero_vector_is_an_error() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn maxpool_backward_routes_only_to_argmax() {
        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let pooled = maxpool(&input, 2, 2).unwrap();
        let grad = Tensor::new(vec![1, 1, 1], vec![2.5]).unwrap();
        let gin = maxpool_backward(&grad, &pooled.argmax, input.shape()).unwrap();
        assert_eq!(gin.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn relu_backward_zero_at_negative_inputs() {
        let input = Tensor::new(vec![1, 1, 3], vec![-2.0, 0.0, 3.0]).unwrap();
        let grad = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let gin = relu_backward(&grad, &input).unwrap();
        assert_eq!(gin.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_stale_state() {
        let grad = Tensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap();
        assert!(matches!(
            maxpool_backward(&grad, &[0, 1], &[2, 2, 1]),
            Err(Error::State(_))
        ));
        let input = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            relu_backward(&grad, &input),
            Err(Error::State(_))
        ));
    }

    /// Central finite difference of a scalar loss over one tensor entry.
    fn assert_close_rel(analytic: f64, numeric: f64, rel: f64) {
        tests_support::assert_close_rel(analytic, numeric, rel, "gradient check");
    }

    /// f64 mirrors of the forward kernels, used only as the finite-difference
    /// side of gradient checks: differencing the f32 path at eps = 1e-4 would
    /// drown small gradients in evaluation rounding noise.
    mod mirror {
        pub fn conv(
            inp: &[f64],
            (h, w, c): (usize, usize, usize),
            ker: &[f64],
            (kh, kw, f): (usize, usize, usize),
            stride: usize,
        ) -> (Vec<f64>, usize, usize) {
            let oh = (h - kh) / stride + 1;
            let ow = (w - kw) / stride + 1;
            let mut out = vec![0.0; oh * ow * f];
            for oy in 0..oh {
                for ox in 0..ow {
                    for fo in 0..f {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for ch in 0..c {
                                    let iv =
                                        inp[((oy * stride + ky) * w + ox * stride + kx) * c + ch];
                                    let kv = ker[((ky * kw + kx) * c + ch) * f + fo];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[(oy * ow + ox) * f + fo] = acc;
                    }
                }
            }
            (out, oh, ow)
        }

        pub fn relu(x: &[f64]) -> Vec<f64> {
            x.iter().map(|&v| v.max(0.0)).collect()
        }

        pub fn maxpool(
            inp: &[f64],
            (h, w, c): (usize, usize, usize),
            k: usize,
            s: usize,
        ) -> (Vec<f64>, usize, usize) {
            let oh = (h - k) / s + 1;
            let ow = (w - k) / s + 1;
            let mut out = vec![0.0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut m = f64::NEG_INFINITY;
                        for ky in 0..k {
                            for kx in 0..k {
                                m = m.max(inp[((oy * s + ky) * w + ox * s + kx) * c + ch]);
                            }
                        }
                        out[(oy * ow + ox) * c + ch] = m;
                    }
                }
            }
            (out, oh, ow)
        }
    }

    fn to_f64(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    fn central_diff_f64(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    #[test]
    fn conv2d_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(vec![5, 5, 2], &mut rng);
        let kernels = random_tensor(vec![3, 3, 2, 2], &mut rng);
        // Scalar loss: weighted sum of conv output
        let weights: Vec<f32> = (0..3 * 3 * 2).map(|i| ((i % 5) as f32 - 2.0) * 0.3).collect();

        let grad_out = Tensor::new(vec![3, 3, 2], weights.clone()).unwrap();
        let (_, gker) = conv2d_backward(&grad_out, &input, &kernels, 1).unwrap();

        let input64 = to_f64(&input);
        let loss64 = |ker: &[f64]| -> f64 {
            let (out, _, _) = mirror::conv(&input64, (5, 5, 2), ker, (3, 3, 2), 1);
            out.iter().zip(&weights).map(|(o, &w)| o * w as f64).sum()
        };
        let ker64 = to_f64(&kernels);
        for i in (0..kernels.len()).step_by(7) {
            let num = central_diff_f64(&loss64, &ker64, i, 1e-4);
            assert_close_rel(gker.data()[i] as f64, num, 1e-3);
        }
    }

    #[test]
    fn all_ops_gradcheck_over_ten_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(vec![6, 6, 2], &mut rng);
            let kernels = random_tensor(vec![3, 3, 2, 2], &mut rng);
            let gw: Vec<f32> = (0..2 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();

            // analytic gradients through conv -> relu -> maxpool -> dot(gw):
            // 6x6x2 -> conv3 -> 4x4x2 -> pool2/2 -> 2x2x2
            let c = conv2d(&input, &kernels, 1).unwrap();
            let r = relu(&c);
            let p = maxpool(&r, 2, 2).unwrap();
            let gout = Tensor::new(p.output.shape().to_vec(), gw.clone()).unwrap();
            let gpool = maxpool_backward(&gout, &p.argmax, r.shape()).unwrap();
            let grelu = relu_backward(&gpool, &c).unwrap();
            let (gin, gker) = conv2d_backward(&grelu, &input, &kernels, 1).unwrap();

            let forward64 = |inp: &[f64], ker: &[f64]| -> f64 {
                let (c, oh, ow) = mirror::conv(inp, (6, 6, 2), ker, (3, 3, 2), 1);
                let r = mirror::relu(&c);
                let (p, _, _) = mirror::maxpool(&r, (oh, ow, 2), 2, 2);
                p.iter().zip(&gw).map(|(o, &w)| o * w as f64).sum()
            };
            let input64 = to_f64(&input);
            let ker64 = to_f64(&kernels);

            let f_in = |t: &[f64]| forward64(t, &ker64);
            for i in (0..input.len()).step_by(11) {
                let num = central_diff_f64(&f_in, &input64, i, 1e-4);
                assert_close_rel(gin.data()[i] as f64, num, 1e-3);
            }
            let f_ker = |t: &[f64]| forward64(&input64, t);
            for i in (0..kernels.len()).step_by(5) {
                let num = central_diff_f64(&f_ker, &ker64, i, 1e-4);
                assert_close_rel(gker.data()[i] as f64, num, 1e-3);
            }

            // l2_normalize gradcheck: finite differences over an f64 mirror of
            // y = x / ||x||, for the same evaluation-noise reason as above.
            let v: Vec<f32> = (0..6).map(|_| rng.random_range(0.2..1.0)).collect();
            let lw: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = l2_normalize_backward(&lw, &v).unwrap();
            let v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let loss64 = |x: &[f64]| -> f64 {
                let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                x.iter().zip(&lw).map(|(a, &w)| a / norm * w as f64).sum()
            };
            for i in 0..v.len() {
                let num = central_diff_f64(&loss64, &v64, i, 1e-4);
                assert_close_rel(g[i] as f64, num, 1e-3);
            }
        }
    }
}
