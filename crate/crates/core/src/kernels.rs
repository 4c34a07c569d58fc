//! Forward and backward kernels shared by the autodiff graph and the
//! graph-free evaluation path. All functions are pure.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be 4-d, got {input:?}")));
        };
        let [out_channels, w_in, kernel_h, kernel_w] = *weight else {
            return Err(Error::shape("conv2d", format!("weight must be 4-d, got {weight:?}")));
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if w_in != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_channels} channels but weight expects {w_in}"),
            ));
        }
        let (ph, pw) = (in_h + 2 * padding, in_w + 2 * padding);
        if kernel_h > ph || kernel_w > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} exceeds padded input {ph}x{pw}"),
            ));
        }
        if (ph - kernel_h) % stride != 0 || (pw - kernel_w) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {ph}x{pw} with kernel {kernel_h}x{kernel_w} is not divisible by stride {stride}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds one sample `[C, H, W]` into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let p = g.out_positions();
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto a `[C, H, W]` input gradient (accumulating).
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let p = g.out_positions();
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation without bias. Returns the output and the unfolded
/// patches (`[N, C*kh*kw, out_h*out_w]`) for reuse in the backward pass.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (k, p) = (g.patch_len(), g.out_positions());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * p;
    let mut cols = vec![T::zero(); g.batch * k * p];
    let mut out = vec![T::zero(); g.batch * out_len];
    for n in 0..g.batch {
        let c = &mut cols[n * k * p..(n + 1) * k * p];
        im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], c);
        T::gemm(
            g.out_channels,
            k,
            p,
            T::one(),
            weight.data(),
            (k as isize, 1),
            c,
            (p as isize, 1),
            T::zero(),
            &mut out[n * out_len..(n + 1) * out_len],
            (p as isize, 1),
        );
    }
    Ok((Tensor::new(g.output_shape().to_vec(), out)?, cols))
}

/// Gradients of a convolution with respect to its weight and (optionally) input.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    weight: &[T],
    cols: &[T],
    need_input_grad: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (k, p) = (g.patch_len(), g.out_positions());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * p;
    let mut dw = vec![T::zero(); g.out_channels * k];
    let mut dx = need_input_grad.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dcols = vec![T::zero(); if need_input_grad { k * p } else { 0 }];
    for n in 0..g.batch {
        let dout = &grad_out[n * out_len..(n + 1) * out_len];
        // dW += dOut_n * cols_n^T
        T::gemm(
            g.out_channels,
            p,
            k,
            T::one(),
            dout,
            (p as isize, 1),
            &cols[n * k * p..(n + 1) * k * p],
            (1, p as isize),
            T::one(),
            &mut dw,
            (k as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dOut_n
            T::gemm(
                k,
                g.out_channels,
                p,
                T::one(),
                weight,
                (1, k as isize),
                dout,
                (p as isize, 1),
                T::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            col2im(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dw, dx)
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    conv2d_forward(input, weight, stride, padding).map(|(out, _)| out)
}

/// `y = x W^T + b` for `x: [N, D_in]`, `W: [D_out, D_in]`, `b: [D_out]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d_in) = input.dims2("dense")?;
    let (d_out, w_in) = weight.dims2("dense")?;
    if w_in != d_in {
        return Err(Error::shape("dense", format!("input width {d_in} but weight expects {w_in}")));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape("dense", format!("bias shape {:?}, expected [{d_out}]", bias.shape())));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        n,
        d_in,
        d_out,
        T::one(),
        input.data(),
        (d_in as isize, 1),
        weight.data(),
        (1, d_in as isize),
        T::one(),
        &mut out,
        (d_out as isize, 1),
    );
    Tensor::new(vec![n, d_out], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = weight.shape()[0];
    let mut dx = vec![T::zero(); n * d_in];
    T::gemm(n, d_out, d_in, T::one(), grad_out, (d_out as isize, 1), weight.data(), (d_in as isize, 1), T::zero(), &mut dx, (d_in as isize, 1));
    let mut dw = vec![T::zero(); d_out * d_in];
    T::gemm(d_out, n, d_in, T::one(), grad_out, (1, d_out as isize), input.data(), (d_in as isize, 1), T::zero(), &mut dw, (d_in as isize, 1));
    let mut db = vec![T::zero(); d_out];
    for row in grad_out.chunks_exact(d_out) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    (dx, dw, db)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// ReLU backward; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &[T], grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// Non-overlapping `size x size` average pooling; trailing rows/columns that
/// do not fill a window are dropped.
pub fn avg_pool<T: Scalar>(input: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool")?;
    if size == 0 || size > h || size > w {
        return Err(Error::shape("avg_pool", format!("window {size} does not fit {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let scale = T::one() / T::lit((size * size) as f64);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..size {
                    for dx in 0..size {
                        acc += src[(oy * size + dy) * w + ox * size + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Scalar>(input_shape: &[usize], size: usize, grad_out: &[T]) -> Vec<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / size, w / size);
    let scale = T::one() / T::lit((size * size) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * scale;
                for dy in 0..size {
                    for dx in 0..size {
                        dst[(oy * size + dy) * w + ox * size + dx] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Collapses every dimension after the first.
pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    input.reshape(&[n, input.len() / n])
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// row-wise softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (n, classes) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut probs = vec![T::zero(); n * classes];
    let mut total = T::zero();
    for (i, row) in logits.data().chunks_exact(classes).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (p, &z) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
            *p = (z - max).exp();
            denom += *p;
        }
        for p in &mut probs[i * classes..(i + 1) * classes] {
            *p /= denom;
        }
        total += max + denom.ln() - row[labels[i]];
    }
    Ok((total / T::lit(n as f64), probs))
}

/// `(softmax - onehot) / N`, scaled by the upstream gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], upstream: T) -> Vec<T> {
    let n = labels.len();
    let classes = probs.len() / n;
    let scale = upstream / T::lit(n as f64);
    let mut grad: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        grad[i * classes + l] -= scale;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_ones_sums_window() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_weight_gives_zero() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 5], |i| (i as f32).cos());
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::ones(&[1, 2, 4, 4]);
        assert!(matches!(conv2d(&x, &Tensor::ones(&[1, 3, 3, 3]), 1, 0), Err(Error::Shape { .. })));
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 5, 5]), 1, 0).is_err());
        // (4 - 3) / 2 is not integral
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 3, 3]), 2, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 3, 3]), 0, 0).is_err());
    }

    #[test]
    fn strided_padded_conv_shape() {
        let x = Tensor::<f32>::ones(&[2, 1, 5, 5]);
        let y = conv2d(&x, &Tensor::ones(&[3, 1, 3, 3]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        // corner sees a 2x2 patch of ones, centre a full 3x3 window
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 1.5);
        let eye = Tensor::<f32>::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = dense(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        let b = Tensor::<f32>::from_slice(&[2], &[0.5, -1.0]).unwrap();
        let y = dense(&Tensor::zeros(&[3, 4]), &Tensor::ones(&[2, 4]), &b).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        assert!(dense(&x, &Tensor::ones(&[2, 4]), &b).is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::from_slice(&[3], &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&x.map(|v| -v.abs() - 1.0)).data().iter().all(|&v| v == 0.0));
        assert_eq!(relu_backward(x.data(), &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn avg_pool_floors_odd_sizes() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[(0.0 + 1.0 + 3.0 + 4.0) / 4.0]);
        let dx = avg_pool_backward(x.shape(), 2, &[4.0f32]);
        assert_eq!(dx, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn confident_correct_logit_has_vanishing_loss() {
        let mut logits = Tensor::<f64>::zeros(&[1, 10]);
        logits.data_mut()[3] = 1e3;
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 10]);
        assert_eq!(
            softmax_cross_entropy(&logits, &[10]).unwrap_err(),
            Error::LabelOutOfRange { label: 10, classes: 10 }
        );
    }
}
