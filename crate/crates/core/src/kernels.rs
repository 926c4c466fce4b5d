//! Raw forward/backward kernels behind the graph ops. Layout is NHWC throughout;
//! convolution kernels are `[kh, kw, cin, cout]`, which row-major is exactly the
//! `(kh*kw*cin) x cout` matrix the im2col product needs.

use crate::tensor::{matmul, MatRef, Scalar};

/// Geometry of a "same"-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent and leading pad of one spatial axis under "same" padding.
/// Total padding is split with the extra pixel at the trailing edge.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, needed / 2)
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        (in_h, in_w, in_c): (usize, usize, usize),
        (k_h, k_w, out_c): (usize, usize, usize),
        stride: usize,
    ) -> Self {
        let (out_h, pad_top) = same_padding(in_h, k_h, stride);
        let (out_w, pad_left) = same_padding(in_w, k_w, stride);
        Self { batch, in_h, in_w, in_c, k_h, k_w, out_c, stride, out_h, out_w, pad_top, pad_left }
    }

    /// Rows of the im2col matrix for one sample.
    pub fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Columns of the im2col matrix (one kernel footprint).
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn in_sample_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn out_sample_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    /// Input row/column for an output position and kernel tap, if inside the image.
    #[inline]
    fn source(&self, out_pos: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (out_pos * self.stride + tap).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let c = g.in_c;
    let row_len = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * row_len..][..row_len];
            for ky in 0..g.k_h {
                let iy = g.source(oy, ky, g.pad_top, g.in_h);
                for kx in 0..g.k_w {
                    let dst = &mut row[(ky * g.k_w + kx) * c..][..c];
                    match (iy, g.source(ox, kx, g.pad_left, g.in_w)) {
                        (Some(iy), Some(ix)) => {
                            dst.copy_from_slice(&input[(iy * g.in_w + ix) * c..][..c]);
                        }
                        _ => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let c = g.in_c;
    let row_len = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * row_len..][..row_len];
            for ky in 0..g.k_h {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else { continue };
                for kx in 0..g.k_w {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else { continue };
                    let src = &row[(ky * g.k_w + kx) * c..][..c];
                    let dst = &mut input_grad[(iy * g.in_w + ix) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_sample_len()];
    let mut cols = vec![T::zero(); g.patches() * g.patch_len()];
    let k = MatRef::new(kernel, g.patch_len(), g.out_c);
    for n in 0..g.batch {
        let x = &input[n * g.in_sample_len()..][..g.in_sample_len()];
        let y = &mut out[n * g.out_sample_len()..][..g.out_sample_len()];
        im2col(g, x, &mut cols);
        matmul(MatRef::new(&cols, g.patches(), g.patch_len()), k, y, false);
        for px in y.chunks_exact_mut(g.out_c) {
            for (v, b) in px.iter_mut().zip(bias) {
                *v = *v + *b;
            }
        }
    }
    out
}

/// Gradients of a convolution. Returns `(input_grad, kernel_grad, bias_grad)`;
/// the input gradient is only computed when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    out_grad: &[T],
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut kernel_grad = vec![T::zero(); kernel.len()];
    let mut bias_grad = vec![T::zero(); g.out_c];
    let mut input_grad = want_input_grad.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); g.patches() * g.patch_len()];
    let k = MatRef::new(kernel, g.patch_len(), g.out_c);
    for n in 0..g.batch {
        let x = &input[n * g.in_sample_len()..][..g.in_sample_len()];
        let dy = &out_grad[n * g.out_sample_len()..][..g.out_sample_len()];
        let dy_mat = MatRef::new(dy, g.patches(), g.out_c);

        im2col(g, x, &mut cols);
        matmul(MatRef::new(&cols, g.patches(), g.patch_len()).t(), dy_mat, &mut kernel_grad, true);
        for px in dy.chunks_exact(g.out_c) {
            for (b, d) in bias_grad.iter_mut().zip(px) {
                *b = *b + *d;
            }
        }

        if let Some(dx) = input_grad.as_mut() {
            matmul(dy_mat, k.t(), &mut cols, false);
            col2im_add(g, &cols, &mut dx[n * g.in_sample_len()..][..g.in_sample_len()]);
        }
    }
    (input_grad, kernel_grad, bias_grad)
}

pub fn dense_forward<T: Scalar>(
    batch: usize,
    features: usize,
    units: usize,
    input: &[T],
    weights: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * units);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    matmul(
        MatRef::new(input, batch, features),
        MatRef::new(weights, features, units),
        &mut out,
        true,
    );
    out
}

/// Returns `(input_grad, weight_grad, bias_grad)`.
pub fn dense_backward<T: Scalar>(
    batch: usize,
    features: usize,
    units: usize,
    input: &[T],
    weights: &[T],
    out_grad: &[T],
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let x = MatRef::new(input, batch, features);
    let dy = MatRef::new(out_grad, batch, units);
    let mut weight_grad = vec![T::zero(); features * units];
    matmul(x.t(), dy, &mut weight_grad, false);
    let mut bias_grad = vec![T::zero(); units];
    for row in out_grad.chunks_exact(units) {
        for (b, d) in bias_grad.iter_mut().zip(row) {
            *b = *b + *d;
        }
    }
    let input_grad = want_input_grad.then(|| {
        let mut dx = vec![T::zero(); batch * features];
        matmul(dy, MatRef::new(weights, features, units).t(), &mut dx, false);
        dx
    });
    (input_grad, weight_grad, bias_grad)
}
