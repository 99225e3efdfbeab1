//! 2-d convolution (cross-correlation semantics) via im2col + GEMM.
//! Batched passes parallelize over images; gradients are reduced in image
//! order so results stay deterministic regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ConvLayer<F: Scalar = f32> {
    /// [Cout, Cin, Kh, Kw]
    pub weights: Tensor<F>,
    /// [Cout]
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

/// Saved forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCtx<F: Scalar = f32> {
    pub input: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<F: Scalar = f32> {
    pub d_weights: Tensor<F>,
    pub d_bias: Tensor<F>,
}

impl<F: Scalar> ConvLayer<F> {
    pub fn new(weights: Tensor<F>, bias: Tensor<F>, stride: usize, padding: usize) -> Result<Self> {
        if weights.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv weights must be rank 4, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias shape {:?} does not match Cout {}",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        Ok(ConvLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let he = h + 2 * self.padding;
        let we = w + 2 * self.padding;
        if he < kh || we < kw {
            return Err(Error::RejectedInput(format!(
                "input {h}x{w} smaller than kernel {kh}x{kw} after padding {}",
                self.padding
            )));
        }
        Ok((
            (he - kh) / self.stride + 1,
            (we - kw) / self.stride + 1,
        ))
    }

    pub fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (out, _) = self.forward_ctx(input)?;
        Ok(out)
    }

    pub fn forward_ctx(&self, input: &Tensor<F>) -> Result<(Tensor<F>, ConvCtx<F>)> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects [N,{},H,W], got {:?}",
                self.in_channels(),
                shape
            )));
        }
        let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (kh, kw) = self.kernel();
        let (ho, wo) = self.out_extent(h, w)?;
        let cout = self.out_channels();
        let patch = cin * kh * kw;
        let cols = ho * wo;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        out.data_mut()
            .par_chunks_mut(cout * cols)
            .zip(input.data().par_chunks(cin * h * w))
            .for_each(|(dst, src)| {
                let mut col = vec![F::zero(); patch * cols];
                im2col(
                    src,
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    self.stride,
                    self.padding,
                    ho,
                    wo,
                    &mut col,
                );
                unsafe {
                    F::gemm(
                        cout,
                        patch,
                        cols,
                        F::one(),
                        self.weights.data().as_ptr(),
                        patch as isize,
                        1,
                        col.as_ptr(),
                        cols as isize,
                        1,
                        F::zero(),
                        dst.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                for c in 0..cout {
                    let b = self.bias.data()[c];
                    for v in &mut dst[c * cols..(c + 1) * cols] {
                        *v += b;
                    }
                }
            });
        Ok((
            out,
            ConvCtx {
                input: input.clone(),
            },
        ))
    }

    /// Returns (input gradient, parameter gradients).
    pub fn backward(
        &self,
        ctx: &ConvCtx<F>,
        grad_out: &Tensor<F>,
    ) -> Result<(Tensor<F>, ConvGrads<F>)> {
        let in_shape = ctx.input.shape();
        let (n, cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (kh, kw) = self.kernel();
        let (ho, wo) = self.out_extent(h, w)?;
        let cout = self.out_channels();
        if grad_out.shape() != [n, cout, ho, wo] {
            return Err(Error::ShapeMismatch(format!(
                "conv backward expects grad {:?}, got {:?}",
                [n, cout, ho, wo],
                grad_out.shape()
            )));
        }
        let patch = cin * kh * kw;
        let cols = ho * wo;
        let mut d_input = Tensor::zeros(in_shape);
        let mut d_weights = Tensor::zeros(self.weights.shape());
        let mut d_bias = Tensor::zeros(self.bias.shape());
        let per_image: Vec<(Vec<F>, Vec<F>)> = d_input
            .data_mut()
            .par_chunks_mut(cin * h * w)
            .zip(ctx.input.data().par_chunks(cin * h * w))
            .zip(grad_out.data().par_chunks(cout * cols))
            .map(|((dst, src), g)| {
                let mut col = vec![F::zero(); patch * cols];
                let mut d_col = vec![F::zero(); patch * cols];
                let mut dw = vec![F::zero(); cout * patch];
                let mut db = vec![F::zero(); cout];
                im2col(
                    src,
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    self.stride,
                    self.padding,
                    ho,
                    wo,
                    &mut col,
                );
                // dW = g [Cout, cols] * col^T [cols, patch]
                unsafe {
                    F::gemm(
                        cout,
                        cols,
                        patch,
                        F::one(),
                        g.as_ptr(),
                        cols as isize,
                        1,
                        col.as_ptr(),
                        1,
                        cols as isize,
                        F::zero(),
                        dw.as_mut_ptr(),
                        patch as isize,
                        1,
                    );
                    // d_col = W^T [patch, Cout] * g [Cout, cols]
                    F::gemm(
                        patch,
                        cout,
                        cols,
                        F::one(),
                        self.weights.data().as_ptr(),
                        1,
                        patch as isize,
                        g.as_ptr(),
                        cols as isize,
                        1,
                        F::zero(),
                        d_col.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                for c in 0..cout {
                    let mut s = F::zero();
                    for &v in &g[c * cols..(c + 1) * cols] {
                        s += v;
                    }
                    db[c] = s;
                }
                col2im(
                    &d_col,
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    self.stride,
                    self.padding,
                    ho,
                    wo,
                    dst,
                );
                (dw, db)
            })
            .collect();
        for (dw, db) in per_image {
            for (acc, v) in d_weights.data_mut().iter_mut().zip(dw) {
                *acc += v;
            }
            for (acc, v) in d_bias.data_mut().iter_mut().zip(db) {
                *acc += v;
            }
        }
        Ok((
            d_input,
            ConvGrads { d_weights, d_bias },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    src: &[F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [F],
) {
    let cols = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let out_row = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut out_row[oy * wo..(oy + 1) * wo] {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        out_row[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    col: &[F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [F],
) {
    let cols = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let col_row = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += col_row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
