//! 2-d max pooling with retained argmax indices.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct MaxPoolLayer {
    pub window: usize,
    pub stride: usize,
}

impl Default for MaxPoolLayer {
    fn default() -> Self {
        MaxPoolLayer {
            window: 2,
            stride: 2,
        }
    }
}

/// Flat argmax index (into the input buffer) per output element.
#[derive(Debug, Clone)]
pub struct MaxPoolCtx {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

impl MaxPoolLayer {
    pub fn forward_ctx<F: Scalar>(&self, input: &Tensor<F>) -> Result<(Tensor<F>, MaxPoolCtx)> {
        let shape = input.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "maxpool expects [N,C,H,W], got {:?}",
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.window == self.stride && (h % self.stride != 0 || w % self.stride != 0) {
            return Err(Error::RejectedInput(format!(
                "maxpool {}x{} stride {} needs extents divisible by stride, got {}x{}",
                self.window, self.window, self.stride, h, w
            )));
        }
        if h < self.window || w < self.window {
            return Err(Error::RejectedInput(format!(
                "maxpool window {} larger than input {}x{}",
                self.window, h, w
            )));
        }
        let ho = (h - self.window) / self.stride + 1;
        let wo = (w - self.window) / self.stride + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut oi = 0;
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = F::neg_infinity();
                        let mut best_i = 0;
                        for ky in 0..self.window {
                            let iy = oy * self.stride + ky;
                            for kx in 0..self.window {
                                let ix = ox * self.stride + kx;
                                let i = base + iy * w + ix;
                                let v = input.data()[i];
                                if v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_i;
                        oi += 1;
                    }
                }
            }
        }
        Ok((
            out,
            MaxPoolCtx {
                input_shape: shape.to_vec(),
                argmax,
            },
        ))
    }

    pub fn forward<F: Scalar>(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_ctx(input)?.0)
    }

    pub fn backward<F: Scalar>(&self, ctx: &MaxPoolCtx, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        if grad_out.len() != ctx.argmax.len() {
            return Err(Error::ShapeMismatch(
                "maxpool backward gradient size mismatch".into(),
            ));
        }
        let mut d_input = Tensor::zeros(&ctx.input_shape);
        for (oi, &src) in ctx.argmax.iter().enumerate() {
            d_input.data_mut()[src] += grad_out.data()[oi];
        }
        Ok(d_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let p = MaxPoolLayer::default();
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (out, ctx) = p.forward_ctx(&input).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(ctx.argmax[0], 3);
    }

    #[test]
    fn constant_input_halves_extent() {
        let p = MaxPoolLayer::default();
        let input = Tensor::full(&[1, 2, 4, 6], 0.25f64);
        let out = p.forward(&input).unwrap();
        assert_eq!(out.shape(), [1, 2, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn indivisible_extent_rejected() {
        let p = MaxPoolLayer::default();
        let input = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(p.forward(&input).is_err());
    }

    #[test]
    fn backward_routes_to_argmax() {
        let p = MaxPoolLayer::default();
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 9.0, 3.0, 4.0]).unwrap();
        let (_, ctx) = p.forward_ctx(&input).unwrap();
        let up = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0f64]).unwrap();
        let g = p.backward(&ctx, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0, 0.0]);
    }
}
