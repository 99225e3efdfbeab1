//! Batch normalization over [N,C,H,W], per-channel statistics.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer<F: Scalar = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub epsilon: F,
    pub momentum: F,
}

/// Forward state retained for the train-mode backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCtx<F: Scalar = f32> {
    pub input: Tensor<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub mode: BnMode,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<F: Scalar = f32> {
    pub d_gamma: Tensor<F>,
    pub d_beta: Tensor<F>,
}

impl<F: Scalar> BatchNormLayer<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            epsilon: F::from_f64(DEFAULT_EPSILON),
            momentum: F::from_f64(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    /// Inference-mode forward that leaves the layer untouched.
    pub fn forward_infer(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm expects [N,{},H,W], got {:?}",
                self.channels(),
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut out = Tensor::zeros(shape);
        for ch in 0..c {
            let inv_std = F::one() / (self.running_var.data()[ch] + self.epsilon).sqrt();
            let mu = self.running_mean.data()[ch];
            let g = self.gamma.data()[ch];
            let b = self.beta.data()[ch];
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in base..base + plane {
                    out.data_mut()[i] = (input.data()[i] - mu) * inv_std * g + b;
                }
            }
        }
        Ok(out)
    }

    /// Train mode normalizes by batch statistics and updates running stats;
    /// infer mode uses the stored running statistics.
    pub fn forward_ctx(
        &mut self,
        input: &Tensor<F>,
        mode: BnMode,
    ) -> Result<(Tensor<F>, BatchNormCtx<F>)> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm expects [N,{},H,W], got {:?}",
                self.channels(),
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let m = n * h * w;
        if mode == BnMode::Train && m < 2 {
            return Err(Error::RejectedInput(
                "batchnorm train mode needs at least 2 samples per channel".into(),
            ));
        }
        let plane = h * w;
        let inv_m = F::from_f64(1.0 / m as f64);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut s = F::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &input.data()[base..base + plane] {
                            s += v;
                        }
                    }
                    let mu = s * inv_m;
                    let mut sq = F::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &input.data()[base..base + plane] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq * inv_m;
                }
                let mom = self.momentum;
                let keep = F::one() - mom;
                for ch in 0..c {
                    self.running_mean.data_mut()[ch] =
                        keep * self.running_mean.data()[ch] + mom * mean[ch];
                    self.running_var.data_mut()[ch] =
                        keep * self.running_var.data()[ch] + mom * var[ch];
                }
                (mean, var)
            }
            BnMode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let mut out = Tensor::zeros(shape);
        for ch in 0..c {
            let inv_std = F::one() / (var[ch] + self.epsilon).sqrt();
            let g = self.gamma.data()[ch];
            let b = self.beta.data()[ch];
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in base..base + plane {
                    out.data_mut()[i] = (input.data()[i] - mean[ch]) * inv_std * g + b;
                }
            }
        }
        Ok((
            out,
            BatchNormCtx {
                input: input.clone(),
                mean,
                var,
                mode,
            },
        ))
    }

    pub fn backward(
        &self,
        ctx: &BatchNormCtx<F>,
        grad_out: &Tensor<F>,
    ) -> Result<(Tensor<F>, BatchNormGrads<F>)> {
        let shape = ctx.input.shape();
        if grad_out.shape() != shape {
            return Err(Error::ShapeMismatch(
                "batchnorm backward gradient shape mismatch".into(),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = n * h * w;
        let inv_m = F::from_f64(1.0 / m as f64);
        let mut d_input = Tensor::zeros(shape);
        let mut d_gamma = Tensor::zeros(&[c]);
        let mut d_beta = Tensor::zeros(&[c]);
        for ch in 0..c {
            let mu = ctx.mean[ch];
            let inv_std = F::one() / (ctx.var[ch] + self.epsilon).sqrt();
            let g = self.gamma.data()[ch];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in base..base + plane {
                    let dy = grad_out.data()[i];
                    let xhat = (ctx.input.data()[i] - mu) * inv_std;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            d_gamma.data_mut()[ch] = sum_dy_xhat;
            d_beta.data_mut()[ch] = sum_dy;
            match ctx.mode {
                BnMode::Train => {
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for i in base..base + plane {
                            let dy = grad_out.data()[i];
                            let xhat = (ctx.input.data()[i] - mu) * inv_std;
                            d_input.data_mut()[i] = g
                                * inv_std
                                * (dy - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                        }
                    }
                }
                BnMode::Infer => {
                    let k = g * inv_std;
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for i in base..base + plane {
                            d_input.data_mut()[i] = grad_out.data()[i] * k;
                        }
                    }
                }
            }
        }
        Ok((d_input, BatchNormGrads { d_gamma, d_beta }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_centers_to_zero() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let input = Tensor::full(&[1, 1, 2, 2], 3.7);
        let (out, _) = bn.forward_ctx(&input, BnMode::Train).unwrap();
        for &v in out.data() {
            assert!(v.abs() <= 1e-3, "got {v}");
        }
    }

    #[test]
    fn unit_variance_pair() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let input = Tensor::from_vec(&[2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let (out, _) = bn.forward_ctx(&input, BnMode::Train).unwrap();
        let expect = 1.0 / (1.0 + DEFAULT_EPSILON).sqrt();
        assert!((out.data()[0] + expect).abs() < 1e-9);
        assert!((out.data()[1] - expect).abs() < 1e-9);
    }

    #[test]
    fn running_stats_updated() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let input = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        bn.forward_ctx(&input, BnMode::Train).unwrap();
        // mean 1, var 1; momentum 0.1
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let input = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert!(bn.forward_ctx(&input, BnMode::Train).is_err());
    }
}
