//! Finite-difference gradient verification for the four layer kinds.
//!
//! All checks run in f64. The scalar objective is `sum(output * probe)` for a
//! fixed random probe, so the upstream gradient is the probe itself.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::activation::ActivationKind;
use crate::nn::batchnorm::{BatchNormLayer, BnMode};
use crate::nn::conv::ConvLayer;
use crate::nn::pool::MaxPoolLayer;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    LeakyRelu,
    Relu,
    Identity,
    MaxPool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let dist = Uniform::new(-1.0, 1.0);
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn max_fd_error(
    params: &mut [f64],
    analytic: &[f64],
    eval: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let hi = eval(params);
        params[i] = orig - FD_STEP;
        let lo = eval(params);
        params[i] = orig;
        let numeric = (hi - lo) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Max relative error over all inputs and parameters of the given layer kind,
/// instantiated deterministically from the seed.
pub fn grad_check(kind: LayerKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        LayerKind::Conv => grad_check_conv(&mut rng),
        LayerKind::BatchNorm => grad_check_batchnorm(&mut rng),
        LayerKind::LeakyRelu => {
            grad_check_activation(&mut rng, ActivationKind::LeakyRelu { alpha: 0.1 })
        }
        LayerKind::Relu => grad_check_activation(&mut rng, ActivationKind::Relu),
        LayerKind::Identity => grad_check_activation(&mut rng, ActivationKind::Identity),
        LayerKind::MaxPool => grad_check_maxpool(&mut rng),
    }
}

fn grad_check_conv(rng: &mut ChaCha8Rng) -> f64 {
    let input = rand_tensor(rng, &[2, 3, 6, 6]);
    let weights = rand_tensor(rng, &[4, 3, 3, 3]);
    let bias = rand_tensor(rng, &[4]);
    let layer = ConvLayer::new(weights, bias, 1, 1).unwrap();
    let (out, ctx) = layer.forward_ctx(&input).unwrap();
    let probe = rand_tensor(rng, out.shape());
    let (d_input, grads) = layer.backward(&ctx, &probe).unwrap();

    let mut worst = 0.0f64;
    // input
    let mut x = input.clone();
    let probe_c = probe.clone();
    let layer_c = layer.clone();
    worst = worst.max(max_fd_error(
        &mut x.data_mut().to_vec(),
        d_input.data(),
        &mut |vals| {
            let t = Tensor::from_vec(input.shape(), vals.to_vec()).unwrap();
            dot(&layer_c.forward(&t).unwrap(), &probe_c)
        },
    ));
    // weights
    let w0 = layer.weights.clone();
    worst = worst.max(max_fd_error(
        &mut w0.data().to_vec(),
        grads.d_weights.data(),
        &mut |vals| {
            let mut l = layer.clone();
            l.weights = Tensor::from_vec(w0.shape(), vals.to_vec()).unwrap();
            dot(&l.forward(&input).unwrap(), &probe)
        },
    ));
    // bias
    let b0 = layer.bias.clone();
    worst = worst.max(max_fd_error(
        &mut b0.data().to_vec(),
        grads.d_bias.data(),
        &mut |vals| {
            let mut l = layer.clone();
            l.bias = Tensor::from_vec(b0.shape(), vals.to_vec()).unwrap();
            dot(&l.forward(&input).unwrap(), &probe)
        },
    ));
    worst
}

fn grad_check_batchnorm(rng: &mut ChaCha8Rng) -> f64 {
    let input = rand_tensor(rng, &[3, 2, 4, 4]);
    let mut layer = BatchNormLayer::<f64>::new(2);
    layer.gamma = rand_tensor(rng, &[2]).map(|v| v + 1.5);
    layer.beta = rand_tensor(rng, &[2]);
    let (out, ctx) = layer.forward_ctx(&input, BnMode::Train).unwrap();
    let probe = rand_tensor(rng, out.shape());
    let (d_input, grads) = layer.backward(&ctx, &probe).unwrap();

    // running-stat updates are a side effect, so the FD closure re-clones
    let eval = |l: &BatchNormLayer<f64>, x: &Tensor<f64>| {
        let mut lc = l.clone();
        dot(&lc.forward_ctx(x, BnMode::Train).unwrap().0, &probe)
    };

    let mut worst = 0.0f64;
    worst = worst.max(max_fd_error(
        &mut input.data().to_vec(),
        d_input.data(),
        &mut |vals| eval(&layer, &Tensor::from_vec(input.shape(), vals.to_vec()).unwrap()),
    ));
    let g0 = layer.gamma.clone();
    worst = worst.max(max_fd_error(
        &mut g0.data().to_vec(),
        grads.d_gamma.data(),
        &mut |vals| {
            let mut l = layer.clone();
            l.gamma = Tensor::from_vec(&[2], vals.to_vec()).unwrap();
            eval(&l, &input)
        },
    ));
    let b0 = layer.beta.clone();
    worst = worst.max(max_fd_error(
        &mut b0.data().to_vec(),
        grads.d_beta.data(),
        &mut |vals| {
            let mut l = layer.clone();
            l.beta = Tensor::from_vec(&[2], vals.to_vec()).unwrap();
            eval(&l, &input)
        },
    ));
    worst
}

fn grad_check_activation(rng: &mut ChaCha8Rng, kind: ActivationKind) -> f64 {
    // keep samples away from the kink at 0 so FD stays valid
    let mut input = rand_tensor(rng, &[2, 3, 4, 4]);
    for v in input.data_mut() {
        if v.abs() < 10.0 * FD_STEP {
            *v += 0.05;
        }
    }
    let probe = rand_tensor(rng, input.shape());
    let analytic = kind.backward(&input, &probe);
    // elementwise op: difference each element's own contribution so the
    // constant rest of the dot product cannot inject cancellation noise
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let x = input.data()[i];
        let p = probe.data()[i];
        let numeric = (kind.apply(x + FD_STEP) * p - kind.apply(x - FD_STEP) * p) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

fn grad_check_maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let layer = MaxPoolLayer::default();
    let mut input = rand_tensor(rng, &[2, 2, 4, 4]);
    // separate window elements so the argmax is stable under the FD step
    for (i, v) in input.data_mut().iter_mut().enumerate() {
        *v += (i % 7) as f64 * 1e-3;
    }
    let (out, ctx) = layer.forward_ctx(&input).unwrap();
    let probe = rand_tensor(rng, out.shape());
    let d_input = layer.backward(&ctx, &probe).unwrap();
    max_fd_error(
        &mut input.data().to_vec(),
        d_input.data(),
        &mut |vals| {
            let t = Tensor::from_vec(input.shape(), vals.to_vec()).unwrap();
            dot(&layer.forward(&t).unwrap(), &probe)
        },
    )
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_seed_7() {
        assert!(grad_check(LayerKind::Conv, 7) < 1e-4);
    }

    #[test]
    fn batchnorm_seed_7() {
        assert!(grad_check(LayerKind::BatchNorm, 7) < 1e-4);
    }

    #[test]
    fn identity_exact() {
        assert!(grad_check(LayerKind::Identity, 3) < 1e-10);
    }

    #[test]
    fn maxpool_ok() {
        assert!(grad_check(LayerKind::MaxPool, 11) < 1e-4);
    }
}
