//! Central finite-difference verification of [`DenseNet::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, DenseNet, DropoutMode, Gradients, NetSpec, Tape};
use crate::error::Result;

/// Central-difference steps. A smooth net balances truncation against
/// roundoff at the larger step. A ReLU net's output is piecewise linear in
/// each parameter, so the difference is exact between kinks and the small
/// step keeps the probe from straddling one.
const SMOOTH_STEP: f64 = 1e-4;
const KINKED_STEP: f64 = 1e-5;

/// `0.5 · ‖y − target‖²` and its gradient with respect to `y`.
pub fn squared_error_loss(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    move |y: &[f64]| {
        let diff: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
    }
}

/// Max relative error between backprop and central differences over every
/// parameter, evaluated with dropout disabled.
///
/// `loss` maps a network output to `(loss, dLoss/dOutput)`. The numeric side
/// differences the network outputs and contracts them with the upstream
/// gradient at the unperturbed point, which checks exactly the product that
/// `backward` computes while avoiding cancellation in large loss values.
pub fn grad_check<L>(net: &DenseNet, input: &[f64], loss: L) -> Result<f64>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_with(net, input, loss, |net, tape, upstream| {
        net.backward(tape, upstream).map(|(g, _)| g)
    })
}

/// As [`grad_check`], with a caller-supplied analytic gradient routine.
pub fn grad_check_with<L, B>(net: &DenseNet, input: &[f64], loss: L, backward: B) -> Result<f64>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
    B: Fn(&DenseNet, &Tape, &[f64]) -> Result<Gradients>,
{
    // Eval mode never touches the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (output, tape) = net.forward(input, DropoutMode::Eval, &mut rng)?;
    let (_, upstream) = loss(&output);
    let analytic = backward(net, &tape, &upstream)?;

    let step = if net.layers().iter().any(|l| l.activation() == Activation::Relu) {
        KINKED_STEP
    } else {
        SMOOTH_STEP
    };
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for layer in 0..net.layers().len() {
        let n_weights = net.layers()[layer].weights().len();
        let n_params = n_weights + net.layers()[layer].biases().len();
        for j in 0..n_params {
            let original = param(net, layer, j, n_weights);
            let mut eval = |delta: f64| -> Result<Vec<f64>> {
                perturb(&mut probe, layer, j, n_weights, original + delta);
                probe.predict(input)
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            perturb(&mut probe, layer, j, n_weights, original);
            let numeric = plus
                .iter()
                .zip(&minus)
                .zip(&upstream)
                .map(|((p, m), g)| g * (p - m))
                .sum::<f64>()
                / (2.0 * step);
            let a = if j < n_weights {
                analytic.weights[layer][j]
            } else {
                analytic.biases[layer][j - n_weights]
            };
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn param(net: &DenseNet, layer: usize, j: usize, n_weights: usize) -> f64 {
    let l = &net.layers()[layer];
    if j < n_weights {
        l.weights()[j]
    } else {
        l.biases()[j - n_weights]
    }
}

fn perturb(net: &mut DenseNet, layer: usize, j: usize, n_weights: usize, value: f64) {
    let (w, b) = net.layer_params_mut(layer);
    if j < n_weights {
        w[j] = value;
    } else {
        b[j - n_weights] = value;
    }
}

/// [`grad_check`] on a network, input and squared-error target all drawn
/// from `seed`, with `activation` on hidden layers and identity output.
pub fn random_grad_check(dims: &[usize], activation: Activation, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DenseNet::new(&NetSpec::new(dims.to_vec(), activation, Activation::Identity), &mut rng)?;
    let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    grad_check(&net, &x, squared_error_loss(t))
}
