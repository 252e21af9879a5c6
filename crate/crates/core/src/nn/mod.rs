//! Dense feed-forward networks with manual backpropagation.
//!
//! Every learned model in the crate (imputer, actor, critic) is a [`DenseNet`]:
//! a stack of affine layers, each followed by an element-wise activation and
//! optional inverted dropout.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`. A forward pass
//! in [`DropoutMode::Train`] records a [`Tape`] that [`DenseNet::backward`]
//! consumes. The network carries a parameter version counter; a tape recorded
//! before any parameter change is rejected as stale.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, ModelRole, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_with, random_grad_check, squared_error_loss};
pub use optim::{Optimizer, OptimizerKind};

use rand::Rng;

use crate::error::{Error, Result};

/// Element-wise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    /// Tag byte used by the checkpoint format.
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            3 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// One affine layer plus activation and dropout on its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major, shape `(out_dim, in_dim)`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
    dropout: f64,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.biases))
        {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o = self.activation.apply(acc);
        }
    }
}

/// Builder-style description of a network topology.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Dropout applied to every hidden layer output. The output layer never drops.
    pub hidden_dropout: f64,
}

impl NetSpec {
    pub fn new(dims: Vec<usize>, hidden_activation: Activation, output_activation: Activation) -> Self {
        NetSpec {
            dims,
            hidden_activation,
            output_activation,
            hidden_dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.hidden_dropout = rate;
        self
    }
}

/// A multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    version: u64,
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// `inputs[i]` is the (post-dropout) input fed to layer `i`.
    inputs: Vec<Vec<f64>>,
    /// Post-activation, pre-dropout output of each layer.
    outputs: Vec<Vec<f64>>,
    /// Per-unit dropout multipliers (0 or `1/(1-p)`) where dropout was applied.
    dropout_scales: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn output(&self) -> Vec<f64> {
        let last = self.outputs.len() - 1;
        match &self.dropout_scales[last] {
            Some(s) => self.outputs[last].iter().zip(s).map(|(y, s)| y * s).collect(),
            None => self.outputs[last].clone(),
        }
    }
}

/// Parameter gradients with exactly the shapes of a [`DenseNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self
            .weights
            .iter_mut()
            .zip(&other.weights)
            .chain(self.biases.iter_mut().zip(&other.biases))
        {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += factor * y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|g| *g == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }

    /// Index of the first layer holding a non-finite entry.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&i| {
            self.weights[i]
                .iter()
                .chain(&self.biases[i])
                .any(|g| !g.is_finite())
        })
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        if spec.dims.len() < 2 || spec.dims.contains(&0) {
            return Err(Error::invalid(format!(
                "network needs at least two positive layer sizes, got {:?}",
                spec.dims
            )));
        }
        if !(0.0..1.0).contains(&spec.hidden_dropout) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                spec.hidden_dropout
            )));
        }
        let n = spec.dims.len() - 1;
        let layers = spec
            .dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let last = i + 1 == n;
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights,
                    biases: vec![0.0; fan_out],
                    activation: if last {
                        spec.output_activation
                    } else {
                        spec.hidden_activation
                    },
                    dropout: if last { 0.0 } else { spec.hidden_dropout },
                }
            })
            .collect();
        Ok(DenseNet { layers, version: 0 })
    }

    /// Assemble a network from explicit parameters.
    pub fn from_parts(
        dims: &[usize],
        activations: &[Activation],
        dropout: &[f64],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        if n == 0 || activations.len() != n || dropout.len() != n || weights.len() != n || biases.len() != n
        {
            return Err(Error::invalid("inconsistent layer description"));
        }
        let mut layers = Vec::with_capacity(n);
        for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let (in_dim, out_dim) = (dims[i], dims[i + 1]);
            if w.len() != in_dim * out_dim {
                return Err(Error::DimensionMismatch {
                    context: "layer weights",
                    expected: in_dim * out_dim,
                    actual: w.len(),
                });
            }
            if b.len() != out_dim {
                return Err(Error::DimensionMismatch {
                    context: "layer biases",
                    expected: out_dim,
                    actual: b.len(),
                });
            }
            if !(0.0..1.0).contains(&dropout[i]) {
                return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", dropout[i])));
            }
            layers.push(Layer {
                in_dim,
                out_dim,
                weights: w,
                biases: b,
                activation: activations[i],
                dropout: dropout[i],
            });
        }
        Ok(DenseNet { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Mutable access to one layer's `(weights, biases)`; bumps the version.
    pub fn layer_params_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        self.version += 1;
        let l = &mut self.layers[layer];
        (&mut l.weights, &mut l.biases)
    }

    /// Scale the weights and biases of one layer in place.
    pub fn scale_layer(&mut self, layer: usize, factor: f64) {
        let (w, b) = self.layer_params_mut(layer);
        w.iter_mut().chain(b.iter_mut()).for_each(|p| *p *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|p| p.is_finite()))
    }

    /// Bitwise parameter equality, ignoring the version counter.
    pub fn same_parameters(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim
                    && a.out_dim == b.out_dim
                    && a.activation == b.activation
                    && a.dropout.to_bits() == b.dropout.to_bits()
                    && bits_eq(&a.weights, &b.weights)
                    && bits_eq(&a.biases, &b.biases)
            })
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass recording a tape. In eval mode dropout is disabled.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut tape = Tape {
            version: self.version,
            inputs: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            dropout_scales: Vec::with_capacity(n),
        };
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut out = vec![0.0; layer.out_dim];
            layer.affine(&current, &mut out);
            let scales = if mode == DropoutMode::Train && layer.dropout > 0.0 {
                let keep = 1.0 / (1.0 - layer.dropout);
                Some(
                    (0..layer.out_dim)
                        .map(|_| {
                            if rng.random::<f64>() < layer.dropout {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let next = match &scales {
                Some(s) => out.iter().zip(s).map(|(y, s)| y * s).collect(),
                None => out.clone(),
            };
            tape.inputs.push(std::mem::replace(&mut current, next));
            tape.outputs.push(out);
            tape.dropout_scales.push(scales);
        }
        Ok((current, tape))
    }

    /// Deterministic forward pass without dropout or tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut out = vec![0.0; layer.out_dim];
            layer.affine(&current, &mut out);
            current = out;
        }
        Ok(current)
    }

    /// Backpropagate `upstream` (dLoss/dOutput) through the tape, returning
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_accumulate(tape, upstream, 1.0, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// As [`DenseNet::backward`], adding `factor * gradient` into `grads`.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        upstream: &[f64],
        factor: f64,
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                net: self.version,
            });
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::invalid("tape was recorded on a different network"));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        let mut delta: Vec<f64> = upstream.iter().map(|g| g * factor).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(scales) = &tape.dropout_scales[i] {
                delta.iter_mut().zip(scales).for_each(|(d, s)| *d *= s);
            }
            let outputs = &tape.outputs[i];
            delta
                .iter_mut()
                .zip(outputs)
                .for_each(|(d, y)| *d *= layer.activation.derivative_from_output(*y));
            let input = &tape.inputs[i];
            let gw = &mut grads.weights[i];
            let gb = &mut grads.biases[i];
            let mut input_grad = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = o * layer.in_dim;
                let w_row = &layer.weights[row..row + layer.in_dim];
                let g_row = &mut gw[row..row + layer.in_dim];
                for ((g, x), (ig, w)) in g_row
                    .iter_mut()
                    .zip(input)
                    .zip(input_grad.iter_mut().zip(w_row))
                {
                    *g += d * x;
                    *ig += d * w;
                }
            }
            delta = input_grad;
        }
        Ok(delta)
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn affine_1d(w: f64, b: f64) -> DenseNet {
        DenseNet::from_parts(&[1, 1], &[Activation::Identity], &[0.0], vec![vec![w]], vec![vec![b]]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_parts(
            &[2, 2],
            &[Activation::Identity],
            &[0.0],
            vec![vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        let (y, _) = net.forward(&[0.3, -0.7], DropoutMode::Train, &mut rng()).unwrap();
        assert_eq!(y, vec![0.3, -0.7]);
    }

    #[test]
    fn affine_map_hand_value() {
        let (y, _) = affine_1d(2.0, 1.0).forward(&[3.0], DropoutMode::Eval, &mut rng()).unwrap();
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let net = affine_1d(1.0, 0.0);
        assert!(matches!(
            net.forward(&[1.0, 2.0], DropoutMode::Eval, &mut rng()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let spec = NetSpec::new(vec![5, 7, 3], Activation::Tanh, Activation::Sigmoid);
        let net = DenseNet::new(&spec, &mut rng()).unwrap();
        let x = [0.1, -0.2, 0.3, 0.9, -1.0];
        let (a, _) = net.forward(&x, DropoutMode::Train, &mut rng()).unwrap();
        let (b, _) = net.forward(&x, DropoutMode::Eval, &mut rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.predict(&x).unwrap(), b);
    }

    #[test]
    fn half_squared_loss_gradient_by_hand() {
        let net = affine_1d(1.0, 0.0);
        let (y, tape) = net.forward(&[2.0], DropoutMode::Eval, &mut rng()).unwrap();
        // d(y^2/2)/dy = y
        let (g, gx) = net.backward(&tape, &y).unwrap();
        assert_eq!(g.weights[0], vec![4.0]);
        assert_eq!(g.biases[0], vec![2.0]);
        assert_eq!(gx, vec![2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = NetSpec::new(vec![4, 6, 2], Activation::Relu, Activation::Identity).with_dropout(0.3);
        let net = DenseNet::new(&spec, &mut rng()).unwrap();
        let (_, tape) = net.forward(&[1.0, 2.0, 3.0, 4.0], DropoutMode::Train, &mut rng()).unwrap();
        let (g, gx) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_tape_is_detected() {
        let mut net = affine_1d(1.0, 0.0);
        let (_, tape) = net.forward(&[1.0], DropoutMode::Eval, &mut rng()).unwrap();
        net.scale_layer(0, 2.0);
        assert!(matches!(net.backward(&tape, &[1.0]), Err(Error::StaleTape { .. })));
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let net = DenseNet::from_parts(
            &[1, 200, 1],
            &[Activation::Identity, Activation::Identity],
            &[0.5, 0.0],
            vec![vec![1.0; 200], vec![1.0; 200]],
            vec![vec![0.0; 200], vec![0.0]],
        )
        .unwrap();
        let (_, tape) = net.forward(&[1.0], DropoutMode::Train, &mut rng()).unwrap();
        let scales = tape.dropout_scales[0].as_ref().unwrap();
        assert!(scales.iter().all(|s| *s == 0.0 || *s == 2.0));
        assert!(scales.contains(&0.0));
        assert!(tape.dropout_scales[1].is_none());
    }

    #[test]
    fn dropout_expectation_matches_eval_output() {
        let spec = NetSpec::new(vec![3, 16, 2], Activation::Tanh, Activation::Identity).with_dropout(0.3);
        let net = DenseNet::new(&spec, &mut rng()).unwrap();
        let x = [0.5, -0.4, 0.8];
        let eval = net.predict(&x).unwrap();
        let n = 20_000;
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let (y, _) = net.forward(&x, DropoutMode::Train, &mut r).unwrap();
            for k in 0..2 {
                sum[k] += y[k];
                sq[k] += y[k] * y[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - eval[k]).abs() < 3.0 * se, "unit {k}: {mean} vs {}", eval[k]);
        }
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let spec = NetSpec::new(vec![4, 8, 3], Activation::Relu, Activation::Identity).with_dropout(0.2);
        let net = DenseNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = [0.2, 0.4, -0.1, 0.0];
        let a = net.forward(&x, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        let b = net.forward(&x, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert!(bits_eq(&a, &b));
    }
}
