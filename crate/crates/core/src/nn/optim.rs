use super::{DenseNet, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state for one [`DenseNet`].
///
/// Adam moments are allocated lazily on the first step and always mirror the
/// parameter shapes of the network they were first applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first_moment: Option<Gradients>,
    second_moment: Option<Gradients>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            first_moment: None,
            second_moment: None,
            step: 0,
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        self.step_with_lr(net, grads, self.learning_rate)
    }

    /// One update with an explicit step size in place of the configured one.
    pub fn step_with_lr(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) -> Result<()> {
        check_shapes(net, grads)?;
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::NonFiniteGradient { layer });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, layer) in net.layers.iter_mut().enumerate() {
                    sgd(&mut layer.weights, &grads.weights[i], lr);
                    sgd(&mut layer.biases, &grads.biases[i], lr);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = self
                    .first_moment
                    .get_or_insert_with(|| Gradients::zeros_like(net));
                let v = self
                    .second_moment
                    .get_or_insert_with(|| Gradients::zeros_like(net));
                check_shapes(net, m)?;
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let adam = AdamStep { beta1, beta2, eps, lr, c1, c2 };
                for (i, layer) in net.layers.iter_mut().enumerate() {
                    adam.apply(&mut layer.weights, &grads.weights[i], &mut m.weights[i], &mut v.weights[i]);
                    adam.apply(&mut layer.biases, &grads.biases[i], &mut m.biases[i], &mut v.biases[i]);
                }
            }
        }
        net.bump_version();
        for (i, layer) in net.layers.iter().enumerate() {
            if !layer.weights.iter().chain(&layer.biases).all(|p| p.is_finite()) {
                return Err(Error::NonFiniteParameter { layer: i });
            }
        }
        Ok(())
    }

    /// Apply `Σ wᵢ gᵢ` as a single step.
    ///
    /// The first nonzero weight becomes the step size and the remaining terms
    /// are rescaled relative to it, so for SGD this is exactly
    /// `p ← p − Σ wᵢ gᵢ`. All-zero weights leave the network untouched.
    pub fn weighted_step(&mut self, net: &mut DenseNet, terms: &[(f64, &Gradients)]) -> Result<()> {
        let Some(lead) = terms.iter().map(|(w, _)| *w).find(|w| *w != 0.0) else {
            return Ok(());
        };
        if terms.iter().any(|(w, _)| *w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("step weights must be finite and non-negative"));
        }
        let mut combined = Gradients::zeros_like(net);
        for (w, g) in terms {
            if *w != 0.0 {
                check_shapes(net, g)?;
                combined.add_scaled(g, w / lead);
            }
        }
        self.step_with_lr(net, &combined, lead)
    }
}

struct AdamStep {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    c1: f64,
    c2: f64,
}

impl AdamStep {
    fn apply(&self, params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]) {
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / self.c1;
            let v_hat = *v / self.c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn sgd(params: &mut [f64], grads: &[f64], lr: f64) {
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
}

fn check_shapes(net: &DenseNet, grads: &Gradients) -> Result<()> {
    if grads.weights.len() != net.layers.len() || grads.biases.len() != net.layers.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient layer count",
            expected: net.layers.len(),
            actual: grads.weights.len(),
        });
    }
    for (i, layer) in net.layers.iter().enumerate() {
        if grads.weights[i].len() != layer.weights.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient weight shape",
                expected: layer.weights.len(),
                actual: grads.weights[i].len(),
            });
        }
        if grads.biases[i].len() != layer.biases.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient bias shape",
                expected: layer.biases.len(),
                actual: grads.biases[i].len(),
            });
        }
    }
    Ok(())
}
