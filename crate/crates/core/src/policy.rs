//! Measurement policy: masked categorical actor, exploration flattening,
//! critic baseline and the REINFORCE update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::Episode;
use crate::error::{Error, Result};
use crate::missingness::{encode_state, Mask, MissingState};
use crate::nn::{Activation, Checkpoint, DenseNet, DropoutMode, Gradients, ModelRole, NetSpec, Optimizer, Tape};

/// Largest exploration level; beyond it flattening reverses preferences.
pub const MAX_EXPLORATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArch {
    pub dim: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    /// Multiplier on the initial actor output layer so the untrained policy
    /// starts close to uniform.
    pub output_init_scale: f64,
}

impl PolicyArch {
    pub fn new(dim: usize) -> Self {
        PolicyArch {
            dim,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![64],
            activation: Activation::Tanh,
            dropout: 0.1,
            output_init_scale: 0.01,
        }
    }
}

/// Actor (state → per-coordinate scores) and critic (state → value).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    actor: DenseNet,
    critic: DenseNet,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(arch: &PolicyArch, rng: &mut R) -> Result<Self> {
        let dims = |hidden: &[usize], out: usize| {
            let mut d = vec![2 * arch.dim];
            d.extend(hidden);
            d.push(out);
            d
        };
        let mut actor = DenseNet::new(
            &NetSpec::new(dims(&arch.actor_hidden, arch.dim), arch.activation, Activation::Identity)
                .with_dropout(arch.dropout),
            rng,
        )?;
        let last = actor.layers().len() - 1;
        actor.scale_layer(last, arch.output_init_scale);
        let critic = DenseNet::new(
            &NetSpec::new(dims(&arch.critic_hidden, 1), arch.activation, Activation::Identity),
            rng,
        )?;
        Self::from_nets(actor, critic)
    }

    pub fn from_nets(actor: DenseNet, critic: DenseNet) -> Result<Self> {
        let dim = actor.output_dim();
        if actor.input_dim() != 2 * dim {
            return Err(Error::DimensionMismatch {
                context: "actor input layer",
                expected: 2 * dim,
                actual: actor.input_dim(),
            });
        }
        if critic.input_dim() != 2 * dim || critic.output_dim() != 1 {
            return Err(Error::invalid("critic must map the 2D state encoding to one value"));
        }
        Ok(PolicyModel { actor, critic })
    }

    pub fn dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn actor(&self) -> &DenseNet {
        &self.actor
    }

    pub fn critic(&self) -> &DenseNet {
        &self.critic
    }

    pub fn actor_mut(&mut self) -> &mut DenseNet {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut DenseNet {
        &mut self.critic
    }

    pub fn same_parameters(&self, other: &PolicyModel) -> bool {
        self.actor.same_parameters(&other.actor) && self.critic.same_parameters(&other.critic)
    }

    fn check_state(&self, state: &MissingState) -> Result<()> {
        if state.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "policy state",
                expected: self.dim(),
                actual: state.dim(),
            });
        }
        Ok(())
    }

    /// Actor scores. `dropout_seed` fixes the dropout mask; `None` disables dropout.
    pub fn scores(&self, state: &MissingState, dropout_seed: Option<u64>) -> Result<(Vec<f64>, Tape)> {
        self.check_state(state)?;
        let x = encode_state(state);
        match dropout_seed {
            Some(seed) => self
                .actor
                .forward(&x, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(seed)),
            None => self
                .actor
                .forward(&x, DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn value(&self, state: &MissingState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.critic.predict(&encode_state(state))?[0])
    }

    pub fn to_checkpoints(&self) -> (Checkpoint, Checkpoint) {
        (
            Checkpoint::new(ModelRole::Actor, self.actor.clone()),
            Checkpoint::new(ModelRole::Critic, self.critic.clone()),
        )
    }

    pub fn from_checkpoints(actor: Checkpoint, critic: Checkpoint) -> Result<Self> {
        if actor.role != ModelRole::Actor || critic.role != ModelRole::Critic {
            return Err(Error::Format {
                what: "policy checkpoint",
                detail: format!("roles are {:?}/{:?}, expected Actor/Critic", actor.role, critic.role),
            });
        }
        Self::from_nets(actor.net, critic.net)
    }
}

/// Categorical distribution over coordinates with zero mass on observed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    legal: Mask,
}

impl ActionDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Coordinates that may be chosen (the unobserved ones).
    pub fn is_legal(&self, i: usize) -> bool {
        !self.legal.is_observed(i)
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.probs[action].ln()
    }

    /// Uniform over the unobserved coordinates of `mask`.
    pub fn uniform(mask: &Mask) -> Result<Self> {
        masked_softmax(&vec![0.0; mask.dim()], mask)
    }
}

/// `probs ∝ (1 − m) · exp(s − max_unobserved s)`.
pub fn masked_softmax(scores: &[f64], mask: &Mask) -> Result<ActionDistribution> {
    if scores.len() != mask.dim() {
        return Err(Error::DimensionMismatch {
            context: "action scores",
            expected: mask.dim(),
            actual: scores.len(),
        });
    }
    let max = mask
        .unobserved_indices()
        .map(|i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoLegalAction);
    }
    let mut probs: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| if mask.is_observed(i) { 0.0 } else { (s - max).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ActionDistribution {
        probs,
        legal: mask.clone(),
    })
}

/// The policy's distribution at `state`. `dropout_seed` as in [`PolicyModel::scores`].
pub fn action_distribution(
    model: &PolicyModel,
    state: &MissingState,
    dropout_seed: Option<u64>,
) -> Result<ActionDistribution> {
    let (scores, _) = model.scores(state, dropout_seed)?;
    masked_softmax(&scores, state.mask())
}

/// `u_i = (1−e)π_i + e(1−π_i)` on unobserved coordinates, renormalized.
pub fn flatten_explore(dist: &ActionDistribution, e: f64) -> Result<ActionDistribution> {
    if !(0.0..=MAX_EXPLORATION).contains(&e) {
        return Err(Error::invalid(format!("exploration level {e} outside [0, 0.5]")));
    }
    if e == 0.0 {
        return Ok(dist.clone());
    }
    let mut probs: Vec<f64> = dist
        .probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if dist.is_legal(i) {
                (1.0 - e) * p + e * (1.0 - p)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ActionDistribution {
        probs,
        legal: dist.legal.clone(),
    })
}

/// Categorical draw; never returns an observed coordinate.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_legal = None;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_legal = Some(i);
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left `acc` a hair below 1.
    last_legal
        .or_else(|| dist.legal.unobserved_indices().next())
        .expect("distribution has a legal action")
}

/// Argmax of the actor scores over unobserved coordinates, dropout off,
/// lowest index on ties.
pub fn greedy_action(model: &PolicyModel, state: &MissingState) -> Result<usize> {
    let (scores, _) = model.scores(state, None)?;
    masked_argmax(&scores, state.mask())
}

pub fn masked_argmax(scores: &[f64], mask: &Mask) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in mask.unobserved_indices() {
        if best.is_none_or(|(_, s)| scores[i] > s) {
            best = Some((i, scores[i]));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoLegalAction)
}

/// Gradient of `log u_a` with respect to the scores, where `u` is the
/// `e`-flattened softmax. The flattening normalizer does not depend on the
/// scores, so only the numerator contributes.
fn log_prob_score_gradient(dist: &ActionDistribution, action: usize, e: f64) -> Vec<f64> {
    let pa = dist.probs[action];
    let ratio = (1.0 - 2.0 * e) * pa / ((1.0 - 2.0 * e) * pa + e);
    dist.probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            if !dist.is_legal(j) {
                0.0
            } else {
                let delta = if j == action { 1.0 } else { 0.0 };
                ratio * (delta - pj)
            }
        })
        .collect()
}

/// Settings for the policy-gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientConfig {
    /// Standardize advantages within the batch.
    pub normalize_advantage: bool,
}

#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub actor: Gradients,
    pub critic: Gradients,
    pub steps: usize,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub critic_loss: f64,
}

/// Surrogate loss `−mean_t A⁽ᵗ⁾ log π(a⁽ᵗ⁾ | s⁽ᵗ⁾)` with `A = R − V(s)`, and
/// the critic's squared-error loss to `R`. Every step of an episode receives
/// the episode's terminal reward.
pub fn policy_gradient(
    model: &PolicyModel,
    episodes: &[Episode],
    rewards: &[f64],
    cfg: &GradientConfig,
) -> Result<PolicyGradient> {
    if episodes.len() != rewards.len() {
        return Err(Error::DimensionMismatch {
            context: "episode rewards",
            expected: episodes.len(),
            actual: rewards.len(),
        });
    }
    let mut actor = Gradients::zeros_like(&model.actor);
    let mut critic = Gradients::zeros_like(&model.critic);
    let steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
    if steps == 0 {
        return Ok(PolicyGradient {
            actor,
            critic,
            steps,
            mean_reward: 0.0,
            mean_advantage: 0.0,
            critic_loss: 0.0,
        });
    }
    let n = steps as f64;

    // Critic values, detached from the actor.
    let mut advantages = Vec::with_capacity(steps);
    let mut critic_loss = 0.0;
    for (ep, &reward) in episodes.iter().zip(rewards) {
        for step in &ep.steps {
            model.check_state(&step.state)?;
            let (v, tape) = model
                .critic
                .forward(&encode_state(&step.state), DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            let err = v[0] - reward;
            critic_loss += err * err / n;
            model.critic.backward_accumulate(&tape, &[2.0 * err / n], 1.0, &mut critic)?;
            advantages.push(reward - v[0]);
        }
    }
    let mean_advantage = advantages.iter().sum::<f64>() / n;
    if cfg.normalize_advantage && steps > 1 {
        let var = advantages.iter().map(|a| (a - mean_advantage).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        advantages.iter_mut().for_each(|a| *a = (*a - mean_advantage) / sd);
    }

    let mut k = 0;
    for ep in episodes {
        for step in &ep.steps {
            let adv = advantages[k];
            k += 1;
            if adv == 0.0 {
                continue;
            }
            let (scores, tape) = model.scores(&step.state, step.dropout_seed)?;
            let dist = masked_softmax(&scores, step.state.mask())?;
            if !dist.is_legal(step.action) {
                return Err(Error::invalid(format!(
                    "recorded action {} was already observed",
                    step.action
                )));
            }
            let dlog = log_prob_score_gradient(&dist, step.action, step.explore);
            let upstream: Vec<f64> = dlog.iter().map(|g| -adv * g / n).collect();
            model.actor.backward_accumulate(&tape, &upstream, 1.0, &mut actor)?;
        }
    }
    Ok(PolicyGradient {
        actor,
        critic,
        steps,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        mean_advantage,
        critic_loss,
    })
}

/// The surrogate objective whose gradient [`policy_gradient`] returns, with
/// advantages from the current critic held fixed.
pub fn surrogate_loss(model: &PolicyModel, episodes: &[Episode], rewards: &[f64]) -> Result<f64> {
    let steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
    let mut total = 0.0;
    for (ep, &reward) in episodes.iter().zip(rewards) {
        for step in &ep.steps {
            let adv = reward - model.value(&step.state)?;
            let (scores, _) = model.scores(&step.state, step.dropout_seed)?;
            let dist = flatten_explore(&masked_softmax(&scores, step.state.mask())?, step.explore)?;
            total -= adv * dist.log_prob(step.action);
        }
    }
    Ok(total / steps.max(1) as f64)
}

/// Optimizer state for both policy networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOptimizers {
    pub actor: Optimizer,
    pub critic: Optimizer,
}

impl PolicyOptimizers {
    pub fn adam(actor_lr: f64, critic_lr: f64) -> Result<Self> {
        Ok(PolicyOptimizers {
            actor: Optimizer::adam(actor_lr)?,
            critic: Optimizer::adam(critic_lr)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub critic_loss: f64,
}

/// One REINFORCE step with learning rate `beta` for the actor and
/// `critic_lr` for the critic.
pub fn reinforce_update(
    model: &mut PolicyModel,
    opts: &mut PolicyOptimizers,
    episodes: &[Episode],
    rewards: &[f64],
    beta: f64,
    critic_lr: f64,
    cfg: &GradientConfig,
) -> Result<UpdateDiagnostics> {
    let g = policy_gradient(model, episodes, rewards, cfg)?;
    opts.actor.weighted_step(&mut model.actor, &[(beta, &g.actor)])?;
    opts.critic.weighted_step(&mut model.critic, &[(critic_lr, &g.critic)])?;
    Ok(UpdateDiagnostics {
        mean_reward: g.mean_reward,
        mean_advantage: g.mean_advantage,
        critic_loss: g.critic_loss,
    })
}
