//! Sequential-measurement episodes: rollouts, horizon, terminal reward and
//! trace output.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imputer::ImputerModel;
use crate::missingness::MissingState;
use crate::policy::{flatten_explore, greedy_action, masked_softmax, sample_action, PolicyModel};

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionMode {
    /// Sample from the flattened distribution with exploration level `e`.
    Explore(f64),
    /// Sample from the unflattened distribution.
    Stochastic,
    /// Argmax with dropout disabled.
    Greedy,
}

impl ActionMode {
    fn explore_level(self) -> f64 {
        match self {
            ActionMode::Explore(e) => e,
            _ => 0.0,
        }
    }
}

/// One measurement decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// State before the measurement.
    pub state: MissingState,
    pub action: usize,
    /// Log-probability of `action` under the distribution that sampled it.
    pub log_prob: f64,
    /// Exploration level of that distribution.
    pub explore: f64,
    /// Seed of the actor's dropout mask, `None` when dropout was off.
    pub dropout_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    pub terminal: MissingState,
    pub source: Vec<f64>,
}

impl Episode {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Builds an episode from a fixed measurement order, with no policy
    /// involved. Log-probabilities are zero.
    pub fn from_order(source: &[f64], order: &[usize]) -> Result<Self> {
        let mut state = MissingState::empty(source.len());
        let mut steps = Vec::with_capacity(order.len());
        for &a in order {
            if a >= source.len() || state.mask().is_observed(a) {
                return Err(Error::invalid(format!("invalid measurement {a} in order {order:?}")));
            }
            steps.push(Step {
                state: state.clone(),
                action: a,
                log_prob: 0.0,
                explore: 0.0,
                dropout_seed: None,
            });
            state.reveal(a, source[a]);
        }
        Ok(Episode {
            steps,
            terminal: state,
            source: source.to_vec(),
        })
    }
}

/// Roll out `horizon` measurements on `source`. With `DropoutMode::Train` the
/// actor's dropout is active (except in greedy mode) and each step's mask seed
/// is recorded so the gradient can replay it.
pub fn run_episode<R: Rng + ?Sized>(
    policy: &PolicyModel,
    source: &[f64],
    horizon: usize,
    mode: ActionMode,
    dropout: crate::nn::DropoutMode,
    rng: &mut R,
) -> Result<Episode> {
    let dim = source.len();
    if dim != policy.dim() {
        return Err(Error::DimensionMismatch {
            context: "episode source",
            expected: policy.dim(),
            actual: dim,
        });
    }
    if horizon == 0 || horizon > dim {
        return Err(Error::invalid(format!("horizon {horizon} outside 1..={dim}")));
    }
    let explore = mode.explore_level();
    let mut state = MissingState::empty(dim);
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (action, log_prob, dropout_seed) = match mode {
            ActionMode::Greedy => (greedy_action(policy, &state)?, 0.0, None),
            ActionMode::Stochastic | ActionMode::Explore(_) => {
                let seed = (dropout == crate::nn::DropoutMode::Train).then(|| rng.random::<u64>());
                let (scores, _) = policy.scores(&state, seed)?;
                let dist = flatten_explore(&masked_softmax(&scores, state.mask())?, explore)?;
                let a = sample_action(&dist, rng);
                (a, dist.log_prob(a), seed)
            }
        };
        steps.push(Step {
            state: state.clone(),
            action,
            log_prob,
            explore,
            dropout_seed,
        });
        state.reveal(action, source[action]);
    }
    Ok(Episode {
        steps,
        terminal: state,
        source: source.to_vec(),
    })
}

/// A single imputation of real missing data, used as the episode's ground truth.
pub fn generate_complete<R: Rng + ?Sized>(
    imputer: &ImputerModel,
    state: &MissingState,
    rng: &mut R,
) -> Result<Vec<f64>> {
    imputer.impute_sample(state, rng)
}

/// `round(D · (1 − rate))`, at least 1.
pub fn horizon_for(dim: usize, missing_rate: f64) -> usize {
    ((dim as f64 * (1.0 - missing_rate)).round() as usize).clamp(1, dim.max(1))
}

/// Root-mean-squared error over all coordinates.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len().max(1) as f64).sqrt()
}

/// Smallest RMSE among the candidates.
pub fn top_k_rmse(candidates: &[Vec<f64>], truth: &[f64]) -> f64 {
    candidates
        .iter()
        .map(|c| rmse(c, truth))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardConfig {
    pub k: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { k: 3 }
    }
}

/// `−min_i RMSE(x̂_i, x̄)` over `k` imputations of the terminal state.
pub fn terminal_reward<R: Rng + ?Sized>(
    imputer: &ImputerModel,
    episode: &Episode,
    cfg: &RewardConfig,
    rng: &mut R,
) -> Result<f64> {
    if cfg.k == 0 {
        return Err(Error::invalid("reward needs k >= 1 candidates"));
    }
    let candidates = imputer.impute_multiple(&episode.terminal, cfg.k, rng)?;
    Ok(-top_k_rmse(&candidates, &episode.source))
}

/// Writes `episode_id,t,action,reward_at_terminal` rows.
pub fn write_trace_csv(path: impl AsRef<Path>, episodes: &[Episode], rewards: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "episode_id,t,action,reward_at_terminal").expect("write to vec");
    for (id, (ep, r)) in episodes.iter().zip(rewards).enumerate() {
        for (t, step) in ep.steps.iter().enumerate() {
            writeln!(out, "{id},{t},{},{r}", step.action).expect("write to vec");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputer::ImputerArch;
    use crate::nn::{Activation, DropoutMode};
    use crate::policy::PolicyArch;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn policy(dim: usize, seed: u64) -> PolicyModel {
        let arch = PolicyArch {
            dim,
            actor_hidden: vec![8],
            critic_hidden: vec![4],
            activation: Activation::Tanh,
            dropout: 0.2,
            output_init_scale: 1.0,
        };
        PolicyModel::new(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn uniform_policy(dim: usize) -> PolicyModel {
        let mut p = policy(dim, 0);
        let last = p.actor().layers().len() - 1;
        p.actor_mut().scale_layer(last, 0.0);
        p
    }

    #[test]
    fn horizon_examples() {
        assert_eq!(horizon_for(100, 0.9), 10);
        assert_eq!(horizon_for(144, 0.85), 22);
        assert_eq!(horizon_for(50, 0.0), 50);
        assert_eq!(horizon_for(10, 0.99), 1);
    }

    #[test]
    fn full_horizon_reveals_source() {
        let p = policy(6, 1);
        let src: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        let ep = run_episode(&p, &src, 6, ActionMode::Explore(0.1), DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert!(ep.terminal.mask().is_full());
        assert_eq!(ep.terminal.values(), &src[..]);
    }

    #[test]
    fn horizon_beyond_dim_rejected() {
        let p = policy(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_episode(&p, &[0.0; 3], 4, ActionMode::Stochastic, DropoutMode::Eval, &mut rng).is_err());
        assert!(run_episode(&p, &[0.0; 3], 0, ActionMode::Stochastic, DropoutMode::Eval, &mut rng).is_err());
    }

    #[test]
    fn single_step_uniform_frequencies() {
        let p = uniform_policy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let ep = run_episode(&p, &[0.0; 4], 1, ActionMode::Stochastic, DropoutMode::Eval, &mut rng).unwrap();
            counts[ep.steps[0].action] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn greedy_reruns_identical() {
        let p = policy(8, 3);
        let src = vec![0.5; 8];
        let a = run_episode(&p, &src, 5, ActionMode::Greedy, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = run_episode(&p, &src, 5, ActionMode::Greedy, DropoutMode::Train, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        assert_eq!(a.actions(), b.actions());
    }

    #[test]
    fn rmse_hand_fixture() {
        let truth = [1.0, 0.0];
        let cands = vec![vec![0.0, 0.0], vec![1.0, 0.5]];
        let r = top_k_rmse(&cands, &truth);
        assert!((r - (0.25f64 / 2.0).sqrt()).abs() < 1e-15);
        assert!((top_k_rmse(&cands[..1], &truth) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(top_k_rmse(&[truth.to_vec()], &truth), 0.0);
    }

    #[test]
    fn generated_data_respects_observations() {
        let imp = ImputerModel::new(&ImputerArch::image(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut s = MissingState::empty(6);
        s.reveal(2, 0.25);
        s.reveal(4, 0.75);
        let a = generate_complete(&imp, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_complete(&imp, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].to_bits(), 0.25f64.to_bits());
        assert_eq!(a[4].to_bits(), 0.75f64.to_bits());
        let full = MissingState::observe(&[0.1; 6], crate::missingness::Mask::observed(6)).unwrap();
        assert_eq!(generate_complete(&imp, &full, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), vec![0.1; 6]);
    }

    #[test]
    fn reward_is_nonpositive() {
        let imp = ImputerModel::new(&ImputerArch::image(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = policy(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let src: Vec<f64> = (0..5).map(|_| rng.random()).collect();
            let ep = run_episode(&p, &src, 2, ActionMode::Stochastic, DropoutMode::Train, &mut rng).unwrap();
            let r = terminal_reward(&imp, &ep, &RewardConfig { k: 3 }, &mut rng).unwrap();
            assert!(r <= 0.0 && r.is_finite());
        }
        let ep = run_episode(&p, &[0.2; 5], 5, ActionMode::Greedy, DropoutMode::Eval, &mut rng).unwrap();
        assert_eq!(terminal_reward(&imp, &ep, &RewardConfig { k: 1 }, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn trace_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.csv");
        let ep = Episode::from_order(&[1.0, 2.0, 3.0], &[2, 0]).unwrap();
        write_trace_csv(&path, &[ep], &[-0.5]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "episode_id,t,action,reward_at_terminal\n0,0,2,-0.5\n0,1,0,-0.5\n");
    }

    #[test]
    fn from_order_rejects_repeats() {
        assert!(Episode::from_order(&[0.0; 3], &[1, 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn episode_invariants(seed in any::<u64>(), dim in 2usize..12, t_frac in 0.0f64..1.0, mode_pick in 0usize..4) {
            let p = policy(dim, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let src: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = 1 + ((dim - 1) as f64 * t_frac) as usize;
            let mode = [ActionMode::Stochastic, ActionMode::Explore(0.1), ActionMode::Explore(0.5), ActionMode::Greedy][mode_pick];
            let ep = run_episode(&p, &src, t, mode, DropoutMode::Train, &mut rng).unwrap();
            let actions: HashSet<usize> = ep.actions().into_iter().collect();
            prop_assert_eq!(actions.len(), t);
            prop_assert_eq!(ep.terminal.mask().observed_count(), t);
            let mut replay = MissingState::empty(dim);
            for (i, step) in ep.steps.iter().enumerate() {
                prop_assert_eq!(step.state.mask().observed_count(), i);
                prop_assert_eq!(&step.state, &replay);
                for j in step.state.mask().observed_indices() {
                    prop_assert_eq!(step.state.values()[j], src[j]);
                }
                replay.reveal(step.action, src[step.action]);
            }
            prop_assert_eq!(&replay, &ep.terminal);
        }

        #[test]
        fn top_k_laws(seed in any::<u64>(), dim in 1usize..10, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
            let cands: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random()).collect()).collect();
            let mut prev = f64::INFINITY;
            for j in 1..=k {
                let r = top_k_rmse(&cands[..j], &truth);
                prop_assert!(r <= prev && r >= 0.0);
                prev = r;
            }
            prop_assert!(prev > 0.0);
            let mut with_truth = cands.clone();
            with_truth.push(truth.clone());
            prop_assert_eq!(top_k_rmse(&with_truth, &truth), 0.0);
        }
    }
}
