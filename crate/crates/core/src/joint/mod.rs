//! The joint policy/imputer training loop, its ablations, and run output.

pub mod baselines;
pub mod config;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

pub use baselines::{baseline_explicit, baseline_uninform, explicit_choice, sample_variance};
pub use config::{Ablation, JointConfig};

use crate::env::{generate_complete, horizon_for, run_episode, terminal_reward, ActionMode, Episode, RewardConfig};
use crate::error::{Error, Result};
use crate::imputer::{adapt_step, pretrain, ImputerModel, PretrainReport};
use crate::missingness::{MissingDataset, MissingState};
use crate::nn::{write_checkpoint, DropoutMode, Optimizer};
use crate::policy::{policy_gradient, PolicyModel, PolicyOptimizers};
use crate::seeding::{stream, StreamRng};

/// Labels of the independent generator streams used by training.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const BATCH: u64 = 10;
    pub const GENERATE: u64 = 11;
    pub const EXPLORE_EPISODES: u64 = 12;
    pub const EXPLORE_REWARDS: u64 = 13;
    pub const META_ADAPT: u64 = 14;
    pub const META_EPISODES: u64 = 15;
    pub const META_REWARDS: u64 = 16;
    pub const UPDATE_EPISODES: u64 = 17;
    pub const ADAPT: u64 = 18;
    pub const FINETUNE: u64 = 30;
}

/// Generator for one purpose within one outer iteration.
pub fn iteration_rng(seed: u64, iteration: usize, purpose: u64) -> StreamRng {
    stream(seed, &[iteration as u64, purpose])
}

/// Test hooks into the loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JointHooks {
    /// Make the hypothetical adaptation return the imputer unchanged.
    pub stub_meta_adaptation: bool,
}

/// One row of `run.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean terminal reward of the exploration episodes.
    pub reward_explore: f64,
    /// Mean reward of the meta episodes under the adapted imputer; NaN when skipped.
    pub reward_meta: f64,
    pub imputer_unsup_loss: f64,
    pub imputer_sup_loss: f64,
    pub critic_loss: f64,
    pub reward_moving_average: f64,
}

pub const RUN_CSV_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<IterationRecord>,
    pub stopped_early: bool,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,reward_explore,reward_meta,imputer_unsup_loss,imputer_sup_loss,critic_loss,reward_moving_average,schema_version\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.reward_explore,
                r.reward_meta,
                r.imputer_unsup_loss,
                r.imputer_sup_loss,
                r.critic_loss,
                r.reward_moving_average,
                RUN_CSV_SCHEMA
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub policy: PolicyModel,
    pub imputer: ImputerModel,
    pub record: RunRecord,
    /// Episodes and rewards of the final exploration batch.
    pub last_episodes: Vec<Episode>,
    pub last_rewards: Vec<f64>,
}

/// Fresh policy and imputer for `cfg`.
pub fn init_models(cfg: &JointConfig) -> Result<(PolicyModel, ImputerModel)> {
    let mut rng = stream(cfg.seed, &[streams::INIT]);
    let imputer = ImputerModel::new(&cfg.imputer_arch(), &mut rng)?;
    let policy = PolicyModel::new(&cfg.policy_arch(), &mut rng)?;
    Ok((policy, imputer))
}

/// Self-masking pretraining with the config's epochs, batch and learning rate.
pub fn pretrain_imputer(cfg: &JointConfig, imputer: &mut ImputerModel, data: &MissingDataset) -> Result<PretrainReport> {
    let mut opt = Optimizer::adam(cfg.pretrain_lr)?;
    let mut rng = stream(cfg.seed, &[streams::PRETRAIN]);
    pretrain(
        imputer,
        &mut opt,
        data,
        cfg.pretrain_epochs,
        cfg.pretrain_batch,
        &cfg.imputer_loss(),
        &mut rng,
    )
}

fn sample_batch<R: Rng + ?Sized>(data: &MissingDataset, size: usize, rng: &mut R) -> Vec<MissingState> {
    rand::seq::index::sample(rng, data.len(), size.min(data.len()))
        .into_iter()
        .map(|i| data.get(i).clone())
        .collect()
}

fn generate_batch<R: Rng + ?Sized>(imputer: &ImputerModel, batch: &[MissingState], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|s| generate_complete(imputer, s, rng)).collect()
}

fn rollouts<R: Rng + ?Sized>(
    policy: &PolicyModel,
    sources: &[Vec<f64>],
    horizon: usize,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    sources
        .iter()
        .map(|x| run_episode(policy, x, horizon, mode, DropoutMode::Train, rng))
        .collect()
}

fn rewards<R: Rng + ?Sized>(
    imputer: &ImputerModel,
    episodes: &[Episode],
    k: usize,
    iteration: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cfg = RewardConfig { k };
    let out: Vec<f64> = episodes
        .iter()
        .map(|e| terminal_reward(imputer, e, &cfg, rng))
        .collect::<Result<_>>()?;
    if let Some(bad) = out.iter().find(|r| !r.is_finite()) {
        return Err(Error::Diverged {
            stage: "joint training reward",
            iteration,
            detail: format!("reward {bad}"),
        });
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn terminals(episodes: &[Episode]) -> (Vec<MissingState>, Vec<Vec<f64>>) {
    episodes.iter().map(|e| (e.terminal.clone(), e.source.clone())).unzip()
}

/// Optimizer for imputer adaptation; its step size comes from the α weights.
fn adaptation_optimizer() -> Optimizer {
    Optimizer::adam(1e-3).expect("positive learning rate")
}

/// Runs the joint loop starting from `policy` and a pretrained `imputer`.
///
/// Per iteration: generate complete data from a real batch, roll exploring
/// episodes, form a hypothetical imputer step on their terminal states, roll
/// non-exploring episodes rewarded by that hypothetical imputer, update the
/// policy on both reward terms, roll again with the new policy, then take the
/// real imputer step. The hypothetical imputer is dropped.
pub fn joint_train(
    cfg: &JointConfig,
    mut policy: PolicyModel,
    mut imputer: ImputerModel,
    data: &MissingDataset,
    hooks: JointHooks,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("joint training needs a non-empty dataset"));
    }
    if data.dim() != policy.dim() || data.dim() != imputer.dim() {
        return Err(Error::DimensionMismatch {
            context: "joint training data",
            expected: policy.dim(),
            actual: data.dim(),
        });
    }
    let horizon = horizon_for(data.dim(), cfg.missing_rate);
    let beta_prime = cfg.effective_beta_prime();
    let meta = cfg.ablation == Ablation::Full;
    let adapt = cfg.ablation != Ablation::NoAdaptation;
    let loss_cfg = cfg.imputer_loss();
    let gcfg = cfg.gradient_config();
    let mut opts = PolicyOptimizers::adam(cfg.beta.max(f64::MIN_POSITIVE), cfg.critic_lr.max(f64::MIN_POSITIVE))?;
    let mut imputer_opt = adaptation_optimizer();

    let mut record = RunRecord::default();
    let mut best_average = f64::NEG_INFINITY;
    let mut best_at = 0usize;
    let mut last_episodes = Vec::new();
    let mut last_rewards = Vec::new();

    for it in 0..cfg.iterations {
        let rng = |purpose| iteration_rng(cfg.seed, it, purpose);

        // (1) complete data from a batch of real missing examples
        let batch = sample_batch(data, cfg.batch_size, &mut rng(streams::BATCH));
        let sources = generate_batch(&imputer, &batch, &mut rng(streams::GENERATE))?;

        // (2) exploring episodes, rewarded by the current imputer
        let e1 = rollouts(&policy, &sources, horizon, ActionMode::Explore(cfg.explore), &mut rng(streams::EXPLORE_EPISODES))?;
        let r1 = rewards(&imputer, &e1, cfg.k_reward, it, &mut rng(streams::EXPLORE_REWARDS))?;

        // (3)-(4) hypothetical adaptation and the meta episodes it rewards
        let mut reward_meta = f64::NAN;
        let mut meta_gradient = None;
        if meta {
            let phi_new = if hooks.stub_meta_adaptation {
                imputer.clone()
            } else {
                let (states, targets) = terminals(&e1);
                adapt_step(
                    &imputer,
                    &imputer_opt,
                    &batch,
                    &states,
                    &targets,
                    cfg.alpha,
                    cfg.alpha_prime,
                    &loss_cfg,
                    &mut rng(streams::META_ADAPT),
                )?
                .model
            };
            let e2 = rollouts(&policy, &sources, horizon, ActionMode::Stochastic, &mut rng(streams::META_EPISODES))?;
            let r2 = rewards(&phi_new, &e2, cfg.k_reward, it, &mut rng(streams::META_REWARDS))?;
            reward_meta = mean(&r2);
            meta_gradient = Some(policy_gradient(&policy, &e2, &r2, &gcfg)?);
        }

        // (5) two-term policy update; the critic tracks the exploration rewards
        let g1 = policy_gradient(&policy, &e1, &r1, &gcfg)?;
        let mut actor_terms = vec![(cfg.beta, &g1.actor)];
        if let Some(g2) = &meta_gradient {
            actor_terms.push((beta_prime, &g2.actor));
        }
        opts.actor.weighted_step(policy.actor_mut(), &actor_terms)?;
        opts.critic.weighted_step(policy.critic_mut(), &[(cfg.critic_lr, &g1.critic)])?;

        // (6)-(7) episodes from the updated policy drive the real imputer step
        let (mut unsup, mut sup) = (f64::NAN, f64::NAN);
        if adapt && (cfg.alpha > 0.0 || cfg.alpha_prime > 0.0) {
            let e3 = rollouts(&policy, &sources, horizon, ActionMode::Stochastic, &mut rng(streams::UPDATE_EPISODES))?;
            let (states, targets) = terminals(&e3);
            let adapted = adapt_step(
                &imputer,
                &imputer_opt,
                &batch,
                &states,
                &targets,
                cfg.alpha,
                cfg.alpha_prime,
                &loss_cfg,
                &mut rng(streams::ADAPT),
            )?;
            if !(adapted.unsupervised_loss.is_finite() && adapted.supervised_loss.is_finite()) {
                return Err(Error::Diverged {
                    stage: "joint training imputer",
                    iteration: it,
                    detail: format!(
                        "losses {} / {}",
                        adapted.unsupervised_loss, adapted.supervised_loss
                    ),
                });
            }
            imputer = adapted.model;
            imputer_opt = adapted.optimizer;
            unsup = adapted.unsupervised_loss;
            sup = adapted.supervised_loss;
        }

        let reward_explore = mean(&r1);
        let window = cfg.plateau_window.max(1);
        let recent: Vec<f64> = record
            .rows
            .iter()
            .rev()
            .take(window - 1)
            .map(|r| r.reward_explore)
            .chain(std::iter::once(reward_explore))
            .collect();
        let moving = mean(&recent);
        record.rows.push(IterationRecord {
            iteration: it,
            reward_explore,
            reward_meta,
            imputer_unsup_loss: unsup,
            imputer_sup_loss: sup,
            critic_loss: g1.critic_loss,
            reward_moving_average: moving,
        });
        log::info!(
            "iteration {it}: reward {reward_explore:.5} (avg {moving:.5}) meta {reward_meta:.5} critic {:.5}",
            g1.critic_loss
        );
        last_episodes = e1;
        last_rewards = r1;

        if record.rows.len() >= window {
            if moving > best_average {
                best_average = moving;
                best_at = it;
            } else if cfg.patience > 0 && it - best_at >= cfg.patience {
                log::info!("reward plateau at iteration {it}; stopping");
                record.stopped_early = true;
                break;
            }
        }
    }

    if cfg.ablation == Ablation::NoAdaptation {
        imputer = finetune_after(&policy, &imputer, data, cfg)?;
    }
    Ok(JointOutcome {
        policy,
        imputer,
        record,
        last_episodes,
        last_rewards,
    })
}

/// Adapt the imputer to a frozen policy's missingness, `cfg.finetune_iterations`
/// combined steps.
pub fn finetune_after(
    policy: &PolicyModel,
    imputer: &ImputerModel,
    data: &MissingDataset,
    cfg: &JointConfig,
) -> Result<ImputerModel> {
    let horizon = horizon_for(data.dim(), cfg.missing_rate);
    let loss_cfg = cfg.imputer_loss();
    let mut model = imputer.clone();
    let mut opt = adaptation_optimizer();
    for it in 0..cfg.finetune_iterations {
        let rng = |purpose| stream(cfg.seed, &[streams::FINETUNE, it as u64, purpose]);
        let batch = sample_batch(data, cfg.batch_size, &mut rng(streams::BATCH));
        let sources = generate_batch(&model, &batch, &mut rng(streams::GENERATE))?;
        let eps = rollouts(policy, &sources, horizon, ActionMode::Stochastic, &mut rng(streams::UPDATE_EPISODES))?;
        let (states, targets) = terminals(&eps);
        let adapted = adapt_step(
            &model,
            &opt,
            &batch,
            &states,
            &targets,
            cfg.alpha,
            cfg.alpha_prime,
            &loss_cfg,
            &mut rng(streams::ADAPT),
        )?;
        model = adapted.model;
        opt = adapted.optimizer;
    }
    Ok(model)
}

/// 64-bit FNV-1a, used to fingerprint checkpoints in run summaries.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Writes `config.txt`, `run.csv`, `summary.txt`, the three checkpoints and
/// `episodes.csv` into `dir`.
pub fn write_run_dir(dir: impl AsRef<Path>, cfg: &JointConfig, outcome: &JointOutcome) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("config.txt", cfg.to_text().as_bytes())?;
    write("run.csv", outcome.record.to_csv().as_bytes())?;
    let (actor, critic) = outcome.policy.to_checkpoints();
    let imputer = outcome.imputer.to_checkpoint();
    write_checkpoint(dir.join("actor.ckpt"), &actor)?;
    write_checkpoint(dir.join("critic.ckpt"), &critic)?;
    write_checkpoint(dir.join("imputer.ckpt"), &imputer)?;
    let summary = format!(
        "seed={}\niterations_run={}\nstopped_early={}\nactor_fnv1a={:016x}\ncritic_fnv1a={:016x}\nimputer_fnv1a={:016x}\n",
        cfg.seed,
        outcome.record.rows.len(),
        outcome.record.stopped_early,
        fnv1a(&actor.to_bytes()),
        fnv1a(&critic.to_bytes()),
        fnv1a(&imputer.to_bytes()),
    );
    write("summary.txt", summary.as_bytes())?;
    crate::env::write_trace_csv(dir.join("episodes.csv"), &outcome.last_episodes, &outcome.last_rewards)
}
