//! Flat `key=value` configuration for joint training.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::DatasetKind;
use crate::error::{Error, Result};
use crate::imputer::{ImputerArch, ImputerLossConfig};
use crate::nn::Activation;
use crate::policy::{GradientConfig, PolicyArch};

/// Which parts of the joint loop are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// No hypothetical adaptation and no meta-reward term.
    NoMeta,
    /// Imputer frozen while the policy trains, fine-tuned afterwards.
    NoAdaptation,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMeta => "no-meta",
            Ablation::NoAdaptation => "no-adaptation",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-meta" | "no_meta" => Ok(Ablation::NoMeta),
            "no-adaptation" | "no_adaptation" => Ok(Ablation::NoAdaptation),
            other => Err(Error::invalid(format!(
                "unknown ablation {other:?} (expected full, no-meta or no-adaptation)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub dataset: DatasetKind,
    pub missing_rate: f64,
    /// Imputer step weight for the self-masking term.
    pub alpha: f64,
    /// Imputer step weight for the supervised term on policy episodes.
    pub alpha_prime: f64,
    /// Policy step weight for the exploration-episode term.
    pub beta: f64,
    /// Policy step weight for the meta-reward term.
    pub beta_prime: f64,
    pub explore: f64,
    pub k_reward: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub critic_lr: f64,
    pub normalize_advantage: bool,
    /// Window of the reward moving average used for early stopping.
    pub plateau_window: usize,
    /// Iterations without a new best moving average before stopping; 0 disables.
    pub patience: usize,
    pub finetune_iterations: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub policy_dropout: f64,
    pub imputer_hidden: Vec<usize>,
    pub noise_dim: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub self_mask_fraction: f64,
    pub smoothness_weight: f64,
    pub kernel_sigma: f64,
    pub imputer_k: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self::for_dataset(DatasetKind::SinSingle)
    }
}

impl JointConfig {
    pub fn for_dataset(dataset: DatasetKind) -> Self {
        let sinusoid = dataset.is_sinusoid();
        JointConfig {
            dataset,
            missing_rate: if sinusoid { 0.9 } else { 0.85 },
            alpha: 1e-3,
            alpha_prime: 1e-3,
            beta: 1e-3,
            beta_prime: 1e-3,
            explore: 0.1,
            k_reward: 3,
            batch_size: 64,
            iterations: if sinusoid { 400 } else { 600 },
            seed: 0,
            ablation: Ablation::Full,
            critic_lr: 1e-3,
            normalize_advantage: true,
            plateau_window: 20,
            patience: 0,
            finetune_iterations: 100,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![64],
            policy_dropout: 0.1,
            imputer_hidden: vec![128, 128],
            noise_dim: if sinusoid { 4 } else { 16 },
            pretrain_epochs: 100,
            pretrain_batch: 64,
            pretrain_lr: 1e-3,
            self_mask_fraction: if sinusoid { 0.25 } else { 0.5 },
            smoothness_weight: 0.0,
            kernel_sigma: 1.0,
            imputer_k: if sinusoid { 1 } else { 3 },
        }
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    /// β' as applied: zero whenever the meta term is ablated.
    pub fn effective_beta_prime(&self) -> f64 {
        match self.ablation {
            Ablation::Full => self.beta_prime,
            Ablation::NoMeta | Ablation::NoAdaptation => 0.0,
        }
    }

    pub fn imputer_arch(&self) -> ImputerArch {
        let base = if self.dataset.is_sinusoid() {
            ImputerArch::sinusoid(self.dim())
        } else {
            ImputerArch::image(self.dim())
        };
        ImputerArch {
            noise_dim: self.noise_dim,
            hidden: self.imputer_hidden.clone(),
            ..base
        }
    }

    pub fn policy_arch(&self) -> PolicyArch {
        PolicyArch {
            actor_hidden: self.actor_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            activation: Activation::Tanh,
            dropout: self.policy_dropout,
            ..PolicyArch::new(self.dim())
        }
    }

    pub fn imputer_loss(&self) -> ImputerLossConfig {
        ImputerLossConfig {
            self_mask_fraction: self.self_mask_fraction,
            smoothness_weight: self.smoothness_weight,
            kernel_sigma: self.kernel_sigma,
            k_multiple: self.imputer_k,
        }
    }

    pub fn gradient_config(&self) -> GradientConfig {
        GradientConfig {
            normalize_advantage: self.normalize_advantage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("alpha", self.alpha),
            ("alpha_prime", self.alpha_prime),
            ("beta", self.beta),
            ("beta_prime", self.beta_prime),
            ("critic_lr", self.critic_lr),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(Error::invalid("pretrain_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid(format!("missing_rate {} outside [0, 1)", self.missing_rate)));
        }
        if !(0.0..=0.5).contains(&self.explore) {
            return Err(Error::invalid(format!("explore {} outside [0, 0.5]", self.explore)));
        }
        if self.k_reward == 0 || self.batch_size == 0 || self.pretrain_batch == 0 || self.noise_dim == 0 {
            return Err(Error::invalid("k_reward, batch_size, pretrain_batch and noise_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.policy_dropout) {
            return Err(Error::invalid("policy_dropout must lie in [0, 1)"));
        }
        self.imputer_loss().validate()
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
        }
        fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
            if value.trim().is_empty() {
                return Ok(Vec::new());
            }
            value.split(',').map(|v| parse(key, v.trim())).collect()
        }
        match key {
            "dataset" => self.dataset = value.parse()?,
            "missing_rate" => self.missing_rate = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "alpha_prime" => self.alpha_prime = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "beta_prime" => self.beta_prime = parse(key, value)?,
            "explore" => self.explore = parse(key, value)?,
            "k_reward" => self.k_reward = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "critic_lr" => self.critic_lr = parse(key, value)?,
            "normalize_advantage" => self.normalize_advantage = parse(key, value)?,
            "plateau_window" => self.plateau_window = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "finetune_iterations" => self.finetune_iterations = parse(key, value)?,
            "actor_hidden" => self.actor_hidden = parse_list(key, value)?,
            "critic_hidden" => self.critic_hidden = parse_list(key, value)?,
            "policy_dropout" => self.policy_dropout = parse(key, value)?,
            "imputer_hidden" => self.imputer_hidden = parse_list(key, value)?,
            "noise_dim" => self.noise_dim = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "self_mask_fraction" => self.self_mask_fraction = parse(key, value)?,
            "smoothness_weight" => self.smoothness_weight = parse(key, value)?,
            "kernel_sigma" => self.kernel_sigma = parse(key, value)?,
            "imputer_k" => self.imputer_k = parse(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse config text on top of `self`. A `dataset` line, if present, is
    /// applied first so dataset-dependent defaults do not clobber other keys.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value, got {raw:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "dataset") {
            let kind: DatasetKind = v.parse()?;
            if kind != self.dataset {
                *self = JointConfig {
                    seed: self.seed,
                    ..Self::for_dataset(kind)
                };
            }
        }
        for (k, v) in &pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = JointConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every field as `key=value`, one per line; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("dataset", self.dataset.to_string());
        kv("missing_rate", self.missing_rate.to_string());
        kv("alpha", self.alpha.to_string());
        kv("alpha_prime", self.alpha_prime.to_string());
        kv("beta", self.beta.to_string());
        kv("beta_prime", self.beta_prime.to_string());
        kv("explore", self.explore.to_string());
        kv("k_reward", self.k_reward.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("ablation", self.ablation.to_string());
        kv("critic_lr", self.critic_lr.to_string());
        kv("normalize_advantage", self.normalize_advantage.to_string());
        kv("plateau_window", self.plateau_window.to_string());
        kv("patience", self.patience.to_string());
        kv("finetune_iterations", self.finetune_iterations.to_string());
        kv("actor_hidden", list(&self.actor_hidden));
        kv("critic_hidden", list(&self.critic_hidden));
        kv("policy_dropout", self.policy_dropout.to_string());
        kv("imputer_hidden", list(&self.imputer_hidden));
        kv("noise_dim", self.noise_dim.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("self_mask_fraction", self.self_mask_fraction.to_string());
        kv("smoothness_weight", self.smoothness_weight.to_string());
        kv("kernel_sigma", self.kernel_sigma.to_string());
        kv("imputer_k", self.imputer_k.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = JointConfig::for_dataset(DatasetKind::Mnist12);
        cfg.alpha = 0.123;
        cfg.actor_hidden = vec![7, 9];
        cfg.ablation = Ablation::NoMeta;
        let back = JointConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = JointConfig::from_text("# header\n\nbeta = 0.5   # trailing\nseed=9\n").unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn dataset_defaults_do_not_clobber() {
        let cfg = JointConfig::from_text("noise_dim=3\ndataset=mnist12\n").unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Mnist12);
        assert_eq!(cfg.noise_dim, 3);
    }

    #[test]
    fn unknown_key_and_bad_values() {
        assert!(JointConfig::from_text("gamma=1").is_err());
        assert!(JointConfig::from_text("beta").is_err());
        assert!(JointConfig::from_text("beta=abc").is_err());
        assert!(JointConfig::from_text("ablation=none").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = JointConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.explore = 0.6;
        assert!(cfg.validate().is_err());
        cfg.explore = 0.1;
        cfg.beta = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablations_zero_meta_weight() {
        let mut cfg = JointConfig::default();
        assert_eq!(cfg.effective_beta_prime(), cfg.beta_prime);
        cfg.ablation = Ablation::NoMeta;
        assert_eq!(cfg.effective_beta_prime(), 0.0);
        cfg.ablation = Ablation::NoAdaptation;
        assert_eq!(cfg.effective_beta_prime(), 0.0);
    }
}
