//! Noise-conditioned stochastic imputer.
//!
//! The network maps `[values, mask, (interpolation), noise]` to a proposal for
//! every coordinate; the proposal always passes through [`substitute`], so
//! observed coordinates come back bit-for-bit unchanged.
//!
//! Training without complete data uses self-masking: a fraction of each
//! example's observed coordinates is hidden, and the network is scored on
//! reconstructing them. With `k_multiple > 1` only the best of `k` noise draws
//! is scored, which keeps the noise input meaningful and yields genuinely
//! diverse multiple imputations.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::missingness::{encode_state, substitute, MissingDataset, MissingState};
use crate::nn::{
    Activation, Checkpoint, DenseNet, DropoutMode, Gradients, ModelRole, NetSpec, Optimizer, Tape,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ImputerArch {
    pub dim: usize,
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Feed a linear interpolation of the observations as an extra input
    /// channel and predict a residual on top of it.
    pub interpolation: bool,
}

impl ImputerArch {
    /// Sigmoid output for images in [0, 1].
    pub fn image(dim: usize) -> Self {
        ImputerArch {
            dim,
            noise_dim: 16,
            hidden: vec![128, 128],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            interpolation: false,
        }
    }

    /// Interpolation-assisted imputer with identity output.
    pub fn sinusoid(dim: usize) -> Self {
        ImputerArch {
            dim,
            noise_dim: 4,
            hidden: vec![128, 128],
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
            interpolation: true,
        }
    }

    fn input_dim(&self) -> usize {
        let channels = if self.interpolation { 3 } else { 2 };
        channels * self.dim + self.noise_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputerModel {
    net: DenseNet,
    dim: usize,
    noise_dim: usize,
    interpolation: bool,
}

/// Self-masking and smoothness settings for imputer training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputerLossConfig {
    pub self_mask_fraction: f64,
    pub smoothness_weight: f64,
    pub kernel_sigma: f64,
    pub k_multiple: usize,
}

impl Default for ImputerLossConfig {
    fn default() -> Self {
        ImputerLossConfig {
            self_mask_fraction: 0.5,
            smoothness_weight: 0.0,
            kernel_sigma: 1.0,
            k_multiple: 1,
        }
    }
}

impl ImputerLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.self_mask_fraction > 0.0 && self.self_mask_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "self-mask fraction {} must lie strictly inside (0, 1)",
                self.self_mask_fraction
            )));
        }
        if !(self.smoothness_weight >= 0.0) || !(self.kernel_sigma > 0.0) || self.k_multiple == 0 {
            return Err(Error::invalid(
                "smoothness weight must be >= 0, kernel sigma > 0 and k_multiple >= 1",
            ));
        }
        Ok(())
    }
}

/// Scalar loss, its parameter gradient, and bookkeeping.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
    /// Examples that contributed to the average.
    pub counted: usize,
    /// Examples skipped for having fewer than two observations.
    pub skipped: usize,
}

struct Proposal {
    y: Vec<f64>,
    tape: Tape,
}

impl ImputerModel {
    pub fn new<R: Rng + ?Sized>(arch: &ImputerArch, rng: &mut R) -> Result<Self> {
        if arch.dim == 0 || arch.noise_dim == 0 {
            return Err(Error::invalid("imputer needs positive data and noise dimensions"));
        }
        let mut dims = vec![arch.input_dim()];
        dims.extend(&arch.hidden);
        dims.push(arch.dim);
        let net = DenseNet::new(
            &NetSpec::new(dims, arch.hidden_activation, arch.output_activation),
            rng,
        )?;
        Ok(ImputerModel {
            net,
            dim: arch.dim,
            noise_dim: arch.noise_dim,
            interpolation: arch.interpolation,
        })
    }

    /// Wrap an existing network. Its input must be `2D + Z` (or `3D + Z`
    /// with interpolation) and its output `D`.
    pub fn from_net(net: DenseNet, noise_dim: usize, interpolation: bool) -> Result<Self> {
        let dim = net.output_dim();
        let channels = if interpolation { 3 } else { 2 };
        if net.input_dim() != channels * dim + noise_dim {
            return Err(Error::DimensionMismatch {
                context: "imputer input layer",
                expected: channels * dim + noise_dim,
                actual: net.input_dim(),
            });
        }
        Ok(ImputerModel {
            net,
            dim,
            noise_dim,
            interpolation,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn uses_interpolation(&self) -> bool {
        self.interpolation
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn same_parameters(&self, other: &ImputerModel) -> bool {
        self.noise_dim == other.noise_dim
            && self.interpolation == other.interpolation
            && self.net.same_parameters(&other.net)
    }

    fn check_state(&self, state: &MissingState) -> Result<()> {
        if state.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "imputer state",
                expected: self.dim,
                actual: state.dim(),
            });
        }
        Ok(())
    }

    fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.noise_dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn input(&self, state: &MissingState, interp: Option<&[f64]>, noise: &[f64]) -> Vec<f64> {
        let mut x = encode_state(state);
        if let Some(i) = interp {
            x.extend_from_slice(i);
        }
        x.extend_from_slice(noise);
        x
    }

    fn interpolation_channel(&self, state: &MissingState) -> Option<Vec<f64>> {
        self.interpolation.then(|| interpolate_indices(state))
    }

    /// Raw proposal for every coordinate (before substitution), with tape.
    fn propose<R: Rng + ?Sized>(&self, state: &MissingState, rng: &mut R) -> Result<Proposal> {
        let noise = self.draw_noise(rng);
        let interp = self.interpolation_channel(state);
        let x = self.input(state, interp.as_deref(), &noise);
        let (mut y, tape) = self.net.forward(&x, DropoutMode::Eval, rng)?;
        if let Some(base) = interp {
            y.iter_mut().zip(&base).for_each(|(y, b)| *y += b);
        }
        Ok(Proposal { y, tape })
    }

    /// One completed vector: a fresh noise draw, then substitution.
    pub fn impute_sample<R: Rng + ?Sized>(&self, state: &MissingState, rng: &mut R) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let noise = self.draw_noise(rng);
        let interp = self.interpolation_channel(state);
        let mut y = self.net.predict(&self.input(state, interp.as_deref(), &noise))?;
        if let Some(base) = interp {
            y.iter_mut().zip(&base).for_each(|(y, b)| *y += b);
        }
        substitute(state, &y)
    }

    /// `k` independent completions.
    pub fn impute_multiple<R: Rng + ?Sized>(
        &self,
        state: &MissingState,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if k == 0 {
            return Err(Error::invalid("multiple imputation needs k >= 1"));
        }
        (0..k).map(|_| self.impute_sample(state, rng)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(ModelRole::Imputer, self.net.clone());
        ckpt.extra.extend_from_slice(&(self.noise_dim as u32).to_le_bytes());
        ckpt.extra.push(u8::from(self.interpolation));
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.role != ModelRole::Imputer {
            return Err(Error::Format {
                what: "imputer checkpoint",
                detail: format!("role is {:?}", ckpt.role),
            });
        }
        if ckpt.extra.len() != 5 || ckpt.extra[4] > 1 {
            return Err(Error::Format {
                what: "imputer checkpoint",
                detail: "metadata block must be noise_dim u32 + flag byte".into(),
            });
        }
        let noise_dim = u32::from_le_bytes(ckpt.extra[..4].try_into().unwrap()) as usize;
        Self::from_net(ckpt.net, noise_dim, ckpt.extra[4] == 1)
    }
}

/// Discrete Gaussian smoothing with reflective boundary, as a dense matrix.
#[derive(Debug, Clone)]
pub struct GaussianFilter {
    dim: usize,
    /// Row-major `dim × dim`.
    matrix: Vec<f64>,
}

impl GaussianFilter {
    /// Kernel truncated at 3σ and normalized to unit mass.
    pub fn new(dim: usize, sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil() as isize;
        let raw: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            for (off, w) in (-radius..=radius).zip(&raw) {
                let j = reflect(i as isize + off, dim);
                matrix[i * dim + j] += w / total;
            }
        }
        GaussianFilter { dim, matrix }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Mean squared difference between `x` and its smoothed version, and the
    /// gradient with respect to `x`.
    pub fn penalty(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim as f64;
        let smoothed = self.apply(x);
        let r: Vec<f64> = x.iter().zip(&smoothed).map(|(a, b)| a - b).collect();
        let value = r.iter().map(|v| v * v).sum::<f64>() / d;
        // ∇ = (2/D)(I − G)ᵀ r
        let mut grad: Vec<f64> = r.iter().map(|v| 2.0 * v / d).collect();
        for (i, row) in self.matrix.chunks_exact(self.dim).enumerate() {
            let ri = 2.0 * r[i] / d;
            for (g, a) in grad.iter_mut().zip(row) {
                *g -= a * ri;
            }
        }
        (value, grad)
    }
}

fn reflect(mut i: isize, dim: usize) -> usize {
    let n = dim as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Self-masking reconstruction loss on real missing data, plus the optional
/// smoothness penalty, averaged over usable examples.
pub fn loss_unsupervised<R: Rng + ?Sized>(
    model: &ImputerModel,
    batch: &[MissingState],
    cfg: &ImputerLossConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    cfg.validate()?;
    let filter = (cfg.smoothness_weight > 0.0).then(|| GaussianFilter::new(model.dim, cfg.kernel_sigma));
    let mut grads = Gradients::zeros_like(&model.net);
    let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    for state in batch {
        model.check_state(state)?;
        let observed: Vec<usize> = state.mask().observed_indices().collect();
        if observed.len() < 2 {
            skipped += 1;
            continue;
        }
        let n_hide = ((cfg.self_mask_fraction * observed.len() as f64).round() as usize).min(observed.len() - 1);
        let hidden: Vec<usize> = observed.choose_multiple(rng, n_hide).copied().collect();
        let mut reduced = state.clone();
        for &i in &hidden {
            reduced.hide(i);
        }

        let mut best: Option<(f64, Proposal, Vec<f64>)> = None;
        for _ in 0..cfg.k_multiple {
            let p = model.propose(&reduced, rng)?;
            let mut upstream = vec![0.0; model.dim];
            let mut loss = 0.0;
            if n_hide > 0 {
                let scale = 1.0 / n_hide as f64;
                for &i in &hidden {
                    let diff = p.y[i] - state.values()[i];
                    loss += diff * diff * scale;
                    upstream[i] += 2.0 * diff * scale;
                }
            }
            if let Some(f) = &filter {
                let completed = substitute(&reduced, &p.y)?;
                let (penalty, g) = f.penalty(&completed);
                loss += cfg.smoothness_weight * penalty;
                for i in reduced.mask().unobserved_indices() {
                    upstream[i] += cfg.smoothness_weight * g[i];
                }
            }
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, p, upstream));
            }
        }
        let (loss, p, upstream) = best.expect("k_multiple >= 1");
        model.net.backward_accumulate(&p.tape, &upstream, 1.0, &mut grads)?;
        total += loss;
        counted += 1;
    }
    if counted > 0 {
        grads.scale(1.0 / counted as f64);
        total /= counted as f64;
    }
    Ok(LossOutput {
        loss: total,
        grads,
        counted,
        skipped,
    })
}

/// Squared error against known complete vectors on the unobserved
/// coordinates of each state, averaged over those coordinates and examples.
pub fn loss_supervised_batch<R: Rng + ?Sized>(
    model: &ImputerModel,
    states: &[MissingState],
    targets: &[Vec<f64>],
    rng: &mut R,
) -> Result<LossOutput> {
    if states.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "supervised batch",
            expected: states.len(),
            actual: targets.len(),
        });
    }
    let mut grads = Gradients::zeros_like(&model.net);
    let mut total = 0.0;
    for (state, target) in states.iter().zip(targets) {
        model.check_state(state)?;
        if target.len() != model.dim {
            return Err(Error::DimensionMismatch {
                context: "supervised target",
                expected: model.dim,
                actual: target.len(),
            });
        }
        let n_missing = state.mask().unobserved_count();
        if n_missing == 0 {
            continue;
        }
        let p = model.propose(state, rng)?;
        let scale = 1.0 / n_missing as f64;
        let mut upstream = vec![0.0; model.dim];
        for i in state.mask().unobserved_indices() {
            let diff = p.y[i] - target[i];
            total += diff * diff * scale;
            upstream[i] = 2.0 * diff * scale;
        }
        model.net.backward_accumulate(&p.tape, &upstream, 1.0, &mut grads)?;
    }
    let counted = states.len();
    if counted > 0 {
        grads.scale(1.0 / counted as f64);
        total /= counted as f64;
    }
    Ok(LossOutput {
        loss: total,
        grads,
        counted,
        skipped: 0,
    })
}

pub fn loss_supervised<R: Rng + ?Sized>(
    model: &ImputerModel,
    state: &MissingState,
    target: &[f64],
    rng: &mut R,
) -> Result<LossOutput> {
    loss_supervised_batch(model, std::slice::from_ref(state), &[target.to_vec()], rng)
}

/// Outcome of [`adapt_step`]: fresh parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: ImputerModel,
    pub optimizer: Optimizer,
    pub unsupervised_loss: f64,
    pub supervised_loss: f64,
}

/// Gradients of the two adaptation terms: self-masking on real missing data
/// and supervised error on policy-generated terminal states.
pub fn adaptation_gradients<R: Rng + ?Sized>(
    model: &ImputerModel,
    missing: &[MissingState],
    terminals: &[MissingState],
    targets: &[Vec<f64>],
    cfg: &ImputerLossConfig,
    rng: &mut R,
) -> Result<(LossOutput, LossOutput)> {
    let unsup = loss_unsupervised(model, missing, cfg, rng)?;
    let sup = loss_supervised_batch(model, terminals, targets, rng)?;
    Ok((unsup, sup))
}

/// One combined step `φ − α∇L_u − α'∇L_s`, returned as new parameters.
/// Neither `model` nor `optimizer` is modified.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step<R: Rng + ?Sized>(
    model: &ImputerModel,
    optimizer: &Optimizer,
    missing: &[MissingState],
    terminals: &[MissingState],
    targets: &[Vec<f64>],
    alpha: f64,
    alpha_prime: f64,
    cfg: &ImputerLossConfig,
    rng: &mut R,
) -> Result<Adapted> {
    let mut next = model.clone();
    let mut opt = optimizer.clone();
    let mut out = Adapted {
        model: model.clone(),
        optimizer: optimizer.clone(),
        unsupervised_loss: 0.0,
        supervised_loss: 0.0,
    };
    if alpha == 0.0 && alpha_prime == 0.0 {
        return Ok(out);
    }
    let unsup = if alpha > 0.0 {
        Some(loss_unsupervised(model, missing, cfg, rng)?)
    } else {
        None
    };
    let sup = if alpha_prime > 0.0 {
        Some(loss_supervised_batch(model, terminals, targets, rng)?)
    } else {
        None
    };
    let zero = Gradients::zeros_like(&model.net);
    let gu = unsup.as_ref().map_or(&zero, |l| &l.grads);
    let gs = sup.as_ref().map_or(&zero, |l| &l.grads);
    opt.weighted_step(&mut next.net, &[(alpha, gu), (alpha_prime, gs)])?;
    out.model = next;
    out.optimizer = opt;
    out.unsupervised_loss = unsup.map_or(0.0, |l| l.loss);
    out.supervised_loss = sup.map_or(0.0, |l| l.loss);
    Ok(out)
}

/// One optimizer step on the self-masking loss of a minibatch.
pub fn pretrain_step<R: Rng + ?Sized>(
    model: &mut ImputerModel,
    optimizer: &mut Optimizer,
    batch: &[MissingState],
    cfg: &ImputerLossConfig,
    rng: &mut R,
) -> Result<f64> {
    let out = loss_unsupervised(model, batch, cfg, rng)?;
    if !out.loss.is_finite() {
        return Err(Error::Diverged {
            stage: "imputer pretraining",
            iteration: optimizer.steps_taken() as usize,
            detail: format!("loss {}", out.loss),
        });
    }
    if out.counted > 0 {
        optimizer.step(&mut model.net, &out.grads)?;
    }
    Ok(out.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean minibatch loss per epoch.
    pub curve: Vec<f64>,
    pub stopped_early: bool,
}

/// Training stops once the best epoch loss of the last [`PLATEAU_WINDOW`]
/// epochs improves on the earlier best by less than [`PLATEAU_TOLERANCE`] (relative).
pub const PLATEAU_WINDOW: usize = 5;
pub const PLATEAU_TOLERANCE: f64 = 1e-4;

/// Minibatch descent on [`loss_unsupervised`] for up to `epochs` epochs.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut ImputerModel,
    optimizer: &mut Optimizer,
    data: &MissingDataset,
    epochs: usize,
    batch_size: usize,
    cfg: &ImputerLossConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<MissingState> = chunk.iter().map(|&i| data.get(i).clone()).collect();
            let loss = pretrain_step(model, optimizer, &batch, cfg, rng).map_err(|e| match e {
                Error::Diverged { stage, detail, .. } => Error::Diverged {
                    stage,
                    iteration: epoch,
                    detail,
                },
                other => other,
            })?;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("imputer pretraining epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
        if curve.len() > PLATEAU_WINDOW {
            // Best loss of the last window against the best before it.
            let split = curve.len() - PLATEAU_WINDOW;
            let before = curve[..split].iter().copied().fold(f64::INFINITY, f64::min);
            let recent = curve[split..].iter().copied().fold(f64::INFINITY, f64::min);
            let improvement = (before - recent) / before.abs().max(f64::MIN_POSITIVE);
            if improvement < PLATEAU_TOLERANCE {
                return Ok(PretrainReport {
                    curve,
                    stopped_early: true,
                });
            }
        }
    }
    Ok(PretrainReport {
        curve,
        stopped_early: false,
    })
}

/// Piecewise-linear interpolation of the observed points over `grid`, with
/// constant extrapolation past the outermost observations. With nothing
/// observed the result is all zeros.
pub fn interpolate_baseline(state: &MissingState, grid: &[f64]) -> Result<Vec<f64>> {
    if grid.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            context: "interpolation grid",
            expected: state.dim(),
            actual: grid.len(),
        });
    }
    let observed: Vec<usize> = state.mask().observed_indices().collect();
    if observed.is_empty() {
        log::warn!("interpolating a state with no observations; returning zeros");
        return Ok(vec![0.0; state.dim()]);
    }
    let v = state.values();
    let mut out = vec![0.0; state.dim()];
    let (first, last) = (observed[0], observed[observed.len() - 1]);
    for (i, o) in out.iter_mut().enumerate() {
        *o = if i <= first {
            v[first]
        } else if i >= last {
            v[last]
        } else {
            let k = observed.partition_point(|&j| j <= i);
            let (l, r) = (observed[k - 1], observed[k]);
            if l == i {
                v[i]
            } else {
                let t = (grid[i] - grid[l]) / (grid[r] - grid[l]);
                v[l] + t * (v[r] - v[l])
            }
        };
    }
    Ok(out)
}

/// Interpolation on the index grid `0..D`, used as the imputer's extra channel.
fn interpolate_indices(state: &MissingState) -> Vec<f64> {
    let grid: Vec<f64> = (0..state.dim()).map(|i| i as f64).collect();
    interpolate_baseline(state, &grid).expect("grid length matches")
}
