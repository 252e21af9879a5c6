//! Reference measurement policies.

use rand::Rng;

use crate::env::{Episode, Step};
use crate::error::{Error, Result};
use crate::imputer::ImputerModel;
use crate::missingness::MissingState;
use crate::policy::masked_argmax;

/// Uniform random order without replacement.
pub fn baseline_uninform<R: Rng + ?Sized>(source: &[f64], horizon: usize, rng: &mut R) -> Result<Episode> {
    let dim = source.len();
    if horizon > dim {
        return Err(Error::invalid(format!("horizon {horizon} exceeds dimension {dim}")));
    }
    let order = rand::seq::index::sample(rng, dim, horizon).into_vec();
    Episode::from_order(source, &order)
}

/// Per-coordinate sample variance (denominator `k − 1`) across candidates.
pub fn sample_variance(candidates: &[Vec<f64>]) -> Vec<f64> {
    let k = candidates.len();
    let dim = candidates.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    if k < 2 {
        return out;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let mean = candidates.iter().map(|c| c[i]).sum::<f64>() / k as f64;
        *o = candidates.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    }
    out
}

/// Measure the unobserved coordinate whose `k` imputations disagree most,
/// lowest index on ties.
pub fn explicit_choice<R: Rng + ?Sized>(
    imputer: &ImputerModel,
    state: &MissingState,
    k: usize,
    rng: &mut R,
) -> Result<usize> {
    let candidates = imputer.impute_multiple(state, k, rng)?;
    masked_argmax(&sample_variance(&candidates), state.mask())
}

/// Greedy most-uncertain-coordinate policy driven by multiple imputation.
pub fn baseline_explicit<R: Rng + ?Sized>(
    imputer: &ImputerModel,
    source: &[f64],
    horizon: usize,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k < 2 {
        return Err(Error::invalid("explicit baseline needs k >= 2 imputations"));
    }
    let dim = source.len();
    if horizon > dim {
        return Err(Error::invalid(format!("horizon {horizon} exceeds dimension {dim}")));
    }
    let mut state = MissingState::empty(dim);
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let action = explicit_choice(imputer, &state, k, rng)?;
        steps.push(Step {
            state: state.clone(),
            action,
            log_prob: 0.0,
            explore: 0.0,
            dropout_seed: None,
        });
        state.reveal(action, source[action]);
    }
    Ok(Episode {
        steps,
        terminal: state,
        source: source.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputer::ImputerArch;
    use crate::nn::DenseNet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_horizon_is_permutation() {
        let src: Vec<f64> = (0..7).map(f64::from).collect();
        let ep = baseline_uninform(&src, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut a = ep.actions();
        a.sort();
        assert_eq!(a, (0..7).collect::<Vec<_>>());
        assert!(ep.terminal.mask().is_full());
    }

    #[test]
    fn inclusion_probability_is_t_over_d() {
        let (d, t, n) = (10, 3, 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = vec![0usize; d];
        for _ in 0..n {
            for a in baseline_uninform(&vec![0.0; d], t, &mut rng).unwrap().actions() {
                counts[a] += 1;
            }
        }
        let p = t as f64 / d as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn variance_hand_fixture() {
        let cands = vec![vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0, 5.0]];
        assert_eq!(sample_variance(&cands), vec![0.0, 0.0, 0.0, 2.0]);
        let mut s = MissingState::empty(4);
        s.reveal(0, 0.0);
        assert_eq!(masked_argmax(&sample_variance(&cands), s.mask()).unwrap(), 3);
    }

    /// An imputer whose output ignores its noise input.
    fn deterministic_imputer(dim: usize) -> ImputerModel {
        let mut imp = ImputerModel::new(&ImputerArch::image(dim), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let net: &mut DenseNet = imp.net_mut();
        let (w, _) = net.layer_params_mut(0);
        let in_dim = 2 * dim + 16;
        for row in w.chunks_mut(in_dim) {
            row[2 * dim..].iter_mut().for_each(|x| *x = 0.0);
        }
        imp
    }

    #[test]
    fn identical_draws_pick_lowest_index() {
        let imp = deterministic_imputer(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = baseline_explicit(&imp, &[0.1, 0.2, 0.3, 0.4, 0.5], 3, 4, &mut rng).unwrap();
        assert_eq!(ep.actions(), vec![0, 1, 2]);
    }

    #[test]
    fn explicit_never_repeats() {
        let imp = ImputerModel::new(&ImputerArch::image(8), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let ep = baseline_explicit(&imp, &[0.5; 8], 8, 3, &mut rng).unwrap();
            assert!(ep.terminal.mask().is_full());
        }
        assert!(baseline_explicit(&imp, &[0.5; 8], 2, 1, &mut rng).is_err());
    }
}
