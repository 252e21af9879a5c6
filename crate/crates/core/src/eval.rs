//! Evaluation against true complete data: top-k RMSE per method and
//! missing rate, and the sweep CSV.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::env::{horizon_for, rmse, run_episode, top_k_rmse, ActionMode, Episode};
use crate::error::{Error, Result};
use crate::imputer::ImputerModel;
use crate::joint::{baseline_explicit, baseline_uninform};
use crate::missingness::GroundTruth;
use crate::nn::DropoutMode;
use crate::policy::PolicyModel;
use crate::seeding::{stream, StreamRng};

const EVAL_STREAM: u64 = 100;

/// A measurement strategy under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// Learned policy; greedy argmax or sampling with dropout off.
    Policy { model: &'a PolicyModel, greedy: bool },
    UnInform,
    /// Most-uncertain coordinate from `k` imputations per step.
    Explicit { k: usize },
}

impl Method<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Policy { greedy: true, .. } => "proposed",
            Method::Policy { greedy: false, .. } => "proposed-stochastic",
            Method::UnInform => "uninform",
            Method::Explicit { .. } => "explicit",
        }
    }

    fn episode(&self, imputer: &ImputerModel, source: &[f64], horizon: usize, rng: &mut StreamRng) -> Result<Episode> {
        match *self {
            Method::Policy { model, greedy } => {
                let mode = if greedy { ActionMode::Greedy } else { ActionMode::Stochastic };
                run_episode(model, source, horizon, mode, DropoutMode::Eval, rng)
            }
            Method::UnInform => baseline_uninform(source, horizon, rng),
            Method::Explicit { k } => baseline_explicit(imputer, source, horizon, k, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub trained_rate: f64,
    pub eval_rate: f64,
    /// Mean RMSE of the first imputation.
    pub top1_rmse: f64,
    /// Mean of the best RMSE among `k` imputations.
    pub top3_rmse: f64,
    pub n: usize,
    pub seed: u64,
    pub wall_time: f64,
}

/// Per-example errors behind an [`EvalRow`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleErrors {
    pub top1: Vec<f64>,
    pub topk: Vec<f64>,
}

/// Evaluate one method at one missing rate with one seed. Episodes reveal
/// the true values; each terminal state is imputed `k` times.
pub fn eval_examples(
    method: &Method<'_>,
    imputer: &ImputerModel,
    truth: &GroundTruth,
    missing_rate: f64,
    k: usize,
    seed: u64,
) -> Result<ExampleErrors> {
    if truth.is_empty() {
        return Err(Error::MissingGroundTruth);
    }
    if k == 0 {
        return Err(Error::invalid("evaluation needs k >= 1"));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::invalid(format!("missing rate {missing_rate} outside [0, 1)")));
    }
    let horizon = horizon_for(truth.dim(), missing_rate);
    let mut top1 = Vec::with_capacity(truth.len());
    let mut topk = Vec::with_capacity(truth.len());
    for (i, x) in truth.rows().iter().enumerate() {
        let mut rng = stream(seed, &[EVAL_STREAM, i as u64]);
        let ep = method.episode(imputer, x, horizon, &mut rng)?;
        let candidates = imputer.impute_multiple(&ep.terminal, k, &mut rng)?;
        top1.push(rmse(&candidates[0], x));
        topk.push(top_k_rmse(&candidates, x));
    }
    Ok(ExampleErrors { top1, topk })
}

pub fn eval_policy(
    method: &Method<'_>,
    imputer: &ImputerModel,
    truth: &GroundTruth,
    trained_rate: f64,
    missing_rate: f64,
    k: usize,
    seeds: &[u64],
) -> Result<Vec<EvalRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let errs = eval_examples(method, imputer, truth, missing_rate, k, seed)?;
            let n = errs.top1.len();
            Ok(EvalRow {
                method: method.label().to_string(),
                trained_rate,
                eval_rate: missing_rate,
                top1_rmse: errs.top1.iter().sum::<f64>() / n as f64,
                top3_rmse: errs.topk.iter().sum::<f64>() / n as f64,
                n,
                seed,
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn sweep_missing_rates(
    method: &Method<'_>,
    imputer: &ImputerModel,
    truth: &GroundTruth,
    trained_rate: f64,
    rates: &[f64],
    k: usize,
    seeds: &[u64],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &rate in rates {
        rows.extend(eval_policy(method, imputer, truth, trained_rate, rate, k, seeds)?);
    }
    Ok(rows)
}

/// Mean and standard error over rows (e.g. the seeds of one method and rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub top1_mean: f64,
    pub top1_se: f64,
    pub top3_mean: f64,
    pub top3_se: f64,
}

pub fn summarize(rows: &[EvalRow]) -> Summary {
    let stats = |v: Vec<f64>| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        (m, se)
    };
    let (top1_mean, top1_se) = stats(rows.iter().map(|r| r.top1_rmse).collect());
    let (top3_mean, top3_se) = stats(rows.iter().map(|r| r.top3_rmse).collect());
    Summary {
        top1_mean,
        top1_se,
        top3_mean,
        top3_se,
    }
}

pub const SWEEP_CSV_SCHEMA: u32 = 1;

pub fn sweep_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("method,trained_rate,eval_rate,top1_rmse,top3_rmse,n,seed,wall_time,schema_version\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.3},{}",
            r.method, r.trained_rate, r.eval_rate, r.top1_rmse, r.top3_rmse, r.n, r.seed, r.wall_time, SWEEP_CSV_SCHEMA
        );
    }
    s
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[EvalRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputer::ImputerArch;
    use crate::policy::PolicyArch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn truth(n: usize, dim: usize) -> GroundTruth {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        GroundTruth::new(dim, (0..n).map(|_| (0..dim).map(|_| rng.random()).collect()).collect()).unwrap()
    }

    fn imputer(dim: usize) -> ImputerModel {
        ImputerModel::new(&ImputerArch::image(dim), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn rate_zero_is_exact() {
        let t = truth(5, 6);
        let rows = eval_policy(&Method::UnInform, &imputer(6), &t, 0.0, 0.0, 3, &[0, 1]).unwrap();
        assert!(rows.iter().all(|r| r.top1_rmse == 0.0 && r.top3_rmse == 0.0 && r.n == 5));
    }

    #[test]
    fn top3_never_exceeds_top1() {
        let t = truth(20, 8);
        let imp = imputer(8);
        let policy = PolicyModel::new(&PolicyArch::new(8), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for method in [
            Method::UnInform,
            Method::Explicit { k: 3 },
            Method::Policy { model: &policy, greedy: true },
            Method::Policy { model: &policy, greedy: false },
        ] {
            let e = eval_examples(&method, &imp, &t, 0.75, 3, 4).unwrap();
            assert!(e.topk.iter().zip(&e.top1).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn empty_truth_is_rejected() {
        let t = GroundTruth::new(4, Vec::new()).unwrap();
        assert!(matches!(
            eval_examples(&Method::UnInform, &imputer(4), &t, 0.5, 3, 0),
            Err(Error::MissingGroundTruth)
        ));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let t = truth(10, 6);
        let imp = imputer(6);
        let a = eval_examples(&Method::Explicit { k: 2 }, &imp, &t, 0.5, 3, 9).unwrap();
        let b = eval_examples(&Method::Explicit { k: 2 }, &imp, &t, 0.5, 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_header_and_rows() {
        let rows = vec![EvalRow {
            method: "uninform".into(),
            trained_rate: 0.85,
            eval_rate: 0.9,
            top1_rmse: 0.25,
            top3_rmse: 0.2,
            n: 10,
            seed: 1,
            wall_time: 0.5,
        }];
        let csv = sweep_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,trained_rate,eval_rate,top1_rmse,top3_rmse,n,seed,wall_time,schema_version"
        );
        assert_eq!(lines.next().unwrap(), "uninform,0.85,0.9,0.25,0.2,10,1,0.500,1");
    }

    #[test]
    fn summary_standard_error() {
        let mk = |v: f64| EvalRow {
            method: String::new(),
            trained_rate: 0.0,
            eval_rate: 0.0,
            top1_rmse: v,
            top3_rmse: v,
            n: 1,
            seed: 0,
            wall_time: 0.0,
        };
        let s = summarize(&[mk(1.0), mk(2.0), mk(3.0)]);
        assert_eq!(s.top1_mean, 2.0);
        assert!((s.top1_se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
