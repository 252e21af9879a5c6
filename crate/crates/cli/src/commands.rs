use std::path::{Path, PathBuf};

use amjl_core::datasets::{gen_sinusoid_dataset, load_mnist12, DatasetKind, SinusoidMode, SINUSOID_TEST, SINUSOID_TRAIN};
use amjl_core::eval::{eval_policy, summarize, sweep_missing_rates, write_sweep_csv, EvalRow, Method};
use amjl_core::imputer::ImputerModel;
use amjl_core::joint::{init_models, joint_train, pretrain_imputer, write_run_dir, Ablation, JointConfig, JointHooks};
use amjl_core::missingness::{mask_dataset, read_missing_csv, write_missing_csv, GroundTruth, MaskDistributionSpec, MissingDataset};
use amjl_core::nn::{random_grad_check, read_checkpoint, write_checkpoint, Activation};
use amjl_core::policy::PolicyModel;
use amjl_core::seeding::stream;

use crate::{BaselineKind, Common, EvalArgs, EvalMethodArg, Failure};

type CmdResult = Result<(), Failure>;

const TRAIN_MASK_STREAM: u64 = 201;
const TEST_MASK_STREAM: u64 = 202;
const PRETRAINED: &str = "imputer_pretrained.ckpt";

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| usage("--out DIR is required"))
}

/// Defaults for the dataset, then the config file, then explicit flags.
fn resolve_config(common: &Common) -> Result<JointConfig, Failure> {
    let flag_dataset: Option<DatasetKind> = common.dataset.as_deref().map(str::parse).transpose()?;
    let mut cfg = JointConfig::for_dataset(flag_dataset.unwrap_or(DatasetKind::SinSingle));
    if let Some(path) = &common.config {
        require_file(path, "config file")?;
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(kind) = flag_dataset {
        if kind != cfg.dataset {
            return Err(usage(format!(
                "--dataset {kind} conflicts with dataset={} in the config file",
                cfg.dataset
            )));
        }
    }
    if let Some(rate) = common.missing_rate {
        cfg.missing_rate = rate;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(a) = &common.ablation {
        cfg.ablation = a.parse::<Ablation>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn idx_path(dir: &Path, stem: &str) -> Result<PathBuf, Failure> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    require_file(&gz, "MNIST image file")?;
    Ok(gz)
}

pub fn gen_data(common: &Common, n_train: Option<usize>, n_test: Option<usize>, mnist_dir: &Path) -> CmdResult {
    let cfg = resolve_config(common)?;
    let out = out_dir(common)?;
    let (train, test) = match cfg.dataset {
        DatasetKind::SinSingle | DatasetKind::SinDouble => {
            let mode = if cfg.dataset == DatasetKind::SinSingle {
                SinusoidMode::Single
            } else {
                SinusoidMode::Double
            };
            gen_sinusoid_dataset(
                n_train.unwrap_or(SINUSOID_TRAIN),
                n_test.unwrap_or(SINUSOID_TEST),
                mode,
                cfg.seed,
            )
        }
        DatasetKind::Mnist12 => (
            load_mnist12(idx_path(mnist_dir, "train-images-idx3-ubyte")?, n_train)?,
            load_mnist12(idx_path(mnist_dir, "t10k-images-idx3-ubyte")?, n_test)?,
        ),
    };
    let spec = MaskDistributionSpec::from_missing_rate(cfg.dim(), cfg.missing_rate)?;
    let train = mask_dataset(&train, spec, &mut stream(cfg.seed, &[TRAIN_MASK_STREAM]))?;
    let test = mask_dataset(&test, spec, &mut stream(cfg.seed, &[TEST_MASK_STREAM]))?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    write_missing_csv(out.join("train.csv"), &train.missing, None)?;
    write_missing_csv(out.join("test.csv"), &test.missing, Some(&test.ground_truth))?;
    println!(
        "wrote {} training and {} test examples ({}, D={}, {} observed) to {}",
        train.missing.len(),
        test.missing.len(),
        cfg.dataset,
        cfg.dim(),
        spec.n_observed,
        out.display()
    );
    Ok(())
}

/// Training examples only; any ground-truth columns are dropped.
fn load_training(data_dir: &Path, cfg: &JointConfig) -> Result<MissingDataset, Failure> {
    let path = data_dir.join("train.csv");
    require_file(&path, "training data")?;
    let (data, _) = read_missing_csv(&path)?;
    if data.dim() != cfg.dim() {
        return Err(usage(format!(
            "{} has dimension {}, but dataset {} needs {}",
            path.display(),
            data.dim(),
            cfg.dataset,
            cfg.dim()
        )));
    }
    Ok(data)
}

fn load_truth(data_dir: &Path) -> Result<GroundTruth, Failure> {
    let path = data_dir.join("test.csv");
    require_file(&path, "test data")?;
    match read_missing_csv(&path)? {
        (_, Some(truth)) => Ok(truth),
        (_, None) => Err(usage(format!("{} has no ground-truth columns", path.display()))),
    }
}

fn run_pretraining(cfg: &JointConfig, data: &MissingDataset, out: &Path) -> Result<ImputerModel, Failure> {
    let (_, mut imputer) = init_models(cfg)?;
    let report = pretrain_imputer(cfg, &mut imputer, data)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    write_checkpoint(out.join(PRETRAINED), &imputer.to_checkpoint())?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in report.curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(out.join("pretrain.csv"), curve).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!(
        "pretrained imputer for {} epochs{}; final loss {:.6}",
        report.curve.len(),
        if report.stopped_early { " (plateau)" } else { "" },
        report.curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(imputer)
}

pub fn pretrain(common: &Common, data_dir: &Path) -> CmdResult {
    let cfg = resolve_config(common)?;
    let out = out_dir(common)?;
    let data = load_training(data_dir, &cfg)?;
    run_pretraining(&cfg, &data, out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(())
}

fn load_imputer(path: &Path) -> Result<ImputerModel, Failure> {
    require_file(path, "imputer checkpoint")?;
    Ok(ImputerModel::from_checkpoint(read_checkpoint(path)?)?)
}

pub fn train_joint(common: &Common, data_dir: &Path, imputer: Option<&Path>) -> CmdResult {
    let cfg = resolve_config(common)?;
    let out = out_dir(common)?;
    let data = load_training(data_dir, &cfg)?;
    let default_ckpt = out.join(PRETRAINED);
    let imputer = match imputer {
        Some(p) => load_imputer(p)?,
        None if default_ckpt.is_file() => load_imputer(&default_ckpt)?,
        None => run_pretraining(&cfg, &data, out)?,
    };
    if imputer.dim() != cfg.dim() {
        return Err(usage(format!("imputer dimension {} does not match dataset {}", imputer.dim(), cfg.dataset)));
    }
    let (policy, _) = init_models(&cfg)?;
    let outcome = joint_train(&cfg, policy, imputer, &data, JointHooks::default())?;
    write_run_dir(out, &cfg, &outcome)?;
    let last = outcome.record.rows.last();
    println!(
        "trained {} iterations ({}); final mean reward {:.5}; run written to {}",
        outcome.record.rows.len(),
        cfg.ablation,
        last.map_or(f64::NAN, |r| r.reward_explore),
        out.display()
    );
    Ok(())
}

/// The run's own config when present, otherwise the resolved flags.
fn run_config(common: &Common, run: &Path) -> Result<JointConfig, Failure> {
    let path = run.join("config.txt");
    if path.is_file() && common.config.is_none() {
        let mut c = common.clone();
        c.config = Some(path);
        // The evaluation rate is chosen separately.
        c.missing_rate = None;
        resolve_config(&c)
    } else {
        resolve_config(common)
    }
}

fn load_policy(run: &Path) -> Result<PolicyModel, Failure> {
    let actor = run.join("actor.ckpt");
    let critic = run.join("critic.ckpt");
    require_file(&actor, "actor checkpoint")?;
    require_file(&critic, "critic checkpoint")?;
    Ok(PolicyModel::from_checkpoints(read_checkpoint(&actor)?, read_checkpoint(&critic)?)?)
}

/// The jointly trained imputer for the learned policy; the pretrained one
/// (if present) for baselines.
fn imputer_for(run: &Path, baseline: bool) -> Result<ImputerModel, Failure> {
    let pretrained = run.join(PRETRAINED);
    if baseline && pretrained.is_file() {
        load_imputer(&pretrained)
    } else {
        load_imputer(&run.join("imputer.ckpt"))
    }
}

fn eval_seeds(common: &Common, n: u64) -> Vec<u64> {
    let base = common.seed.unwrap_or(0);
    (0..n).map(|i| base + i).collect()
}

fn limited(mut truth: GroundTruth, limit: Option<usize>) -> GroundTruth {
    if let Some(n) = limit {
        truth.truncate(n);
    }
    truth
}

fn report(rows: &[EvalRow]) {
    for r in rows {
        println!(
            "{:<20} trained {:.2} eval {:.2} seed {:<3} top1 {:.5} topk {:.5} (n={})",
            r.method, r.trained_rate, r.eval_rate, r.seed, r.top1_rmse, r.top3_rmse, r.n
        );
    }
    if rows.len() > 1 {
        let s = summarize(rows);
        println!(
            "mean over {} seeds: top1 {:.5} ± {:.5}, topk {:.5} ± {:.5}",
            rows.len(),
            s.top1_mean,
            s.top1_se,
            s.top3_mean,
            s.top3_se
        );
    }
}

fn evaluate(common: &Common, args: &EvalArgs, which: EvalMethodArg) -> CmdResult {
    let baseline = which != EvalMethodArg::Proposed;
    // Fail on missing checkpoints before touching the data.
    let policy = if baseline { None } else { Some(load_policy(&args.run)?) };
    let imputer = imputer_for(&args.run, baseline)?;
    let cfg = run_config(common, &args.run)?;
    let truth = limited(load_truth(&args.data)?, args.limit);
    let eval_rate = common.missing_rate.unwrap_or(cfg.missing_rate);
    let method = match which {
        EvalMethodArg::Proposed => Method::Policy {
            model: policy.as_ref().expect("loaded above"),
            greedy: !args.stochastic,
        },
        EvalMethodArg::Uninform => Method::UnInform,
        EvalMethodArg::Explicit => Method::Explicit { k: args.k.max(2) },
    };
    let rows = eval_policy(
        &method,
        &imputer,
        &truth,
        cfg.missing_rate,
        eval_rate,
        args.k,
        &eval_seeds(common, args.seeds),
    )?;
    report(&rows);
    let out = common.out.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_sweep_csv(out.join(format!("eval_{}.csv", method.label())), &rows)?;
    Ok(())
}

pub fn eval(common: &Common, args: &EvalArgs, method: EvalMethodArg) -> CmdResult {
    evaluate(common, args, method)
}

pub fn baseline(common: &Common, args: &EvalArgs, method: BaselineKind) -> CmdResult {
    let which = match method {
        BaselineKind::Uninform => EvalMethodArg::Uninform,
        BaselineKind::Explicit => EvalMethodArg::Explicit,
    };
    evaluate(common, args, which)
}

pub fn sweep(common: &Common, args: &EvalArgs, rates: &[f64], with_baselines: bool) -> CmdResult {
    if let Some(bad) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(usage(format!("rate {bad} outside [0, 1)")));
    }
    let policy = load_policy(&args.run)?;
    let imputer = imputer_for(&args.run, false)?;
    let cfg = run_config(common, &args.run)?;
    let truth = limited(load_truth(&args.data)?, args.limit);
    let seeds = eval_seeds(common, args.seeds);
    let method = Method::Policy {
        model: &policy,
        greedy: !args.stochastic,
    };
    let mut rows = sweep_missing_rates(&method, &imputer, &truth, cfg.missing_rate, rates, args.k, &seeds)?;
    if with_baselines {
        let base_imputer = imputer_for(&args.run, true)?;
        for m in [Method::UnInform, Method::Explicit { k: args.k.max(2) }] {
            rows.extend(sweep_missing_rates(&m, &base_imputer, &truth, cfg.missing_rate, rates, args.k, &seeds)?);
        }
    }
    report(&rows);
    let out = common.out.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_sweep_csv(out.join("sweep.csv"), &rows)?;
    Ok(())
}

pub fn grad_check(common: &Common, dims: &[usize], nets: u64) -> CmdResult {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(usage("--dims needs at least two positive widths"));
    }
    let base = common.seed.unwrap_or(0);
    let mut worst = 0.0f64;
    for i in 0..nets {
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        worst = worst.max(random_grad_check(dims, act, base + i)?);
    }
    println!("max relative error: {worst:.3e}");
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {worst:.3e} >= 1e-4")))
    }
}
