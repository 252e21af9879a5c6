//! Fixtures shared by the benchmarks.

use amjl_core::datasets::{gen_sinusoid_dataset, SinusoidMode};
use amjl_core::imputer::{ImputerArch, ImputerModel};
use amjl_core::missingness::{mask_dataset, MaskDistributionSpec, MissingDataset};
use amjl_core::policy::{PolicyArch, PolicyModel};
use amjl_core::seeding::stream;

/// Untrained policy and imputer of the default sizes for dimension `dim`.
pub fn models(dim: usize, image: bool) -> (PolicyModel, ImputerModel) {
    let mut rng = stream(1, &[]);
    let arch = if image { ImputerArch::image(dim) } else { ImputerArch::sinusoid(dim) };
    let imputer = ImputerModel::new(&arch, &mut rng).expect("valid architecture");
    let policy = PolicyModel::new(&PolicyArch::new(dim), &mut rng).expect("valid architecture");
    (policy, imputer)
}

/// Masked sinusoid curves at `missing_rate`.
pub fn sinusoid_data(n: usize, missing_rate: f64) -> MissingDataset {
    let (train, _) = gen_sinusoid_dataset(n, 0, SinusoidMode::Single, 2);
    let spec = MaskDistributionSpec::from_missing_rate(100, missing_rate).expect("valid rate");
    mask_dataset(&train, spec, &mut stream(3, &[])).expect("matching dims").missing
}
