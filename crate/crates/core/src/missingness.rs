//! Masks, missing-data states, substitution and MCAR mask sampling.
//!
//! Unobserved coordinates are zero-filled inside [`MissingState`]; the mask
//! channel is what distinguishes a true zero from a missing value.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Binary indicator of observed coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask { bits }
    }

    pub fn unobserved(dim: usize) -> Self {
        Mask { bits: vec![false; dim] }
    }

    pub fn observed(dim: usize) -> Self {
        Mask { bits: vec![true; dim] }
    }

    pub fn from_indices(dim: usize, observed: &[usize]) -> Result<Self> {
        let mut bits = vec![false; dim];
        for &i in observed {
            if i >= dim {
                return Err(Error::invalid(format!("index {i} out of range for dimension {dim}")));
            }
            bits[i] = true;
        }
        Ok(Mask { bits })
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_observed(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn observed_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn unobserved_count(&self) -> usize {
        self.dim() - self.observed_count()
    }

    pub fn observed_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn unobserved_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| !**b).map(|(i, _)| i)
    }

    pub fn set(&mut self, i: usize, observed: bool) {
        self.bits[i] = observed;
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// The mask as 0.0/1.0 values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Observed values (zero where unobserved) paired with their mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingState {
    values: Vec<f64>,
    mask: Mask,
}

impl MissingState {
    /// Builds a state, zeroing any value at an unobserved coordinate.
    pub fn new(mut values: Vec<f64>, mask: Mask) -> Result<Self> {
        if values.len() != mask.dim() {
            return Err(Error::DimensionMismatch {
                context: "missing state values",
                expected: mask.dim(),
                actual: values.len(),
            });
        }
        for (v, &b) in values.iter_mut().zip(&mask.bits) {
            if !b {
                *v = 0.0;
            }
        }
        Ok(MissingState { values, mask })
    }

    /// Observe `complete` through `mask`.
    pub fn observe(complete: &[f64], mask: Mask) -> Result<Self> {
        Self::new(complete.to_vec(), mask)
    }

    pub fn empty(dim: usize) -> Self {
        MissingState {
            values: vec![0.0; dim],
            mask: Mask::unobserved(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Record a measurement of coordinate `i`.
    pub fn reveal(&mut self, i: usize, value: f64) {
        self.values[i] = value;
        self.mask.bits[i] = true;
    }

    /// Forget coordinate `i`.
    pub fn hide(&mut self, i: usize) {
        self.values[i] = 0.0;
        self.mask.bits[i] = false;
    }
}

/// Keep observed coordinates of `state`, take `fill` everywhere else.
pub fn substitute(state: &MissingState, fill: &[f64]) -> Result<Vec<f64>> {
    if fill.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            context: "substitution",
            expected: state.dim(),
            actual: fill.len(),
        });
    }
    Ok(state
        .values
        .iter()
        .zip(fill)
        .zip(&state.mask.bits)
        .map(|((&v, &y), &b)| if b { v } else { y })
        .collect())
}

/// Network input `[values, mask]` of length `2D`.
pub fn encode_state(state: &MissingState) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * state.dim());
    out.extend_from_slice(&state.values);
    out.extend(state.mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    out
}

/// A mask with exactly `n_observed` ones, every subset equally likely.
pub fn sample_mcar_mask<R: Rng + ?Sized>(dim: usize, n_observed: usize, rng: &mut R) -> Result<Mask> {
    if n_observed > dim {
        return Err(Error::invalid(format!(
            "cannot observe {n_observed} of {dim} coordinates"
        )));
    }
    let mut bits = vec![false; dim];
    for i in rand::seq::index::sample(rng, dim, n_observed) {
        bits[i] = true;
    }
    Ok(Mask { bits })
}

/// Uniform fixed-cardinality MCAR missingness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskDistributionSpec {
    pub dim: usize,
    pub n_observed: usize,
}

impl MaskDistributionSpec {
    pub fn from_missing_rate(dim: usize, missing_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&missing_rate) {
            return Err(Error::invalid(format!("missing rate {missing_rate} outside [0, 1]")));
        }
        Ok(MaskDistributionSpec {
            dim,
            n_observed: (dim as f64 * (1.0 - missing_rate)).round() as usize,
        })
    }

    pub fn missing_rate(&self) -> f64 {
        1.0 - self.n_observed as f64 / self.dim as f64
    }
}

/// Missing-only training data. Carries no ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingDataset {
    dim: usize,
    examples: Vec<MissingState>,
}

impl MissingDataset {
    pub fn new(dim: usize, examples: Vec<MissingState>) -> Result<Self> {
        if let Some(bad) = examples.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                context: "missing dataset example",
                expected: dim,
                actual: bad.dim(),
            });
        }
        Ok(MissingDataset { dim, examples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[MissingState] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &MissingState {
        &self.examples[i]
    }
}

/// Complete vectors kept apart from training data; only evaluation reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "ground truth row",
                expected: dim,
                actual: bad.len(),
            });
        }
        Ok(GroundTruth { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn truncate(&mut self, n: usize) {
        self.rows.truncate(n);
    }
}

/// A masked dataset together with the complete data it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSplit {
    pub missing: MissingDataset,
    pub ground_truth: GroundTruth,
}

/// Give each complete example an independent MCAR mask.
pub fn mask_dataset<R: Rng + ?Sized>(
    complete: &[Vec<f64>],
    spec: MaskDistributionSpec,
    rng: &mut R,
) -> Result<MaskedSplit> {
    let examples = complete
        .iter()
        .map(|x| {
            if x.len() != spec.dim {
                return Err(Error::DimensionMismatch {
                    context: "complete example",
                    expected: spec.dim,
                    actual: x.len(),
                });
            }
            MissingState::observe(x, sample_mcar_mask(spec.dim, spec.n_observed, rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskedSplit {
        missing: MissingDataset::new(spec.dim, examples)?,
        ground_truth: GroundTruth::new(spec.dim, complete.to_vec())?,
    })
}

/// Write a missing dataset as CSV: `v0..`, `m0..` and, when given, `t0..` columns.
pub fn write_missing_csv(
    path: impl AsRef<Path>,
    data: &MissingDataset,
    truth: Option<&GroundTruth>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(t) = truth {
        if t.len() != data.len() || t.dim() != data.dim() {
            return Err(Error::invalid("ground truth does not match the missing dataset"));
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("v{i}")).collect();
    header.extend((0..d).map(|i| format!("m{i}")));
    if truth.is_some() {
        header.extend((0..d).map(|i| format!("t{i}")));
    }
    w.write_record(&header)?;
    for (i, ex) in data.examples().iter().enumerate() {
        let mut row: Vec<String> = ex.values().iter().map(|v| v.to_string()).collect();
        row.extend(ex.mask().bits().iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        if let Some(t) = truth {
            row.extend(t.rows()[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a CSV written by [`write_missing_csv`]. Ground truth is returned only
/// when the header carries `t` columns.
pub fn read_missing_csv(path: impl AsRef<Path>) -> Result<(MissingDataset, Option<GroundTruth>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    let bad = |detail: String| Error::Format {
        what: "missing-data CSV",
        detail,
    };
    let n_values = header.iter().take_while(|h| h.starts_with('v')).count();
    let d = n_values;
    let has_truth = match header.len() {
        n if n == 2 * d => false,
        n if n == 3 * d => true,
        n => return Err(bad(format!("{n} columns do not form a D/2D/3D layout"))),
    };
    for (i, h) in header.iter().enumerate() {
        let (prefix, idx) = (i / d, i % d);
        let expect = format!("{}{idx}", ["v", "m", "t"][prefix]);
        if h != expect {
            return Err(bad(format!("column {i} is {h:?}, expected {expect:?}")));
        }
    }
    let mut examples = Vec::new();
    let mut truth = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: {s:?}: {e}", line + 1)))
        };
        let values = record.iter().take(d).map(parse).collect::<Result<Vec<_>>>()?;
        let bits = record
            .iter()
            .skip(d)
            .take(d)
            .map(|s| match s.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(bad(format!("row {}: mask entry {other:?}", line + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        examples.push(MissingState::new(values, Mask::new(bits))?);
        if has_truth {
            truth.push(record.iter().skip(2 * d).map(parse).collect::<Result<Vec<_>>>()?);
        }
    }
    let data = MissingDataset::new(d, examples)?;
    let truth = if has_truth {
        Some(GroundTruth::new(d, truth)?)
    } else {
        None
    };
    Ok((data, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(values: &[f64], bits: &[u8]) -> MissingState {
        MissingState::new(values.to_vec(), Mask::new(bits.iter().map(|&b| b == 1).collect())).unwrap()
    }

    #[test]
    fn substitute_hand_example() {
        let s = state(&[5.0, 0.0, 7.0], &[1, 0, 1]);
        assert_eq!(substitute(&s, &[9.0, 9.0, 9.0]).unwrap(), vec![5.0, 9.0, 7.0]);
    }

    #[test]
    fn substitute_extremes() {
        let full = state(&[1.0, 2.0], &[1, 1]);
        assert_eq!(substitute(&full, &[8.0, 9.0]).unwrap(), vec![1.0, 2.0]);
        let none = MissingState::empty(2);
        assert_eq!(substitute(&none, &[8.0, 9.0]).unwrap(), vec![8.0, 9.0]);
        assert!(substitute(&none, &[1.0]).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_state(&state(&[1.0, 0.0], &[1, 0])), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(encode_state(&MissingState::empty(2)), vec![0.0; 4]);
        assert_eq!(
            encode_state(&state(&[0.5, 0.2, 0.0], &[1, 1, 0])),
            vec![0.5, 0.2, 0.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn new_state_zero_fills_unobserved() {
        let s = state(&[3.0, 4.0], &[0, 1]);
        assert_eq!(s.values(), &[0.0, 4.0]);
    }

    #[test]
    fn mcar_counts_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskDistributionSpec::from_missing_rate(100, 0.9).unwrap();
        assert_eq!(spec.n_observed, 10);
        for _ in 0..50 {
            assert_eq!(sample_mcar_mask(100, 10, &mut rng).unwrap().observed_count(), 10);
        }
        assert!(sample_mcar_mask(4, 4, &mut rng).unwrap().is_full());
        assert!(sample_mcar_mask(4, 5, &mut rng).is_err());
    }

    #[test]
    fn mcar_inclusion_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut counts = [0usize; 20];
        for _ in 0..draws {
            for i in sample_mcar_mask(20, 10, &mut rng).unwrap().observed_indices() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn mask_dataset_full_observation_is_identity() {
        let data = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let spec = MaskDistributionSpec { dim: 3, n_observed: 3 };
        let split = mask_dataset(&data, spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (ex, x) in split.missing.examples().iter().zip(&data) {
            assert_eq!(ex.values(), x.as_slice());
            assert!(ex.mask().is_full());
        }
        assert_eq!(split.ground_truth.rows(), data.as_slice());
    }

    #[test]
    fn mask_dataset_frequency_within_binomial_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2880;
        let data: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64; 100]).collect();
        let spec = MaskDistributionSpec::from_missing_rate(100, 0.9).unwrap();
        let split = mask_dataset(&data, spec, &mut rng).unwrap();
        let mut counts = vec![0usize; 100];
        for ex in split.missing.examples() {
            assert_eq!(ex.mask().observed_count(), 10);
            for i in ex.mask().observed_indices() {
                counts[i] += 1;
            }
        }
        let p: f64 = 0.1;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let outside = counts
            .iter()
            .filter(|&&c| (c as f64 / n as f64 - p).abs() > 3.0 * sigma)
            .count();
        // 3σ excursions happen ~0.27% of the time per coordinate.
        assert!(outside <= 2, "{outside} coordinates outside 3σ");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = vec![vec![0.1, -2.5, 3.0], vec![1.0 / 3.0, 0.0, 7.25]];
        let split = mask_dataset(
            &data,
            MaskDistributionSpec { dim: 3, n_observed: 2 },
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        write_missing_csv(&path, &split.missing, Some(&split.ground_truth)).unwrap();
        let (m, t) = read_missing_csv(&path).unwrap();
        assert_eq!(m, split.missing);
        assert_eq!(t.unwrap(), split.ground_truth);

        write_missing_csv(&path, &split.missing, None).unwrap();
        let (m, t) = read_missing_csv(&path).unwrap();
        assert_eq!(m, split.missing);
        assert!(t.is_none());
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("v0,v1,v2,m0,m1,m2\n"));
    }

    proptest! {
        #[test]
        fn substitute_preserves_observed(
            entries in prop::collection::vec((-10.0f64..10.0, any::<bool>(), -10.0f64..10.0), 1..40)
        ) {
            let values: Vec<f64> = entries.iter().map(|e| e.0).collect();
            let mask = Mask::new(entries.iter().map(|e| e.1).collect());
            let fill: Vec<f64> = entries.iter().map(|e| e.2).collect();
            let s = MissingState::new(values.clone(), mask.clone()).unwrap();
            let out = substitute(&s, &fill).unwrap();
            for i in 0..values.len() {
                if mask.is_observed(i) {
                    prop_assert_eq!(out[i].to_bits(), values[i].to_bits());
                } else {
                    prop_assert_eq!(out[i].to_bits(), fill[i].to_bits());
                }
            }
        }

        #[test]
        fn encode_is_injective(
            a in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 6),
            b in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 6),
        ) {
            let mk = |e: &Vec<(f64, bool)>| MissingState::new(
                e.iter().map(|x| x.0).collect(),
                Mask::new(e.iter().map(|x| x.1).collect()),
            ).unwrap();
            let (sa, sb) = (mk(&a), mk(&b));
            prop_assert_eq!(encode_state(&sa) == encode_state(&sb), sa == sb);
        }
    }
}
