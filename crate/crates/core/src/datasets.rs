//! Sinusoid generation and MNIST loading/downsampling.

use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SINUSOID_POINTS: usize = 100;
pub const SINUSOID_TRAIN: usize = 2880;
pub const SINUSOID_TEST: usize = 720;
pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 1.0);
pub const PHASE_RANGE: (f64, f64) = (0.0, 2.0 * std::f64::consts::PI);
pub const FREQUENCY_RANGE: (f64, f64) = (0.5, 2.0);

pub const MNIST_SIDE: usize = 28;
pub const IMAGE12_SIDE: usize = 12;
pub const IMAGE12_PIXELS: usize = IMAGE12_SIDE * IMAGE12_SIDE;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Which dataset an experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    SinSingle,
    SinDouble,
    Mnist12,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::SinSingle => "sin-single",
            DatasetKind::SinDouble => "sin-double",
            DatasetKind::Mnist12 => "mnist12",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            DatasetKind::SinSingle | DatasetKind::SinDouble => SINUSOID_POINTS,
            DatasetKind::Mnist12 => IMAGE12_PIXELS,
        }
    }

    pub fn is_sinusoid(self) -> bool {
        !matches!(self, DatasetKind::Mnist12)
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin-single" => Ok(DatasetKind::SinSingle),
            "sin-double" => Ok(DatasetKind::SinDouble),
            "mnist12" => Ok(DatasetKind::Mnist12),
            other => Err(Error::invalid(format!(
                "unknown dataset {other:?} (expected sin-single, sin-double or mnist12)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinusoidMode {
    Single,
    Double,
}

/// One `A sin(w x + b)` component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidParams {
    pub amplitude: f64,
    pub phase: f64,
    pub frequency: f64,
}

impl SinusoidParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SinusoidParams {
            amplitude: rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
            phase: rng.random_range(PHASE_RANGE.0..=PHASE_RANGE.1),
            frequency: rng.random_range(FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1),
        }
    }

    fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if within(self.amplitude, AMPLITUDE_RANGE)
            && within(self.phase, PHASE_RANGE)
            && within(self.frequency, FREQUENCY_RANGE)
        {
            Ok(())
        } else {
            Err(Error::invalid(format!("sinusoid parameters out of range: {self:?}")))
        }
    }
}

/// Parameters for one curve: a single component or a superposition of two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidCurve {
    pub first: SinusoidParams,
    pub second: Option<SinusoidParams>,
}

impl SinusoidCurve {
    pub fn sample<R: Rng + ?Sized>(mode: SinusoidMode, rng: &mut R) -> Self {
        let first = SinusoidParams::sample(rng);
        let second = match mode {
            SinusoidMode::Single => None,
            SinusoidMode::Double => Some(SinusoidParams::sample(rng)),
        };
        SinusoidCurve { first, second }
    }

    pub fn mode(&self) -> SinusoidMode {
        if self.second.is_some() {
            SinusoidMode::Double
        } else {
            SinusoidMode::Single
        }
    }
}

/// The regular grid of 100 points spanning [-5, 5].
pub fn sinusoid_grid() -> Vec<f64> {
    (0..SINUSOID_POINTS)
        .map(|i| -5.0 + 10.0 * i as f64 / (SINUSOID_POINTS - 1) as f64)
        .collect()
}

pub fn gen_sinusoid(curve: &SinusoidCurve) -> Result<Vec<f64>> {
    curve.first.validate()?;
    if let Some(s) = &curve.second {
        s.validate()?;
    }
    let eval = |p: &SinusoidParams, x: f64| p.amplitude * (p.frequency * x + p.phase).sin();
    Ok(sinusoid_grid()
        .into_iter()
        .map(|x| eval(&curve.first, x) + curve.second.as_ref().map_or(0.0, |p| eval(p, x)))
        .collect())
}

/// Train/test sinusoid curves; the two splits use disjoint generator streams.
pub fn gen_sinusoid_dataset(
    n_train: usize,
    n_test: usize,
    mode: SinusoidMode,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n)
            .map(|_| gen_sinusoid(&SinusoidCurve::sample(mode, &mut rng)).expect("sampled parameters are in range"))
            .collect()
    };
    (split(0, n_train), split(1, n_test))
}

/// Images parsed from IDX files, pixels scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MnistData {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
}

/// Parse an IDX3 image file (`0x00000803`, big-endian header).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let header = read_be_words(bytes, 4, "IDX image header")?;
    if header[0] != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX image file",
            expected: IDX_IMAGES_MAGIC,
            found: header[0],
        });
    }
    let (count, rows, cols) = (header[1] as usize, header[2] as usize, header[3] as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            what: "IDX image file",
            detail: format!("degenerate image size {rows}x{cols}"),
        });
    }
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: "IDX image file",
            needed,
            found: bytes.len(),
        });
    }
    let images = bytes[16..needed]
        .chunks_exact(pixels)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

/// Parse an IDX1 label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let header = read_be_words(bytes, 2, "IDX label header")?;
    if header[0] != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX label file",
            expected: IDX_LABELS_MAGIC,
            found: header[0],
        });
    }
    let count = header[1] as usize;
    if bytes.len() < 8 + count {
        return Err(Error::Truncated {
            what: "IDX label file",
            needed: 8 + count,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Load IDX images (and optionally labels). Paths ending in `.gz` are
/// decompressed transparently.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<MnistData> {
    let (rows, cols, images) = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let labels = labels
        .map(|p| read_maybe_gz(p).and_then(|b| parse_idx_labels(&b)))
        .transpose()?;
    if let Some(l) = &labels {
        if l.len() != images.len() {
            return Err(Error::DimensionMismatch {
                context: "IDX label count",
                expected: images.len(),
                actual: l.len(),
            });
        }
    }
    Ok(MnistData {
        rows,
        cols,
        images,
        labels,
    })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_be_words(bytes: &[u8], n: usize, what: &'static str) -> Result<Vec<u32>> {
    if bytes.len() < 4 * n {
        return Err(Error::Truncated {
            what,
            needed: 4 * n,
            found: bytes.len(),
        });
    }
    Ok(bytes[..4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect())
}

/// A 12×12 image with pixels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageExample {
    pub pixels: Vec<f64>,
}

/// Drop the 2-pixel border of a 28×28 image and average 2×2 blocks.
pub fn crop_resize_12(image: &[f64]) -> Result<ImageExample> {
    if image.len() != MNIST_SIDE * MNIST_SIDE {
        return Err(Error::DimensionMismatch {
            context: "28x28 image",
            expected: MNIST_SIDE * MNIST_SIDE,
            actual: image.len(),
        });
    }
    let mut pixels = vec![0.0; IMAGE12_PIXELS];
    for (r, row) in pixels.chunks_exact_mut(IMAGE12_SIDE).enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            let (y, x) = (2 + 2 * r, 2 + 2 * c);
            let at = |y: usize, x: usize| image[y * MNIST_SIDE + x];
            *out = 0.25 * (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1));
        }
    }
    Ok(ImageExample { pixels })
}

/// Load an IDX image file and downsample every image to 12×12.
pub fn load_mnist12(images: impl AsRef<Path>, limit: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let data = load_mnist_idx(images, None)?;
    if data.rows != MNIST_SIDE || data.cols != MNIST_SIDE {
        return Err(Error::DimensionMismatch {
            context: "MNIST image side",
            expected: MNIST_SIDE,
            actual: data.rows.max(data.cols),
        });
    }
    let n = limit.unwrap_or(data.images.len()).min(data.images.len());
    data.images[..n]
        .iter()
        .map(|img| crop_resize_12(img).map(|e| e.pixels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn curve(a: f64, w: f64, b: f64) -> SinusoidCurve {
        SinusoidCurve {
            first: SinusoidParams {
                amplitude: a,
                phase: b,
                frequency: w,
            },
            second: None,
        }
    }

    /// The grid has no point at exactly 0, so evaluate the formula directly
    /// and check the grid-based output against it.
    fn at(y: &[f64], c: &SinusoidCurve, x: f64) -> (f64, f64) {
        let grid = sinusoid_grid();
        let i = grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .unwrap()
            .0;
        let p = c.first;
        (y[i], p.amplitude * (p.frequency * grid[i] + p.phase).sin())
    }

    #[test]
    fn grid_spans_interval() {
        let g = sinusoid_grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[99], 5.0);
    }

    #[test]
    fn hand_values_at_origin() {
        let c = curve(1.0, 1.0, 0.0);
        let y = gen_sinusoid(&c).unwrap();
        let (got, want) = at(&y, &c, 0.0);
        assert_eq!(got, want);
        // Nearest grid point is ±5/99 from 0: sin(0.0505...) is small.
        assert!(got.abs() < 0.06);
        assert_eq!(0.5 * (2.0f64 * 0.0 + PI / 2.0).sin(), 0.5);
        let c = curve(0.5, 2.0, PI / 2.0);
        let y = gen_sinusoid(&c).unwrap();
        let (got, want) = at(&y, &c, 0.0);
        assert_eq!(got, want);
        assert!((got - 0.5).abs() < 0.01);
    }

    #[test]
    fn double_with_identical_components_doubles() {
        let c = curve(0.7, 1.3, 2.0);
        let single = gen_sinusoid(&c).unwrap();
        let double = gen_sinusoid(&SinusoidCurve {
            second: Some(c.first),
            ..c
        })
        .unwrap();
        for (s, d) in single.iter().zip(&double) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(gen_sinusoid(&curve(1.5, 1.0, 0.0)).is_err());
        assert!(gen_sinusoid(&curve(0.5, 3.0, 0.0)).is_err());
        assert!(gen_sinusoid(&curve(0.5, 1.0, -0.1)).is_err());
    }

    #[test]
    fn dataset_sizes_and_determinism() {
        let (train, test) = gen_sinusoid_dataset(SINUSOID_TRAIN, SINUSOID_TEST, SinusoidMode::Single, 9);
        assert_eq!(train.len(), 2880);
        assert_eq!(test.len(), 720);
        assert!(train.iter().chain(&test).all(|x| x.len() == 100));
        let (train2, test2) = gen_sinusoid_dataset(SINUSOID_TRAIN, SINUSOID_TEST, SinusoidMode::Single, 9);
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert_ne!(train[0], test[0]);
    }

    #[test]
    fn sampled_amplitudes_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let c = SinusoidCurve::sample(SinusoidMode::Double, &mut rng);
            for p in [c.first, c.second.unwrap()] {
                assert!((0.1..=1.0).contains(&p.amplitude));
                assert!((0.5..=2.0).contains(&p.frequency));
                assert!((0.0..=2.0 * PI).contains(&p.phase));
            }
        }
    }

    #[test]
    fn curves_bounded_by_total_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [SinusoidMode::Single, SinusoidMode::Double] {
            for _ in 0..500 {
                let c = SinusoidCurve::sample(mode, &mut rng);
                let bound = c.first.amplitude + c.second.map_or(0.0, |p| p.amplitude);
                assert!(gen_sinusoid(&c).unwrap().iter().all(|y| y.abs() <= bound + 1e-12));
            }
        }
    }

    fn idx_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_hand_built_idx() {
        let zeros = idx_bytes(2, 28, 28, &[0u8; 2 * 784]);
        let (r, c, imgs) = parse_idx_images(&zeros).unwrap();
        assert_eq!((r, c, imgs.len()), (28, 28, 2));
        assert!(imgs.iter().all(|i| i.iter().all(|p| *p == 0.0)));

        let mut px = [0u8; 784];
        px[0] = 255;
        let (_, _, imgs) = parse_idx_images(&idx_bytes(1, 28, 28, &px)).unwrap();
        assert_eq!(imgs[0][0], 1.0);
        assert!(imgs[0][1..].iter().all(|p| *p == 0.0));
    }

    #[test]
    fn idx_errors_are_distinct() {
        let mut bad = idx_bytes(1, 28, 28, &[0u8; 784]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::BadMagic { .. })));
        let short = idx_bytes(2, 28, 28, &[0u8; 784]);
        assert!(matches!(parse_idx_images(&short), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Truncated { .. })));

        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, idx_bytes(2, 28, 28, &[0u8; 2 * 784])).unwrap();
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&lab, labels).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, Some(&lab)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reads_gzipped_idx() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img-idx3-ubyte.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_bytes(1, 28, 28, &[51u8; 784])).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        let data = load_mnist_idx(&path, None).unwrap();
        assert_eq!(data.images[0][100], 0.2);
    }

    #[test]
    fn crop_resize_constant_image() {
        let out = crop_resize_12(&vec![0.4; 784]).unwrap();
        assert_eq!(out.pixels.len(), 144);
        assert!(out.pixels.iter().all(|p| (*p - 0.4).abs() < 1e-15));
    }

    #[test]
    fn crop_resize_single_pixel() {
        let mut img = vec![0.0; 784];
        img[2 * 28 + 2] = 1.0;
        let out = crop_resize_12(&img).unwrap();
        assert_eq!(out.pixels[0], 0.25);
        assert!(out.pixels[1..].iter().all(|p| *p == 0.0));
    }

    #[test]
    fn bundled_digits_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        let imgs = load_mnist12(dir.join("t10k-images-idx3-ubyte.gz"), Some(10)).unwrap();
        assert_eq!(imgs.len(), 10);
        assert!(imgs.iter().all(|i| i.len() == 144 && i.iter().all(|p| (0.0..=1.0).contains(p))));
    }

    proptest! {
        #[test]
        fn crop_resize_is_linear_and_bounded(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i: Vec<f64> = (0..784).map(|_| rng.random::<f64>()).collect();
            let j: Vec<f64> = (0..784).map(|_| rng.random::<f64>()).collect();
            let mix: Vec<f64> = i.iter().zip(&j).map(|(x, y)| a * x + b * y).collect();
            let lhs = crop_resize_12(&mix).unwrap().pixels;
            let ri = crop_resize_12(&i).unwrap().pixels;
            let rj = crop_resize_12(&j).unwrap().pixels;
            for k in 0..144 {
                prop_assert!((lhs[k] - (a * ri[k] + b * rj[k])).abs() < 1e-12);
            }
            let (lo, hi) = i.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
            prop_assert!(ri.iter().all(|p| *p >= lo && *p <= hi));
        }
    }
}
