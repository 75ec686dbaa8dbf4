//! Feature-file ingestion, synthetic data and batching.
//!
//! The on-disk format is little-endian binary:
//!
//! ```text
//! "MCIH" | version: u16 | T_v D_v T_t D_t T_a D_a count scheme: u32 ×8
//! per sample: label f32 | x_v f32[T_v·D_v] | x_t f32[T_t·D_t] | x_a f32[T_a·D_a]
//! ```
//!
//! Matrices are stored row-major. Feature values are held as `f64` in memory
//! and written as `f32`, so a round trip is exact for `f32`-representable data
//! (everything produced by [`generate_synthetic`] or [`read_feature_file`]).

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCIH";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic tag (expected \"MCIH\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("file truncated in sample {0}")]
    Truncated(usize),
    #[error("sample {index}: label {value} outside [-1, 1]")]
    LabelOutOfRange { index: usize, value: f64 },
    #[error("sample {index}: {modality} features have shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        modality: Modality,
        expected: [usize; 2],
        actual: Vec<usize>,
    },
    #[error("header declares {header} samples but {actual} were given")]
    CountMismatch { header: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("empty dataset")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Visual,
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Text, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> char {
        match self {
            Modality::Visual => 'v',
            Modality::Text => 't',
            Modality::Audio => 'a',
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
            Modality::Audio => "audio",
        };
        f.write_str(s)
    }
}

/// Sequence length and feature width of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalShape {
    pub t: usize,
    pub d: usize,
}

impl ModalShape {
    pub const fn new(t: usize, d: usize) -> Self {
        ModalShape { t, d }
    }
}

/// Extractor output shapes for visual, text and audio.
pub const FULL_SHAPES: [ModalShape; 3] = [
    ModalShape::new(10, 512),
    ModalShape::new(36, 768),
    ModalShape::new(128, 512),
];

pub const DESK_SHAPES: [ModalShape; 3] = [ModalShape::new(4, 12), ModalShape::new(6, 16), ModalShape::new(8, 12)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Mosi7,
    Sims5,
}

impl LabelScheme {
    fn code(self) -> u32 {
        match self {
            LabelScheme::Mosi7 => 0,
            LabelScheme::Sims5 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LabelScheme::Mosi7),
            1 => Some(LabelScheme::Sims5),
            _ => None,
        }
    }
}

impl FromStr for LabelScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mosi7" => Ok(LabelScheme::Mosi7),
            "sims5" => Ok(LabelScheme::Sims5),
            other => Err(format!("unknown label scheme {other:?} (mosi7 | sims5)")),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelScheme::Mosi7 => "mosi7",
            LabelScheme::Sims5 => "sims5",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u16,
    pub shapes: [ModalShape; 3],
    pub count: usize,
    pub scheme: LabelScheme,
}

impl DatasetHeader {
    pub fn new(shapes: [ModalShape; 3], count: usize, scheme: LabelScheme) -> Self {
        DatasetHeader {
            version: FORMAT_VERSION,
            shapes,
            count,
            scheme,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.shapes.iter().any(|s| s.t == 0 || s.d == 0) {
            return Err(DataError::InvalidHeader(format!(
                "non-positive shape in {:?}",
                self.shapes
            )));
        }
        if self.count == 0 {
            return Err(DataError::InvalidHeader("sample count must be at least 1".into()));
        }
        Ok(())
    }

    fn sample_floats(&self) -> usize {
        1 + self.shapes.iter().map(|s| s.t * s.d).sum::<usize>()
    }
}

/// One utterance: three feature matrices and a continuous sentiment label.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSample {
    pub features: [Tensor; 3],
    pub label: f64,
}

impl ModalSample {
    pub fn new(x_v: Tensor, x_t: Tensor, x_a: Tensor, label: f64) -> Self {
        ModalSample {
            features: [x_v, x_t, x_a],
            label,
        }
    }

    pub fn get(&self, m: Modality) -> &Tensor {
        &self.features[m.index()]
    }

    /// Checks shapes against `shapes` and the label range.
    pub fn validate(&self, index: usize, shapes: &[ModalShape; 3]) -> Result<(), DataError> {
        for m in Modality::ALL {
            let s = shapes[m.index()];
            let x = self.get(m);
            if x.shape() != [s.t, s.d] {
                return Err(DataError::ShapeMismatch {
                    index,
                    modality: m,
                    expected: [s.t, s.d],
                    actual: x.shape().to_vec(),
                });
            }
        }
        if !(-1.0..=1.0).contains(&self.label) {
            return Err(DataError::LabelOutOfRange {
                index,
                value: self.label,
            });
        }
        Ok(())
    }

    /// Bitwise equality of labels and features.
    pub fn bit_eq(&self, other: &ModalSample) -> bool {
        self.label.to_bits() == other.label.to_bits()
            && self.features.iter().zip(&other.features).all(|(a, b)| a.bit_eq(b))
    }
}

pub fn write_feature_file(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    samples: &[ModalSample],
) -> Result<(), DataError> {
    header.validate()?;
    if header.count != samples.len() {
        return Err(DataError::CountMismatch {
            header: header.count,
            actual: samples.len(),
        });
    }
    for (i, s) in samples.iter().enumerate() {
        s.validate(i, &header.shapes)?;
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&header.version.to_le_bytes())?;
    for s in &header.shapes {
        w.write_all(&(s.t as u32).to_le_bytes())?;
        w.write_all(&(s.d as u32).to_le_bytes())?;
    }
    w.write_all(&(header.count as u32).to_le_bytes())?;
    w.write_all(&header.scheme.code().to_le_bytes())?;
    for s in samples {
        w.write_all(&(s.label as f32).to_le_bytes())?;
        for x in &s.features {
            for &v in x.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::TruncatedHeader,
        _ => DataError::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads only the header of a feature file.
pub fn read_header(r: &mut impl Read) -> Result<DatasetHeader, DataError> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) if &magic == MAGIC => {}
        Ok(()) => return Err(DataError::BadMagic),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(DataError::BadMagic),
        Err(e) => return Err(e.into()),
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb).map_err(|_| DataError::TruncatedHeader)?;
    let version = u16::from_le_bytes(vb);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut shapes = [ModalShape::new(0, 0); 3];
    for s in shapes.iter_mut() {
        s.t = read_u32(r)? as usize;
        s.d = read_u32(r)? as usize;
    }
    let count = read_u32(r)? as usize;
    let code = read_u32(r)?;
    let scheme = LabelScheme::from_code(code)
        .ok_or_else(|| DataError::InvalidHeader(format!("unknown label scheme code {code}")))?;
    let header = DatasetHeader {
        version,
        shapes,
        count,
        scheme,
    };
    header.validate()?;
    Ok(header)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<ModalSample>), DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut buf = vec![0u8; header.sample_floats() * 4];
    let mut samples = Vec::with_capacity(header.count);
    for index in 0..header.count {
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DataError::Truncated(index),
            _ => DataError::Io(e),
        })?;
        let mut floats = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let label = floats.next().expect("label slot");
        let features = header.shapes.map(|s| {
            let data: Vec<f64> = floats.by_ref().take(s.t * s.d).collect();
            Tensor::matrix(s.t, s.d, data)
        });
        let sample = ModalSample { features, label };
        sample.validate(index, &header.shapes)?;
        samples.push(sample);
    }
    Ok((header, samples))
}

/// How synthetic labels are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelDistribution {
    /// Continuous uniform over [-1, 1].
    Uniform,
    /// Uniform over a finite set of score levels, each in [-1, 1].
    Levels(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub shapes: [ModalShape; 3],
    /// Signal-to-noise mix in [0, 1].
    pub rho: f64,
    pub labels: LabelDistribution,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(count: usize, rho: f64, seed: u64) -> Self {
        SyntheticSpec {
            count,
            shapes: DESK_SHAPES,
            rho,
            labels: LabelDistribution::Uniform,
            seed,
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Unit-Frobenius-norm rank-1 direction `a·bᵀ` with strictly positive time
/// profile `a`, so temporal pooling keeps the planted signal.
fn planted_direction(rng: &mut ChaCha8Rng, shape: ModalShape) -> Vec<f64> {
    let a: Vec<f64> = (0..shape.t)
        .map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal).abs())
        .collect();
    let b: Vec<f64> = (0..shape.d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj / norm)).collect()
}

/// Samples whose modality features are `ρ·y·U_m + (1−ρ)·ε` with a fixed
/// rank-1 direction `U_m` per modality and i.i.d. standard normal `ε`.
/// Values are rounded to `f32` precision so they survive the file format.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<ModalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let directions: Vec<Vec<f64>> = spec.shapes.iter().map(|&s| planted_direction(&mut rng, s)).collect();
    let rho = spec.rho.clamp(0.0, 1.0);
    (0..spec.count)
        .map(|_| {
            let label = match &spec.labels {
                LabelDistribution::Uniform => rng.random_range(-1.0..=1.0),
                LabelDistribution::Levels(levels) => levels[rng.random_range(0..levels.len())],
            };
            let label = round_f32(label).clamp(-1.0, 1.0);
            let features = [0, 1, 2].map(|m| {
                let s = spec.shapes[m];
                let data = directions[m]
                    .iter()
                    .map(|u| {
                        let noise: f64 = rng.sample(StandardNormal);
                        round_f32(rho * label * u + (1.0 - rho) * noise)
                    })
                    .collect();
                Tensor::matrix(s.t, s.d, data)
            });
            ModalSample { features, label }
        })
        .collect()
}

/// Splits `0..n` into batches of `batch_size` (the last may be short),
/// shuffled deterministically from `seed` when `shuffle` is set.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_for(n: usize) -> DatasetHeader {
        DatasetHeader::new(DESK_SHAPES, n, LabelScheme::Mosi7)
    }

    #[test]
    fn round_trip_single_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.mcih");
        let samples = generate_synthetic(&SyntheticSpec::desk(1, 0.5, 3));
        write_feature_file(&path, &header_for(1), &samples).unwrap();
        let (h, back) = read_feature_file(&path).unwrap();
        assert_eq!(h, header_for(1));
        assert!(back[0].bit_eq(&samples[0]));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&SyntheticSpec::desk(2, 0.5, 3));
        let err = write_feature_file(dir.path().join("x"), &header_for(3), &samples).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { header: 3, actual: 2 }));
    }

    #[test]
    fn nonconforming_sample_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = generate_synthetic(&SyntheticSpec::desk(2, 0.5, 3));
        samples[1].features[2] = Tensor::zeros(&[3, 12]);
        let err = write_feature_file(dir.path().join("x"), &header_for(2), &samples).unwrap_err();
        match err {
            DataError::ShapeMismatch {
                index,
                modality,
                expected,
                actual,
            } => {
                assert_eq!((index, modality), (1, Modality::Audio));
                assert_eq!(expected, [8, 12]);
                assert_eq!(actual, vec![3, 12]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        File::create(&path).unwrap();
        assert!(matches!(read_feature_file(&path), Err(DataError::BadMagic)));
    }

    #[test]
    fn truncation_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t");
        let samples = generate_synthetic(&SyntheticSpec::desk(3, 0.5, 3));
        write_feature_file(&path, &header_for(3), &samples).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let per_sample = header_for(3).sample_floats() * 4;
        let cut = bytes.len() - per_sample / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(read_feature_file(&path), Err(DataError::Truncated(2))));
    }

    #[test]
    fn out_of_range_label_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l");
        let samples = generate_synthetic(&SyntheticSpec::desk(1, 0.5, 3));
        write_feature_file(&path, &header_for(1), &samples).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let label_at = 4 + 2 + 8 * 4;
        bytes[label_at..label_at + 4].copy_from_slice(&1.5f32.to_le_bytes());
        let mut f = File::create(&path).unwrap();
        f.write_all(&bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(DataError::LabelOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&SyntheticSpec::desk(8, 0.7, 42));
        let b = generate_synthetic(&SyntheticSpec::desk(8, 0.7, 42));
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        let c = generate_synthetic(&SyntheticSpec::desk(8, 0.7, 43));
        assert!(!a[0].bit_eq(&c[0]));
    }

    #[test]
    fn synthetic_levels_are_respected() {
        let mut spec = SyntheticSpec::desk(50, 0.5, 1);
        spec.labels = LabelDistribution::Levels(vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        for s in generate_synthetic(&spec) {
            assert!([-1.0, -0.5, 0.0, 0.5, 1.0].contains(&s.label));
        }
    }

    #[test]
    fn batch_sizes() {
        let b = make_batches(10, 4, 0, false).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        assert!(matches!(make_batches(0, 4, 0, true), Err(DataError::Empty)));
        assert!(matches!(make_batches(3, 0, 0, true), Err(DataError::ZeroBatch)));
    }

    #[test]
    fn batches_partition_exhaustively() {
        for n in 1..=64 {
            for bs in 1..=n + 1 {
                let b = make_batches(n, bs, (n * 100 + bs) as u64, true).unwrap();
                let mut all = b.concat();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>(), "n={n} bs={bs}");
                assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
            }
        }
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        assert_eq!(
            make_batches(20, 3, 9, true).unwrap(),
            make_batches(20, 3, 9, true).unwrap()
        );
        assert_ne!(
            make_batches(20, 3, 9, true).unwrap(),
            make_batches(20, 3, 10, true).unwrap()
        );
    }
}
