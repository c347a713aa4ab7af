use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::Sample;

/// Corruption magnitude for severity levels 1 to 5.
pub const SEVERITY_SIGMA: [f64; 5] = [0.2, 0.4, 0.6, 0.9, 1.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// One axis-aligned Gaussian per class with its own mean and variances.
    GaussianBlobs,
    /// Classes on concentric spherical shells of increasing radius.
    ConcentricRings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Corruption {
    None,
    /// Independent N(0, σ²) noise on every feature.
    AdditiveGaussian {
        sigma: f64,
    },
    /// Each feature zeroed with probability `rate`.
    FeatureDropout {
        rate: f64,
    },
    /// `scale · x + shift · d` with a fixed per-world sign vector `d`.
    AffineDistort {
        scale: f64,
        shift: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    None,
    AdditiveGaussian,
    FeatureDropout,
    AffineDistort,
}

impl Corruption {
    /// Corruption of the given kind at severity `level` (1 to 5).
    pub fn at_severity(kind: CorruptionKind, level: u8) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::config(format!(
                "severity must be 1..=5, got {level}"
            )));
        }
        let s = SEVERITY_SIGMA[level as usize - 1];
        Ok(match kind {
            CorruptionKind::None => Corruption::None,
            CorruptionKind::AdditiveGaussian => Corruption::AdditiveGaussian { sigma: s },
            CorruptionKind::FeatureDropout => Corruption::FeatureDropout { rate: s / 2.0 },
            CorruptionKind::AffineDistort => Corruption::AffineDistort {
                scale: 1.0 / (1.0 + s),
                shift: s,
            },
        })
    }

    pub fn kind(&self) -> CorruptionKind {
        match self {
            Corruption::None => CorruptionKind::None,
            Corruption::AdditiveGaussian { .. } => CorruptionKind::AdditiveGaussian,
            Corruption::FeatureDropout { .. } => CorruptionKind::FeatureDropout,
            Corruption::AffineDistort { .. } => CorruptionKind::AffineDistort,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Corruption::None => true,
            Corruption::AdditiveGaussian { sigma } => sigma.is_finite() && sigma >= 0.0,
            Corruption::FeatureDropout { rate } => (0.0..=1.0).contains(&rate),
            Corruption::AffineDistort { scale, shift } => scale.is_finite() && shift.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid corruption {self:?}")))
        }
    }

    fn apply<R: Rng + ?Sized>(&self, x: &mut [f32], world: &World, rng: &mut R) {
        match *self {
            Corruption::None => {}
            Corruption::AdditiveGaussian { sigma } => {
                for v in x.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += (sigma * n) as f32;
                }
            }
            Corruption::FeatureDropout { rate } => {
                for v in x.iter_mut() {
                    if rng.random::<f64>() < rate {
                        *v = 0.0;
                    }
                }
            }
            Corruption::AffineDistort { scale, shift } => {
                for (v, &d) in x.iter_mut().zip(&world.direction) {
                    *v = (scale * *v as f64 + shift * d) as f32;
                }
            }
        }
    }
}

/// Everything that defines a sample stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub input_dim: usize,
    pub num_samples: usize,
    pub corruption: Corruption,
    /// When non-empty, replaces `corruption`: the stream is split into
    /// equal contiguous segments, one per entry, in order.
    #[serde(default)]
    pub mixed: Vec<Corruption>,
    /// Seed of the class geometry; pretraining data and test streams that
    /// should share a task use the same value.
    pub world_seed: u64,
    /// Seed of the sample draws and corruption noise.
    pub seed: u64,
}

impl StreamSpec {
    /// Clean blob stream with the default desk-scale dimensions.
    pub fn blobs(num_samples: usize, world_seed: u64, seed: u64) -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            num_classes: 10,
            input_dim: 32,
            num_samples,
            corruption: Corruption::None,
            mixed: Vec::new(),
            world_seed,
            seed,
        }
    }

    pub fn with_corruption(mut self, c: Corruption) -> Self {
        self.corruption = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.input_dim == 0 {
            return Err(Error::config(
                "streams need at least 2 classes and 1 feature",
            ));
        }
        self.corruption.validate()?;
        self.mixed.iter().try_for_each(Corruption::validate)
    }
}

/// Class geometry shared by every stream drawn with the same world seed.
#[derive(Debug, Clone)]
struct World {
    means: Vec<Vec<f64>>,
    /// Per-class, per-feature noise standard deviations.
    scales: Vec<Vec<f64>>,
    direction: Vec<f64>,
}

/// Spread of the blob means relative to the within-class noise.
const BLOB_SPREAD: f64 = 0.9;
/// Range of per-class feature noise deviations; unequal covariances make
/// the optimal class boundaries quadratic.
const BLOB_SCALE_RANGE: std::ops::Range<f64> = 0.4..1.6;
/// Within-class noise per feature for rings.
const RING_NOISE: f64 = 0.05;

impl World {
    fn new(spec: &StreamSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let means = (0..spec.num_classes)
            .map(|_| {
                (0..spec.input_dim)
                    .map(|_| BLOB_SPREAD * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let direction = (0..spec.input_dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let scales = (0..spec.num_classes)
            .map(|_| {
                (0..spec.input_dim)
                    .map(|_| rng.random_range(BLOB_SCALE_RANGE))
                    .collect()
            })
            .collect();
        Self {
            means,
            scales,
            direction,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, spec: &StreamSpec, label: usize, rng: &mut R) -> Vec<f32> {
        match spec.generator {
            Generator::GaussianBlobs => self.means[label]
                .iter()
                .zip(&self.scales[label])
                .map(|(&m, &sd)| {
                    (m + sd * Distribution::<f64>::sample(&StandardNormal, rng)) as f32
                })
                .collect(),
            Generator::ConcentricRings => {
                let d = spec.input_dim as f64;
                let c = spec.num_classes as f64;
                let radius = d.sqrt() * (0.5 + label as f64 / (c - 1.0).max(1.0));
                let u = unit_vector(spec.input_dim, rng);
                u.iter()
                    .map(|&ui| {
                        let n: f64 = StandardNormal.sample(rng);
                        (radius * ui + RING_NOISE * n) as f32
                    })
                    .collect()
            }
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws the stream. Labels are uniform over classes; ids run from 0.
///
/// Clean draws and corruption noise use separate generator streams, so the
/// same seed yields the same underlying clean samples at every severity.
pub fn gen_stream(spec: &StreamSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let world = World::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
    noise.set_stream(1);
    let segments = spec.mixed.len().max(1);
    let per_segment = spec.num_samples.div_ceil(segments).max(1);
    let mut out = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let label = rng.random_range(0..spec.num_classes);
        let mut x = world.draw(spec, label, &mut rng);
        let corruption = if spec.mixed.is_empty() {
            &spec.corruption
        } else {
            &spec.mixed[i / per_segment]
        };
        corruption.apply(&mut x, &world, &mut noise);
        out.push(Sample::labeled(i as u64, x, label as u32));
    }
    Ok(out)
}

pub const STREAM_MAGIC: [u8; 4] = *b"CEMS";
pub const STREAM_VERSION: u8 = 1;
/// Label value written for unlabeled samples.
pub const NO_LABEL: u32 = u32::MAX;

/// Header of a stream file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub num_classes: u32,
    pub input_dim: u32,
    pub count: u64,
}

pub fn write_stream<W: Write>(
    w: &mut W,
    num_classes: usize,
    input_dim: usize,
    samples: &[Sample],
) -> Result<()> {
    w.write_all(&STREAM_MAGIC)?;
    w.write_all(&[STREAM_VERSION])?;
    w.write_all(&(num_classes as u32).to_le_bytes())?;
    w.write_all(&(input_dim as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        if s.features.len() != input_dim {
            return Err(Error::StreamFile(format!(
                "sample {} has {} features, header says {input_dim}",
                s.id,
                s.features.len()
            )));
        }
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&s.label.unwrap_or(NO_LABEL).to_le_bytes())?;
        for v in &s.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::StreamFile(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_stream<R: Read>(r: &mut R) -> Result<(StreamHeader, Vec<Sample>)> {
    let mut head = [0u8; 21];
    read_exact_or(r, &mut head, "header")?;
    if head[..4] != STREAM_MAGIC {
        return Err(Error::StreamFile("bad magic".into()));
    }
    if head[4] != STREAM_VERSION {
        return Err(Error::StreamFile(format!("unknown version {}", head[4])));
    }
    let header = StreamHeader {
        num_classes: u32::from_le_bytes(head[5..9].try_into().unwrap()),
        input_dim: u32::from_le_bytes(head[9..13].try_into().unwrap()),
        count: u64::from_le_bytes(head[13..21].try_into().unwrap()),
    };
    let dim = header.input_dim as usize;
    let mut rec = vec![0u8; 12 + 4 * dim];
    let mut samples = Vec::with_capacity(header.count.min(1 << 24) as usize);
    for i in 0..header.count {
        read_exact_or(r, &mut rec, &format!("sample {i}"))?;
        let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let label = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        let features = rec[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let label = (label != NO_LABEL).then_some(label);
        samples.push(Sample {
            id,
            features,
            label,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::StreamFile("trailing bytes after last sample".into()));
    }
    Ok((header, samples))
}

pub fn save_stream(
    path: impl AsRef<Path>,
    num_classes: usize,
    input_dim: usize,
    samples: &[Sample],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_stream(&mut w, num_classes, input_dim, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<(StreamHeader, Vec<Sample>)> {
    read_stream(&mut BufReader::new(File::open(path)?))
}
