//! Sample containers, seeded splits, network input encoding and the binary
//! dataset format.
//!
//! File layout (little endian):
//!
//! ```text
//! magic "SSLB" | version u32 | n_samples u64 | n_bs u16 | n_port u16 | n_delay u16 | labeled u8
//! per sample: n_bs*n_port*n_delay (re f32, im f32) in [bs][port][tap] order
//!             then, if labeled, x f64, y f64
//! ```
//!
//! A JSON manifest is written next to each file as `<file>.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::channel_sim::{CirTensor, SimulatorParams};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const MAGIC: &[u8; 4] = b"SSLB";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 2 + 2 + 2 + 1;
/// Extension used when a directory of shards is read.
pub const SHARD_EXTENSION: &str = "sslb";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cir: CirTensor,
    /// `(x, y)` in meters; UE height is fixed by the scenario.
    pub position: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub params: Option<SimulatorParams>,
    pub seed: Option<u64>,
    pub labeled: bool,
    pub n_samples: usize,
    pub generator: String,
    /// Operations applied after generation (splits, subsets, concatenation).
    #[serde(default)]
    pub derivation: Vec<String>,
}

impl Manifest {
    pub fn generated(params: SimulatorParams, seed: u64, labeled: bool) -> Self {
        Self {
            params: Some(params),
            seed: Some(seed),
            labeled,
            n_samples: 0,
            generator: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            derivation: Vec::new(),
        }
    }

    fn derived(&self, step: String) -> Self {
        let mut m = self.clone();
        m.derivation.push(step);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: (usize, usize, usize),
    samples: Vec<Sample>,
    manifest: Manifest,
}

impl Dataset {
    pub fn new(dims: (usize, usize, usize), samples: Vec<Sample>, mut manifest: Manifest) -> Result<Self> {
        if let Some(bad) = samples.iter().position(|s| s.cir.dims() != dims) {
            return Err(Error::Shape {
                expected: format!("{dims:?}"),
                actual: format!("{:?} at sample {bad}", samples[bad].cir.dims()),
            });
        }
        let labeled = samples.first().map_or(manifest.labeled, |s| s.position.is_some());
        if samples.iter().any(|s| s.position.is_some() != labeled) {
            return Err(Error::domain("positions must be present for all samples or none"));
        }
        manifest.labeled = labeled;
        manifest.n_samples = samples.len();
        Ok(Self {
            dims,
            samples,
            manifest,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.manifest.labeled
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn cirs(&self) -> Vec<&CirTensor> {
        self.samples.iter().map(|s| &s.cir).collect()
    }

    /// Position of sample `i`; panics on unlabeled data.
    pub fn position(&self, i: usize) -> [f64; 2] {
        self.samples[i]
            .position
            .expect("position requested from an unlabeled sample")
    }

    pub fn positions(&self) -> Result<Vec<[f64; 2]>> {
        self.samples
            .iter()
            .map(|s| s.position.ok_or_else(|| Error::domain("dataset is unlabeled")))
            .collect()
    }

    pub fn select(&self, indices: &[usize], note: String) -> Dataset {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let manifest = self.manifest.derived(note);
        Dataset::new(self.dims, samples, manifest).expect("subset of a valid dataset")
    }

    /// Same CIRs with positions removed.
    pub fn without_labels(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                cir: s.cir.clone(),
                position: None,
            })
            .collect();
        let mut manifest = self.manifest.derived("labels removed".into());
        manifest.labeled = false;
        Dataset::new(self.dims, samples, manifest).expect("unlabeled copy of a valid dataset")
    }

    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::domain("no datasets to concatenate"))?;
        let dims = first.dims;
        let mut manifest = first.manifest.clone();
        let mut samples = first.samples;
        let mut count = 1;
        for part in iter {
            if part.dims != dims {
                return Err(Error::Shape {
                    expected: format!("{dims:?}"),
                    actual: format!("{:?}", part.dims),
                });
            }
            samples.extend(part.samples);
            count += 1;
        }
        if count > 1 {
            manifest.derivation.push(format!("concatenated {count} shards"));
        }
        Dataset::new(dims, samples, manifest)
    }
}

fn permutation(n: usize, seed: u64, stream: Stream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, stream));
    idx
}

/// Index form of [`split`].
pub fn split_indices(n: usize, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train + n_test > n {
        return Err(Error::domain(format!(
            "split of {n_train} + {n_test} exceeds {n} samples"
        )));
    }
    let perm = permutation(n, seed, Stream::Split);
    Ok((perm[..n_train].to_vec(), perm[n_train..n_train + n_test].to_vec()))
}

pub fn split(dataset: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset.len(), n_train, n_test, seed)?;
    Ok((
        dataset.select(&train, format!("split train {n_train} seed {seed}")),
        dataset.select(&test, format!("split test {n_test} seed {seed}")),
    ))
}

/// Index form of [`subset_labeled`]: the first `n` entries of a seeded
/// permutation, so subsets under one seed are nested.
pub fn subset_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::domain(format!("subset of {n} exceeds {len} samples")));
    }
    let mut perm = permutation(len, seed, Stream::Subset);
    perm.truncate(n);
    Ok(perm)
}

pub fn subset_labeled(train: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let idx = subset_indices(train.len(), n, seed)?;
    Ok(train.select(&idx, format!("subset {n} seed {seed}")))
}

/// Flattened network input: normalized CIR followed by normalized reference.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

pub fn feature_len(dims: (usize, usize, usize)) -> usize {
    2 * 2 * dims.0 * dims.1 * dims.2
}

/// `1 / sqrt(energy)` of a CIR.
pub fn unit_energy_scale(cir: &CirTensor) -> Result<f64> {
    let energy = cir.energy();
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(Error::domain("cannot normalize a CIR with zero energy"));
    }
    Ok(1.0 / energy.sqrt())
}

fn write_scaled(cir: &CirTensor, scale: f64, out: &mut [f64]) {
    for (pair, c) in out.chunks_exact_mut(2).zip(cir.data()) {
        pair[0] = c.re as f64 * scale;
        pair[1] = c.im as f64 * scale;
    }
}

/// Writes `featurize(cir, reference)` into `out` given precomputed scales.
pub fn write_features(
    cir: &CirTensor,
    cir_scale: f64,
    reference: &CirTensor,
    reference_scale: f64,
    out: &mut [f64],
) {
    let half = out.len() / 2;
    write_scaled(cir, cir_scale, &mut out[..half]);
    write_scaled(reference, reference_scale, &mut out[half..]);
}

pub fn featurize(cir: &CirTensor, reference: &CirTensor) -> Result<FeatureVector> {
    if cir.dims() != reference.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", cir.dims()),
            actual: format!("{:?}", reference.dims()),
        });
    }
    let mut out = vec![0.0; feature_len(cir.dims())];
    write_features(
        cir,
        unit_energy_scale(cir)?,
        reference,
        unit_energy_scale(reference)?,
        &mut out,
    );
    Ok(FeatureVector(out))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let (n_bs, n_port, n_delay) = dataset.dims;
    let dim16 = |v: usize, name: &str| {
        u16::try_from(v).map_err(|_| Error::config(format!("{name} = {v} does not fit the format")))
    };
    let per_sample = n_bs * n_port * n_delay * 8 + if dataset.is_labeled() { 16 } else { 0 };
    let mut buf = Vec::with_capacity(HEADER_LEN + per_sample * dataset.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    buf.extend_from_slice(&dim16(n_bs, "n_bs")?.to_le_bytes());
    buf.extend_from_slice(&dim16(n_port, "n_port")?.to_le_bytes());
    buf.extend_from_slice(&dim16(n_delay, "n_delay")?.to_le_bytes());
    buf.push(u8::from(dataset.is_labeled()));
    for sample in &dataset.samples {
        for c in sample.cir.data() {
            buf.extend_from_slice(&c.re.to_le_bytes());
            buf.extend_from_slice(&c.im.to_le_bytes());
        }
        if let Some([x, y]) = sample.position {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.offset + N;
        let slice = self.bytes.get(self.offset..end).ok_or_else(|| Error::Format {
            offset: self.offset as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset = end;
        Ok(slice.try_into().expect("slice length"))
    }
}

pub fn decode(bytes: &[u8], manifest: Manifest) -> Result<Dataset> {
    let mut cur = Cursor { bytes, offset: 0 };
    let magic = cur.take::<4>("magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version = u32::from_le_bytes(cur.take("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let n_samples = u64::from_le_bytes(cur.take("sample count")?);
    let n_bs = u16::from_le_bytes(cur.take("n_bs")?) as usize;
    let n_port = u16::from_le_bytes(cur.take("n_port")?) as usize;
    let n_delay = u16::from_le_bytes(cur.take("n_delay")?) as usize;
    let labeled = match cur.take::<1>("labeled flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: cur.offset as u64 - 1,
                message: format!("labeled flag must be 0 or 1, got {other}"),
            })
        }
    };
    let per_cir = n_bs * n_port * n_delay;
    let per_sample = per_cir as u64 * 8 + if labeled { 16 } else { 0 };
    let expected = HEADER_LEN as u64 + per_sample * n_samples;
    if (bytes.len() as u64) < expected {
        let complete = (bytes.len() - HEADER_LEN) as u64 / per_sample.max(1);
        return Err(Error::Format {
            offset: HEADER_LEN as u64 + complete * per_sample,
            message: format!("truncated: header announces {n_samples} samples, file holds {complete}"),
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Format {
            offset: expected,
            message: "trailing bytes after last sample".into(),
        });
    }
    let mut samples = Vec::with_capacity(n_samples as usize);
    for _ in 0..n_samples {
        let mut data = Vec::with_capacity(per_cir);
        for _ in 0..per_cir {
            let re = f32::from_le_bytes(cur.take("cir")?);
            let im = f32::from_le_bytes(cur.take("cir")?);
            data.push(Complex32::new(re, im));
        }
        let position = if labeled {
            let x = f64::from_le_bytes(cur.take("position")?);
            let y = f64::from_le_bytes(cur.take("position")?);
            Some([x, y])
        } else {
            None
        };
        samples.push(Sample {
            cir: CirTensor::from_vec((n_bs, n_port, n_delay), data)?,
            position,
        });
    }
    let mut manifest = manifest;
    manifest.labeled = labeled;
    Dataset::new((n_bs, n_port, n_delay), samples, manifest)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(dataset)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_vec_pretty(&dataset.manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

/// Reads one file, or every `*.sslb` shard of a directory in lexicographic order.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        let mut shards: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == SHARD_EXTENSION))
            .collect();
        shards.sort();
        if shards.is_empty() {
            return Err(Error::config(format!("{} contains no .{SHARD_EXTENSION} shards", path.display())));
        }
        let parts = shards.iter().map(|p| read_file(p)).collect::<Result<Vec<_>>>()?;
        return Dataset::concat(parts);
    }
    read_file(path)
}

fn read_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::json(&mpath, e))?
    } else {
        Manifest::default()
    };
    decode(&bytes, manifest).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
