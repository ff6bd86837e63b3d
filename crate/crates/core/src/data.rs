//! Feature datasets: the `GSF1` binary format, a synthetic generator and
//! stratified splits.
//!
//! # File layout
//!
//! All integers are little-endian `u32`, all values little-endian IEEE-754 `f32`.
//!
//! ```text
//! "GSF1"                      magic, 4 bytes
//! version                     currently 1
//! record count  N
//! condition layers  C
//! dim  L
//! classes  B
//! B × { byte length, UTF-8 label bytes }
//! N × { label index (0xFFFFFFFF = unlabeled), C·L values (row-major), L values }
//! ```
//!
//! Nothing may follow the last record. Every value must be finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{ClassTaxonomy, TaxonomyCodebook};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSF1";
pub const VERSION: u32 = 1;
pub const UNLABELED: u32 = u32::MAX;

// guards against allocating from a corrupt header
const MAX_LABEL_BYTES: u32 = 1 << 16;
const MAX_PREALLOC_RECORDS: usize = 1 << 14;

/// One utterance: `C × L` condition stack and the terminal vector `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub label: Option<u32>,
    pub condition_stack: Array2<f32>,
    pub terminal: Array1<f32>,
}

impl FeatureRecord {
    pub fn condition_f64(&self) -> Array2<f64> {
        self.condition_stack.mapv(f64::from)
    }

    pub fn terminal_f64(&self) -> Array1<f64> {
        self.terminal.mapv(f64::from)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    taxonomy: ClassTaxonomy,
    dim: usize,
    layers: usize,
    records: Vec<FeatureRecord>,
}

impl FeatureDataset {
    pub fn new(
        taxonomy: ClassTaxonomy,
        dim: usize,
        layers: usize,
        records: Vec<FeatureRecord>,
    ) -> Result<Self> {
        if dim == 0 || layers == 0 {
            return Err(Error::invalid(format!(
                "dim and layers must be >= 1, got L={dim}, C={layers}"
            )));
        }
        let ds = Self {
            taxonomy,
            dim,
            layers,
            records,
        };
        for (i, r) in ds.records.iter().enumerate() {
            ds.check_record(r)
                .map_err(|e| Error::invalid(format!("record {i}: {e}")))?;
        }
        Ok(ds)
    }

    fn check_record(&self, r: &FeatureRecord) -> std::result::Result<(), String> {
        if r.condition_stack.dim() != (self.layers, self.dim) {
            return Err(format!(
                "condition stack is {:?}, expected ({}, {})",
                r.condition_stack.dim(),
                self.layers,
                self.dim
            ));
        }
        if r.terminal.len() != self.dim {
            return Err(format!(
                "terminal has length {}, expected {}",
                r.terminal.len(),
                self.dim
            ));
        }
        if let Some(label) = r.label {
            if label as usize >= self.taxonomy.len() {
                return Err(format!("label {label} >= {} classes", self.taxonomy.len()));
            }
        }
        if !r
            .condition_stack
            .iter()
            .chain(r.terminal.iter())
            .all(|v| v.is_finite())
        {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> &ClassTaxonomy {
        &self.taxonomy
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn codebook(&self) -> Result<TaxonomyCodebook> {
        TaxonomyCodebook::build(&self.taxonomy, self.dim)
    }

    /// Records per class, then the number of unlabeled records.
    pub fn class_counts(&self) -> (Vec<usize>, usize) {
        let mut counts = vec![0; self.taxonomy.len()];
        let mut unlabeled = 0;
        for r in &self.records {
            match r.label {
                Some(l) => counts[l as usize] += 1,
                None => unlabeled += 1,
            }
        }
        (counts, unlabeled)
    }

    /// New dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            taxonomy: self.taxonomy.clone(),
            dim: self.dim,
            layers: self.layers,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Human-readable header and per-class counts.
    pub fn summary(&self) -> String {
        let (counts, unlabeled) = self.class_counts();
        let mut s = format!(
            "format GSF1 v{VERSION}\nrecords {}\ncondition layers {}\ndim {}\nclasses {}\n",
            self.len(),
            self.layers,
            self.dim,
            self.taxonomy.len()
        );
        for (label, n) in self.taxonomy.labels().iter().zip(&counts) {
            s.push_str(&format!("  {label}\t{n}\n"));
        }
        if unlabeled > 0 {
            s.push_str(&format!("  (unlabeled)\t{unlabeled}\n"));
        }
        s
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            to_u32(self.records.len())?,
            to_u32(self.layers)?,
            to_u32(self.dim)?,
            to_u32(self.taxonomy.len())?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for label in self.taxonomy.labels() {
            w.write_all(&to_u32(label.len())?.to_le_bytes())?;
            w.write_all(label.as_bytes())?;
        }
        for r in &self.records {
            w.write_all(&r.label.unwrap_or(UNLABELED).to_le_bytes())?;
            for v in r.condition_stack.iter().chain(r.terminal.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader {
            inner: r,
            offset: 0,
        };
        let magic: [u8; 4] = r.array("magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}, expected \"GSF1\""),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_before(4, format!("unsupported version {version}")));
        }
        let count = r.u32("record count")? as usize;
        let layers = r.u32("condition layer count")? as usize;
        if layers == 0 {
            return Err(r.error_before(4, "condition layer count is 0"));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(r.error_before(4, "dim is 0"));
        }
        let classes = r.u32("class count")?;
        let labels_at = r.offset;
        let mut labels = Vec::with_capacity(classes.min(1024) as usize);
        for i in 0..classes {
            let len = r.u32("label length")?;
            if len > MAX_LABEL_BYTES {
                return Err(r.error_before(
                    4,
                    format!("label {i} length {len} exceeds {MAX_LABEL_BYTES}"),
                ));
            }
            let mut bytes = vec![0; len as usize];
            r.fill(&mut bytes, "label bytes")?;
            let label = String::from_utf8(bytes)
                .map_err(|_| r.error_before(len as u64, format!("label {i} is not valid UTF-8")))?;
            labels.push(label);
        }
        let taxonomy = ClassTaxonomy::new(labels).map_err(|e| Error::Format {
            offset: labels_at,
            detail: e.to_string(),
        })?;

        let mut records = Vec::with_capacity(count.min(MAX_PREALLOC_RECORDS));
        let mut buf = vec![0u8; 4 * (layers + 1) * dim];
        for i in 0..count {
            let record_at = r.offset;
            let label = match r.u32("record label")? {
                UNLABELED => None,
                l if l < classes => Some(l),
                l => {
                    return Err(
                        r.error_before(4, format!("record {i}: label {l} >= {classes} classes"))
                    )
                }
            };
            r.fill(&mut buf, "record values")?;
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(j) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format {
                    offset: record_at + 4 + 4 * j as u64,
                    detail: format!("record {i}: non-finite value"),
                });
            }
            let terminal = Array1::from(values[layers * dim..].to_vec());
            let mut values = values;
            values.truncate(layers * dim);
            let condition_stack =
                Array2::from_shape_vec((layers, dim), values).expect("sized buffer");
            records.push(FeatureRecord {
                label,
                condition_stack,
                terminal,
            });
        }
        let mut extra = [0u8; 1];
        match r.inner.read(&mut extra) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::Format {
                    offset: r.offset,
                    detail: format!("trailing bytes after {count} records"),
                })
            }
            Err(e) => return Err(r.error_here(format!("read failed: {e}"))),
        }
        Ok(Self {
            taxonomy,
            dim,
            layers,
            records,
        })
    }
}

fn to_u32(n: usize) -> std::io::Result<u32> {
    u32::try_from(n).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{n} exceeds u32"))
    })
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + got as u64,
                        detail: format!("truncated while reading {what}"),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Format {
                        offset: self.offset + got as u64,
                        detail: format!("read failed in {what}: {e}"),
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn error_before(&self, back: u64, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset - back,
            detail: detail.into(),
        }
    }

    fn error_here(&self, detail: impl Into<String>) -> Error {
        self.error_before(0, detail)
    }
}

pub fn write_dataset(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dataset
        .write_to(BufWriter::new(file))
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureDataset::read_from(BufReader::new(file))
}

/// Parameters of the synthetic class-conditional generator.
///
/// Class means are drawn as `mean_scale · N(0, I)` unless given explicitly.
/// A class-`b` record is `x1 = mean_b + within_std · N(0, I)`; each condition
/// layer is `x1 + layer_noise_std · N(0, I)` with independent noise per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub layers: usize,
    pub mean_scale: f64,
    pub within_std: f64,
    pub layer_noise_std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 64,
            layers: 3,
            mean_scale: 0.25,
            within_std: 0.05,
            layer_noise_std: 0.05,
            samples_per_class: 500,
            seed: 0,
            means: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || 2 * self.num_classes >= self.dim {
            return Err(Error::DimensionTooSmall {
                classes: self.num_classes,
                dim: self.dim,
            });
        }
        if self.layers == 0 {
            return Err(Error::invalid("layers must be >= 1"));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "mean_scale must be > 0, got {}",
                self.mean_scale
            )));
        }
        for (name, v) in [
            ("within_std", self.within_std),
            ("layer_noise_std", self.layer_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let Some(means) = &self.means {
            if means.len() != self.num_classes || means.iter().any(|m| m.len() != self.dim) {
                return Err(Error::invalid(format!(
                    "means must be {} vectors of length {}",
                    self.num_classes, self.dim
                )));
            }
        }
        Ok(())
    }

    /// Class means: the explicit ones, or the seeded draw.
    pub fn class_means(&self) -> Result<Array2<f64>> {
        self.validate()?;
        if let Some(means) = &self.means {
            let flat: Vec<f64> = means.iter().flatten().copied().collect();
            return Ok(Array2::from_shape_vec((self.num_classes, self.dim), flat)
                .expect("validated shape"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        Ok(Array2::from_shape_fn((self.num_classes, self.dim), |_| {
            self.mean_scale * rng.sample::<f64, _>(StandardNormal)
        }))
    }

    /// Smallest distance between two class means, per unit of expected
    /// within-class distance `within_std·√(2L)`. Infinite for `within_std = 0`.
    pub fn separation_ratio(&self) -> Result<f64> {
        let means = self.class_means()?;
        let mut min_d = f64::INFINITY;
        for i in 0..self.num_classes {
            for j in (i + 1)..self.num_classes {
                let d = &means.row(i) - &means.row(j);
                min_d = min_d.min(d.dot(&d).sqrt());
            }
        }
        Ok(min_d / (self.within_std * (2.0 * self.dim as f64).sqrt()))
    }
}

/// Class labels used by synthetic datasets: `class0`, `class1`, ...
pub fn synthetic_labels(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|b| format!("class{b}")).collect()
}

/// Records are emitted class by class, `samples_per_class` each.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    let means = spec.class_means()?;
    let taxonomy = ClassTaxonomy::new(synthetic_labels(spec.num_classes))?;
    let (l, c) = (spec.dim, spec.layers);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut records = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for b in 0..spec.num_classes {
        let mean = means.row(b);
        for _ in 0..spec.samples_per_class {
            let x1 = Array1::from_shape_fn(l, |j| {
                mean[j] + spec.within_std * rng.sample::<f64, _>(StandardNormal)
            });
            let stack = Array2::from_shape_fn((c, l), |(_, j)| {
                x1[j] + spec.layer_noise_std * rng.sample::<f64, _>(StandardNormal)
            });
            records.push(FeatureRecord {
                label: Some(b as u32),
                condition_stack: stack.mapv(|v| v as f32),
                terminal: x1.mapv(|v| v as f32),
            });
        }
    }
    FeatureDataset::new(taxonomy, l, c, records)
}

/// Label-stratified split into (train, validation, test). Within each class
/// (unlabeled records form their own group) the records are shuffled and
/// divided by rounding the cumulative fractions. Each output keeps the
/// original record order.
pub fn split(
    dataset: &FeatureDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[FeatureDataset; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
        return Err(Error::invalid(format!(
            "fractions must be >= 0, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "fractions must sum to 1, got {total}"
        )));
    }
    let groups = dataset.taxonomy.len() + 1;
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (i, r) in dataset.records.iter().enumerate() {
        by_group[r.label.map_or(groups - 1, |l| l as usize)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut idx in by_group {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let cut1 = (n * fractions[0]).round() as usize;
        let cut2 = ((n * (fractions[0] + fractions[1])).round() as usize).clamp(cut1, idx.len());
        parts[0].extend_from_slice(&idx[..cut1]);
        parts[1].extend_from_slice(&idx[cut1..cut2]);
        parts[2].extend_from_slice(&idx[cut2..]);
    }
    Ok(parts.map(|mut p| {
        p.sort_unstable();
        dataset.subset(&p)
    }))
}
