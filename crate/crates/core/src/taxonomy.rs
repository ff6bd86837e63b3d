//! Class taxonomy and sinusoidal codewords.
//!
//! Class `i` (0-based) is encoded as `sin(2π·l/L·(i+1))` for `l = 0..L`. Distinct
//! integer frequencies below `L/2` are exactly orthogonal over `L` samples, and
//! each codeword has squared norm `L/2`, so the codebook is a scaled orthogonal
//! frame. Classification is cosine-similarity argmax against it.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Ordered, distinct class labels. A label's index is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassTaxonomy {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::invalid(format!(
                "a taxonomy needs at least 2 classes, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::invalid(format!("label {i} is empty")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Codeword for class `index` at embedding length `dim`.
///
/// Requires `dim >= 4` and `index + 1 < dim / 2`.
pub fn encode_class(index: usize, dim: usize) -> Result<Array1<f64>> {
    if dim < 4 {
        return Err(Error::invalid(format!("dim must be >= 4, got {dim}")));
    }
    // index + 1 < dim/2, kept in integers so odd dims are handled exactly
    if 2 * (index + 1) >= dim {
        return Err(Error::invalid(format!(
            "frequency index+1 = {} must be < dim/2 = {}",
            index + 1,
            dim as f64 / 2.0
        )));
    }
    let freq = (index + 1) as f64;
    let len = dim as f64;
    Ok(Array1::from_shape_fn(dim, |l| {
        (2.0 * PI * l as f64 / len * freq).sin()
    }))
}

/// All codewords of a taxonomy, row `b` = codeword of class `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyCodebook {
    labels: Vec<String>,
    codewords: Array2<f64>,
}

impl TaxonomyCodebook {
    pub fn build(taxonomy: &ClassTaxonomy, dim: usize) -> Result<Self> {
        let classes = taxonomy.len();
        if 2 * classes >= dim {
            return Err(Error::DimensionTooSmall { classes, dim });
        }
        let mut codewords = Array2::zeros((classes, dim));
        for (b, mut row) in codewords.rows_mut().into_iter().enumerate() {
            row.assign(&encode_class(b, dim)?);
        }
        Ok(Self {
            labels: taxonomy.labels().to_vec(),
            codewords,
        })
    }

    pub fn dim(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn codewords(&self) -> &Array2<f64> {
        &self.codewords
    }

    /// # Panics
    /// If `class` is out of range.
    pub fn codeword(&self, class: usize) -> ArrayView1<'_, f64> {
        self.codewords.row(class)
    }

    /// Cosine similarity of `estimate` against every codeword, and the argmax.
    ///
    /// Ties go to the lowest class index.
    pub fn classify(&self, estimate: ArrayView1<'_, f64>) -> Result<(usize, Vec<f64>)> {
        if estimate.len() != self.dim() {
            return Err(Error::invalid(format!(
                "estimate has length {}, codebook dim is {}",
                estimate.len(),
                self.dim()
            )));
        }
        let norm = estimate.dot(&estimate).sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric(
                "classify",
                "estimate contains non-finite values",
            ));
        }
        if norm == 0.0 {
            return Err(Error::DegenerateInput(
                "cannot classify a zero-norm estimate".into(),
            ));
        }
        let scores: Vec<f64> = self
            .codewords
            .rows()
            .into_iter()
            .map(|c| estimate.dot(&c) / (norm * c.dot(&c).sqrt()))
            .collect();
        let mut best = 0;
        for (b, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = b;
            }
        }
        Ok((best, scores))
    }

    pub fn manifest(&self) -> CodebookManifest {
        CodebookManifest {
            dim: self.dim(),
            labels: self.labels.clone(),
            checksums: Some(
                self.codewords
                    .rows()
                    .into_iter()
                    .map(codeword_checksum)
                    .collect(),
            ),
        }
    }
}

fn codeword_checksum(row: ArrayView1<'_, f64>) -> String {
    let mut hasher = Sha256::new();
    for v in row.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Persisted description of a codebook. Codewords are never stored; they are
/// regenerated from `(labels, dim)` and optionally verified against checksums
/// (SHA-256 over the little-endian `f64` bytes of each row).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookManifest {
    pub dim: usize,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksums: Option<Vec<String>>,
}

impl CodebookManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("codebook manifest: {e}")))
    }

    /// Rebuilds the codebook, checking the checksums when present.
    pub fn regenerate(&self) -> Result<TaxonomyCodebook> {
        let taxonomy = ClassTaxonomy::new(self.labels.iter().cloned())?;
        let codebook = TaxonomyCodebook::build(&taxonomy, self.dim)?;
        if let Some(expected) = &self.checksums {
            if expected.len() != codebook.num_classes() {
                return Err(Error::Config(format!(
                    "manifest lists {} checksums for {} labels",
                    expected.len(),
                    codebook.num_classes()
                )));
            }
            for (b, (want, row)) in expected.iter().zip(codebook.codewords.rows()).enumerate() {
                let got = codeword_checksum(row);
                if &got != want {
                    return Err(Error::Config(format!(
                        "checksum mismatch for class {b} ({}): manifest {want}, regenerated {got}",
                        codebook.labels[b]
                    )));
                }
            }
        }
        Ok(codebook)
    }
}
