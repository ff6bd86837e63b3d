//! Versioned binary checkpoints.
//!
//! ```text
//! "GSCK"                  magic
//! u32 version             currently 1
//! u32 flags               bit 0: optimizer state present
//! u32 n, n bytes          JSON header: estimator config and parameter ordering
//! u64 count               number of parameters
//! count × f32             parameters, in header order
//! if bit 0:
//!   u64 step, u64 seed
//!   count × f32           first moments
//!   count × f32           second moments
//! ```
//!
//! Integers and floats are little-endian. Training keeps every stored value
//! representable in `f32`, so save followed by load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimator::{Estimator, EstimatorConfig, EstimatorParams, ParamEntry};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSCK";
pub const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;
const MAX_HEADER_BYTES: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    estimator: EstimatorConfig,
    parameters: Vec<ParamEntry>,
}

/// Adam moments and the position in the training stream.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub seed: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EstimatorConfig,
    pub params: EstimatorParams,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let estimator = Estimator::new(self.config.clone())?;
        let n = estimator.num_params();
        if self.params.len() != n {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, config expects {n}",
                self.params.len()
            )));
        }
        if let Some(o) = &self.optimizer {
            if o.m.len() != n || o.v.len() != n {
                return Err(Error::invalid(
                    "optimizer moments do not match parameter count",
                ));
            }
        }
        let header = serde_json::to_vec(&Header {
            estimator: self.config.clone(),
            parameters: estimator.layout().entries().to_vec(),
        })
        .expect("header serializes");
        let flags = if self.optimizer.is_some() {
            FLAG_OPTIMIZER
        } else {
            0
        };
        let io = |e| Error::io("<checkpoint stream>", e);
        w.write_all(MAGIC).map_err(io)?;
        for v in [VERSION, flags, header.len() as u32] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&header).map_err(io)?;
        w.write_all(&(n as u64).to_le_bytes()).map_err(io)?;
        write_f32s(&mut w, &self.params.values).map_err(io)?;
        if let Some(o) = &self.optimizer {
            w.write_all(&o.step.to_le_bytes()).map_err(io)?;
            w.write_all(&o.seed.to_le_bytes()).map_err(io)?;
            write_f32s(&mut w, &o.m).map_err(io)?;
            write_f32s(&mut w, &o.v).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Counting {
            inner: r,
            offset: 0,
        };
        if &r.take::<4>()? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected \"GSCK\"".into(),
            });
        }
        let version = u32::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let flags = u32::from_le_bytes(r.take()?);
        if flags & !FLAG_OPTIMIZER != 0 {
            return Err(r.error(4, format!("unknown flags {flags:#x}")));
        }
        let len = u32::from_le_bytes(r.take()?);
        if len > MAX_HEADER_BYTES {
            return Err(r.error(4, format!("header length {len} too large")));
        }
        let header_at = r.offset;
        let mut bytes = vec![0; len as usize];
        r.fill(&mut bytes)?;
        let header: Header = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            offset: header_at,
            detail: format!("bad header: {e}"),
        })?;
        let estimator = Estimator::new(header.estimator.clone()).map_err(|e| Error::Format {
            offset: header_at,
            detail: e.to_string(),
        })?;
        if estimator.layout().entries() != header.parameters.as_slice() {
            return Err(Error::Format {
                offset: header_at,
                detail: "declared parameter ordering does not match this estimator".into(),
            });
        }
        let count = u64::from_le_bytes(r.take()?);
        if count != estimator.num_params() as u64 {
            return Err(r.error(
                8,
                format!(
                    "parameter count {count}, config implies {}",
                    estimator.num_params()
                ),
            ));
        }
        let n = count as usize;
        let params = EstimatorParams { values: r.f32s(n)? };
        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let step = u64::from_le_bytes(r.take()?);
            let seed = u64::from_le_bytes(r.take()?);
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            Some(OptimizerSnapshot { step, seed, m, v })
        } else {
            None
        };
        let mut extra = [0u8; 1];
        if r.inner
            .read(&mut extra)
            .map_err(|e| r.error(0, e.to_string()))?
            != 0
        {
            return Err(r.error(0, "trailing bytes"));
        }
        Ok(Self {
            config: header.estimator,
            params,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file and renames it over `path`, so an
    /// interrupted save leaves any previous checkpoint intact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(&tmp, source),
            other => other,
        })?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: self.offset,
            detail: if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format!("truncated: needed {} more bytes", buf.len())
            } else {
                e.to_string()
            },
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.offset;
        let mut out = Vec::with_capacity(n.min(1 << 24));
        for i in 0..n {
            let v = f32::from_le_bytes(self.take()?);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: at + 4 * i as u64,
                    detail: "non-finite value".into(),
                });
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }

    fn error(&self, back: u64, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset - back,
            detail: detail.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::TrunkVariant;

    fn sample(trunk: TrunkVariant, with_opt: bool) -> Checkpoint {
        let config = EstimatorConfig {
            dim: 8,
            num_condition_layers: 2,
            trunk,
            trunk_depth: 1,
            trunk_width: 4,
            num_heads: 2,
            num_tokens: 2,
            time_embed_dim: 4,
        };
        let est = Estimator::new(config.clone()).unwrap();
        let params = est.init(5);
        let n = params.len();
        let optimizer = with_opt.then(|| OptimizerSnapshot {
            step: 42,
            seed: 7,
            m: (0..n).map(|i| f64::from((i as f32).sin() * 1e-3)).collect(),
            v: (0..n)
                .map(|i| f64::from((i as f32 * 0.1).powi(2)))
                .collect(),
        });
        Checkpoint {
            config,
            params,
            optimizer,
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut b = Vec::new();
        c.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for trunk in [TrunkVariant::MlpBaseline, TrunkVariant::StagedTransformer] {
            for opt in [false, true] {
                let c = sample(trunk, opt);
                let b = bytes(&c);
                let back = Checkpoint::read_from(b.as_slice()).unwrap();
                assert_eq!(back, c);
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&back.params.values), bits(&c.params.values));
                assert_eq!(bytes(&back), b);
            }
        }
    }

    #[test]
    fn file_round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gsck");
        let a = sample(TrunkVariant::MlpBaseline, true);
        a.save(&path).unwrap();
        let b = sample(TrunkVariant::StagedTransformer, false);
        b.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), b);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn header_declares_ordering() {
        let b = bytes(&sample(TrunkVariant::MlpBaseline, false));
        let len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[16..16 + len]).unwrap();
        assert_eq!(header["parameters"][0]["name"], "stage1.layer_weights");
        assert_eq!(header["estimator"]["trunk"], "mlp-baseline");
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let good = bytes(&sample(TrunkVariant::MlpBaseline, true));
        let offset = |b: &[u8]| match Checkpoint::read_from(b).unwrap_err() {
            Error::Format { offset, .. } => offset,
            other => panic!("{other:?}"),
        };
        let mut bad = good.clone();
        bad[1] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = good.clone();
        bad[8] = 4;
        assert_eq!(offset(&bad), 8);
        assert_eq!(offset(&good[..good.len() - 3]), (good.len() - 4) as u64);
        let mut bad = good.clone();
        bad.push(1);
        assert_eq!(offset(&bad), good.len() as u64);

        // header that names a different ordering
        let text = String::from_utf8_lossy(&good).into_owned();
        assert!(text.contains("stage2.bias"));
        let swapped: Vec<u8> = {
            let len = u32::from_le_bytes(good[12..16].try_into().unwrap()) as usize;
            let h = String::from_utf8(good[16..16 + len].to_vec())
                .unwrap()
                .replace("stage2.bias", "stage2.bia_");
            [&good[..16], h.as_bytes(), &good[16 + len..]].concat()
        };
        assert_eq!(offset(&swapped), 16);
    }
}
