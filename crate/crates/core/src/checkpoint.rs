//! Binary checkpoint format.
//!
//! ```text
//! "ROFCKPT1"                 8 bytes
//! version                    u32 LE
//! header length, header      u32 LE + UTF-8 JSON {arch, codec, train, sim, meta}
//! repeated until EOF:
//!   path length, path        u32 LE + UTF-8
//!   rows, cols               u32 LE each
//!   values                   rows·cols f32 LE, row-major
//! SHA-256 of everything above  32 bytes
//! ```
//!
//! Network layers use their layer path (`radar.0.weight`, ...). Adam moments,
//! when present, follow under `optim.m.<path>` and `optim.v.<path>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::frame_io::write_atomic;
use crate::fusion::{ArchConfig, Params};
use crate::sim::SimConfig;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"ROFCKPT1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seed: u64,
    /// Head output ordering, e.g. `range:11|azimuth:5|reg:dr,da`.
    pub head_layout: String,
    pub adam_step: u64,
}

impl CheckpointMeta {
    pub fn head_layout(codec: &CodecConfig) -> String {
        format!("range:{}|azimuth:{}|reg:dr,da", codec.range_classes(), codec.az_classes())
    }

    /// Metadata of an untrained model.
    pub fn empty(exp: &ExperimentConfig) -> Self {
        Self {
            epoch: 0,
            train_loss: 0.0,
            val_loss: None,
            seed: exp.train.seed,
            head_layout: Self::head_layout(&exp.codec),
            adam_step: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    codec: CodecConfig,
    train: TrainConfig,
    sim: SimConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    /// Simulator settings, needed to regenerate features at evaluation.
    pub sim: SimConfig,
    pub meta: CheckpointMeta,
    pub params: Params<f32>,
    /// Adam first and second moments.
    pub optim: Option<(Params<f32>, Params<f32>)>,
}

impl Checkpoint {
    pub fn from_training(exp: &ExperimentConfig, params: &Params<f64>, adam: Option<&AdamState<f64>>, meta: CheckpointMeta) -> Self {
        Self {
            arch: exp.arch.clone(),
            codec: exp.codec,
            train: exp.train.clone(),
            sim: exp.sim.clone(),
            meta,
            params: params.cast(),
            optim: adam.map(|a| (a.m.cast(), a.v.cast())),
        }
    }

    /// The training-time experiment, with `eval` settings supplied.
    pub fn experiment(&self, eval: EvalConfig) -> ExperimentConfig {
        ExperimentConfig {
            sim: self.sim.clone(),
            codec: self.codec,
            arch: self.arch.clone(),
            train: self.train.clone(),
            eval,
        }
    }

    /// Network parameters widened to `f64`.
    pub fn params_f64(&self) -> Params<f64> {
        self.params.cast()
    }

    pub fn adam_state(&self) -> Result<Option<AdamState<f64>>> {
        Ok(self.optim.as_ref().map(|(m, v)| AdamState {
            step: self.meta.adam_step,
            m: m.cast(),
            v: v.cast(),
        }))
    }

    /// Refuses to pair this checkpoint with a different network or codec.
    pub fn check_compatible(&self, exp: &ExperimentConfig) -> Result<()> {
        if self.arch != exp.arch {
            return Err(Error::config(
                "arch",
                format!(
                    "checkpoint arch {} differs from config arch {}",
                    serde_json::to_string(&self.arch)?,
                    serde_json::to_string(&exp.arch)?
                ),
            ));
        }
        if self.codec != exp.codec {
            return Err(Error::config(
                "codec",
                format!(
                    "checkpoint codec {} differs from config codec {}",
                    serde_json::to_string(&self.codec)?,
                    serde_json::to_string(&exp.codec)?
                ),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            arch: self.arch.clone(),
            codec: self.codec,
            train: self.train.clone(),
            sim: self.sim.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.params.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        push_len(&mut out, header.len())?;
        out.extend_from_slice(&header);
        let mut write_all = |prefix: &str, p: &Params<f32>| -> Result<()> {
            for (path, t) in p.iter() {
                let name = format!("{prefix}{path}");
                push_len(&mut out, name.len())?;
                out.extend_from_slice(name.as_bytes());
                push_len(&mut out, t.rows())?;
                push_len(&mut out, t.cols())?;
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Ok(())
        };
        write_all("", &self.params)?;
        if let Some((m, v)) = &self.optim {
            write_all(OPTIM_M, m)?;
            write_all(OPTIM_V, v)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                field: "magic",
                reason: format!("expected {:?}, found {:?}", String::from_utf8_lossy(MAGIC), String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                field: "version",
                reason: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let body_len = bytes.len().checked_sub(DIGEST_LEN).filter(|&n| n >= r.pos).ok_or_else(|| Error::Checkpoint {
            field: "checksum",
            reason: "file too short to hold the checksum".into(),
        })?;
        if Sha256::digest(&bytes[..body_len])[..] != bytes[body_len..] {
            return Err(Error::Checkpoint {
                field: "checksum",
                reason: "SHA-256 mismatch, file is corrupted or truncated".into(),
            });
        }
        r.bytes = &bytes[..body_len];
        let hlen = r.u32("header_length")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Checkpoint {
            field: "header",
            reason: e.to_string(),
        })?;

        let mut params = Params::new();
        let mut m = Params::new();
        let mut v = Params::new();
        while !r.done() {
            let plen = r.u32("layer_path")? as usize;
            let path = std::str::from_utf8(r.take(plen, "layer_path")?)
                .map_err(|e| Error::Checkpoint {
                    field: "layer_path",
                    reason: e.to_string(),
                })?
                .to_string();
            let rows = r.u32("layer_shape")? as usize;
            let cols = r.u32("layer_shape")? as usize;
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Checkpoint {
                field: "layer_shape",
                reason: format!("`{path}`: {rows}x{cols} overflows"),
            })?;
            let raw = r.take(n, "layer_data").map_err(|_| Error::Checkpoint {
                field: "layer_data",
                reason: format!("`{path}`: truncated, need {n} bytes"),
            })?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(rows, cols, data)?;
            if let Some(p) = path.strip_prefix(OPTIM_M) {
                m.insert(p, t);
            } else if let Some(p) = path.strip_prefix(OPTIM_V) {
                v.insert(p, t);
            } else {
                params.insert(path, t);
            }
        }
        params.check_layout(&header.arch).map_err(|e| Error::Checkpoint {
            field: "layout",
            reason: e.to_string(),
        })?;
        let optim = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            _ => {
                for (name, p) in [("m", &m), ("v", &v)] {
                    p.check_layout(&header.arch).map_err(|e| Error::Checkpoint {
                        field: "optim",
                        reason: format!("{name}: {e}"),
                    })?;
                }
                Some((m, v))
            }
        };
        Ok(Self {
            arch: header.arch,
            codec: header.codec,
            train: header.train,
            sim: header.sim,
            meta: header.meta,
            params,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn push_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Checkpoint {
        field: "length",
        reason: format!("{n} does not fit in u32"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                field,
                reason: format!("truncated at byte {}, need {n} more", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::init_params;
    use crate::training::AdamState;

    fn sample() -> Checkpoint {
        let exp = ExperimentConfig::default();
        let p = init_params::<f64>(&exp.arch, 3).unwrap();
        let mut adam = AdamState::new(&p);
        adam.step = 4;
        Checkpoint::from_training(
            &exp,
            &p,
            Some(&adam),
            CheckpointMeta {
                adam_step: 4,
                ..CheckpointMeta::empty(&exp)
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.adam_state().unwrap().unwrap().step, 4);
    }

    #[test]
    fn default_layer_paths() {
        let c = sample();
        let expected = [
            "fused.0.bias",
            "fused.0.weight",
            "head.0.bias",
            "head.0.weight",
            "head.cls.bias",
            "head.cls.weight",
            "head.reg.bias",
            "head.reg.weight",
            "image.0.bias",
            "image.0.weight",
            "image.1.bias",
            "image.1.weight",
            "radar.0.bias",
            "radar.0.weight",
            "radar.1.bias",
            "radar.1.weight",
        ];
        assert_eq!(c.params.paths(), expected);
        assert_eq!(c.arch.param_paths(), expected);
    }

    #[test]
    fn corruption_is_rejected_with_field() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { field: "magic", .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { field: "version", .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Checkpoint { field: "checksum", .. })));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint { field: "checksum", .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..14]), Err(Error::Checkpoint { field: "checksum", .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Checkpoint { field: "version", .. })));
    }

    /// Structural damage behind a valid checksum is still caught.
    #[test]
    fn resealed_truncation_names_the_field() {
        let bytes = sample().to_bytes().unwrap();
        let reseal = |body: &[u8]| {
            let mut out = body.to_vec();
            out.extend_from_slice(&Sha256::digest(body));
            out
        };
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        let cut = reseal(&body[..body.len() - 3]);
        assert!(matches!(Checkpoint::from_bytes(&cut), Err(Error::Checkpoint { field: "layer_data", .. })));
        let short = reseal(&body[..14]);
        assert!(matches!(Checkpoint::from_bytes(&short), Err(Error::Checkpoint { field: "header_length", .. })));
    }
}
