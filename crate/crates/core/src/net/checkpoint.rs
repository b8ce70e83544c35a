//! Versioned binary checkpoints: `EMCK` magic, format version, a JSON
//! metadata blob (config, alphabet, phase, epoch, feature stats, training
//! history, tensor shapes), then raw little-endian f64 tensor payloads in
//! `params()` order. Writes go through a temp file plus rename.

use super::{EpochStats, Net, NetConfig, NetError, Phase};
use crate::alphabet::Alphabet;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"EMCK";
const VERSION: u32 = 1;

/// Alphabet snapshot stored inside the metadata blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphabetSnapshot {
    pub base: String,
    pub star: bool,
    pub tags: bool,
}

impl AlphabetSnapshot {
    pub fn of(a: &Alphabet) -> AlphabetSnapshot {
        AlphabetSnapshot {
            base: a.base_chars().into_iter().collect(),
            star: a.star_enabled(),
            tags: a.tag_set_enabled(),
        }
    }

    pub fn build(&self) -> Result<Alphabet, NetError> {
        let base: Vec<char> = self.base.chars().collect();
        Ok(Alphabet::build(&base, self.star, self.tags)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: NetConfig,
    alphabet: AlphabetSnapshot,
    phase: Phase,
    epoch: usize,
    history: Vec<EpochStats>,
    feat_mean: Vec<f64>,
    feat_istd: Vec<f64>,
    tensor_shapes: Vec<(usize, usize)>,
}

/// A net together with the bookkeeping needed to resume or extend it.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub net: Net<F>,
    pub alphabet: Alphabet,
    pub phase: Phase,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<(), NetError> {
    let (feat_mean, feat_istd) = ckpt.net.feature_stats();
    let meta = Meta {
        config: ckpt.net.config().clone(),
        alphabet: AlphabetSnapshot::of(&ckpt.alphabet),
        phase: ckpt.phase,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        feat_mean,
        feat_istd,
        tensor_shapes: ckpt
            .net
            .params()
            .iter()
            .map(|p| (p.nrows(), p.ncols()))
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(std::io::Error::other)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in ckpt.net.params() {
        for v in p.iter() {
            buf.extend_from_slice(&v.to_f64_c().to_le_bytes());
        }
    }
    let tmp = tmp_path(path);
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, NetError> {
    let bad = |msg: String| NetError::BadCheckpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| bad("truncated header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)
        .map_err(|_| bad("truncated metadata".into()))?;
    let meta: Meta =
        serde_json::from_slice(&json).map_err(|e| bad(format!("metadata: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let expected: usize = meta.tensor_shapes.iter().map(|&(r, c)| r * c).sum();
    if payload.len() != expected * 8 {
        return Err(bad(format!(
            "parameter payload holds {} values, shapes need {expected}",
            payload.len() / 8
        )));
    }
    let alphabet = meta.alphabet.build()?;
    let mut net = Net::<F>::init(meta.config.clone())?;
    {
        let params = net.params_mut();
        if params.len() != meta.tensor_shapes.len() {
            return Err(bad(format!(
                "config builds {} tensors, metadata lists {}",
                params.len(),
                meta.tensor_shapes.len()
            )));
        }
        let mut off = 0usize;
        for (p, &(r, c)) in params.into_iter().zip(&meta.tensor_shapes) {
            if p.nrows() != r || p.ncols() != c {
                return Err(bad(format!(
                    "tensor shape ({}, {}) does not match metadata ({r}, {c})",
                    p.nrows(),
                    p.ncols()
                )));
            }
            for v in p.iter_mut() {
                let bytes: [u8; 8] = payload[off..off + 8].try_into().unwrap();
                *v = F::from_f64_c(f64::from_le_bytes(bytes));
                off += 8;
            }
        }
    }
    net.set_feature_stats(meta.feat_mean, meta.feat_istd)?;
    Ok(Checkpoint {
        net,
        alphabet,
        phase: meta.phase,
        epoch: meta.epoch,
        history: meta.history,
    })
}
