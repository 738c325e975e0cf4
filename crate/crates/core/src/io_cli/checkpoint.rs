//! Versioned binary checkpoints of the online network and optimizer.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "SIDBQNET"
//! version    u32 LE
//! header_len u32 LE
//! header     JSON (metadata, shapes, optimizer scalars, tensor table)
//! payload    f64 LE values: parameters, then Adam first moments, then
//!            Adam second moments, each in tensor-table order
//! digest     32 bytes  SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io_cli::write_atomic;
use crate::qnet::{Adam, NetConfig, QNetwork};

const MAGIC: &[u8; 8] = b"SIDBQNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub label: String,
    pub env_steps: u64,
    pub train_steps: u64,
    pub episodes: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    network: NetConfig,
    input: [usize; 3],
    n_actions: usize,
    adam: [f64; 4],
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(net: &QNetwork, opt: &Adam, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let params = net.params();
    let header = Header {
        meta: meta.clone(),
        network: net.config.clone(),
        input: [net.input.0, net.input.1, net.input.2],
        n_actions: net.n_actions(),
        adam: [opt.lr, opt.beta1, opt.beta2, opt.eps],
        adam_step: opt.step,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let sections = [
        params.iter().map(|p| p.data.as_slice()).collect::<Vec<_>>(),
        opt.m.iter().map(Vec::as_slice).collect(),
        opt.v.iter().map(Vec::as_slice).collect(),
    ];
    for section in sections {
        for tensor in section {
            for v in tensor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Expected network shape, checked on load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpectedShape {
    pub input: (usize, usize, usize),
    pub n_actions: usize,
}

pub fn decode_checkpoint(bytes: &[u8], expected: Option<ExpectedShape>) -> Result<(QNetwork, Adam, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 + 8 + 32 {
        return Err(bad("file is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("integrity digest mismatch (corrupted or truncated file)"));
    }
    if &body[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_bytes = body.get(16..16 + hlen).ok_or_else(|| bad("header overruns file"))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let input = (header.input[0], header.input[1], header.input[2]);
    if let Some(exp) = expected {
        if exp.input != input || exp.n_actions != header.n_actions {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: checkpoint has input {:?} and {} actions, expected {:?} and {}",
                input, header.n_actions, exp.input, exp.n_actions
            )));
        }
    }
    let mut net = QNetwork::zeros(&header.network, input, header.n_actions)?;
    {
        let params = net.params();
        if params.len() != header.tensors.len()
            || params
                .iter()
                .zip(&header.tensors)
                .any(|(p, t)| p.name != t.name || p.shape != t.shape)
        {
            return Err(bad("tensor table does not match the network layout"));
        }
    }
    let [lr, beta1, beta2, eps] = header.adam;
    let mut opt = Adam::new(
        &net,
        crate::qnet::AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        },
    );
    opt.step = header.adam_step;
    let mut payload = &body[16 + hlen..];
    let total: usize = net.params().iter().map(|p| p.data.len()).sum();
    if payload.len() != 3 * total * 8 {
        return Err(bad("payload size does not match the tensor table"));
    }
    let mut read = |dst: &mut [f64]| {
        for v in dst {
            let (head, rest) = payload.split_at(8);
            *v = f64::from_le_bytes(head.try_into().unwrap());
            payload = rest;
        }
    };
    for p in net.params_mut() {
        read(&mut p.data);
    }
    for m in &mut opt.m {
        read(m);
    }
    for v in &mut opt.v {
        read(v);
    }
    Ok((net, opt, header.meta))
}

pub fn save_checkpoint(path: &Path, net: &QNetwork, opt: &Adam, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, opt, meta)?)
}

pub fn load_checkpoint(path: &Path, expected: Option<ExpectedShape>) -> Result<(QNetwork, Adam, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::AdamConfig;

    fn sample() -> (QNetwork, Adam, CheckpointMeta) {
        let cfg = NetConfig {
            conv_filters: [2, 3, 2],
            kernel: 3,
            dense: [5, 4],
        };
        let net = QNetwork::new(&cfg, (3, 5, 6), 12, 77).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::default());
        opt.step = 9;
        for (k, m) in opt.m.iter_mut().enumerate() {
            for (i, v) in m.iter_mut().enumerate() {
                *v = (k * 31 + i) as f64 * 1e-3;
            }
        }
        let meta = CheckpointMeta {
            label: "t".into(),
            env_steps: 5,
            train_steps: 2,
            episodes: 1,
            seed: 3,
        };
        (net, opt, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, opt, meta) = sample();
        let bytes = encode_checkpoint(&net, &opt, &meta).unwrap();
        let (n2, o2, m2) = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(m2, meta);
        for (a, b) in net.params().iter().zip(n2.params()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(o2, opt);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let (net, opt, meta) = sample();
        let bytes = encode_checkpoint(&net, &opt, &meta).unwrap();
        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 0x10;
        assert!(decode_checkpoint(&bad, None).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 40], None).is_err());
    }

    #[test]
    fn version_and_shape_are_checked() {
        let (net, opt, meta) = sample();
        let mut bytes = encode_checkpoint(&net, &opt, &meta).unwrap();
        let err = decode_checkpoint(
            &bytes,
            Some(ExpectedShape {
                input: (3, 6, 6),
                n_actions: 12,
            }),
        )
        .unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
        bytes.truncate(bytes.len() - 32);
        bytes[8] = 2;
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        let err = decode_checkpoint(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
