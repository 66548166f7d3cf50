//! Checkpoint archive: a JSON header followed by raw little-endian f32
//! parameter blobs keyed by canonical parameter names.
//!
//! Layout: 8-byte magic, u64 LE header length, UTF-8 JSON header, then one
//! f32 LE blob per parameter in header order; when optimizer state is
//! present, first-moment and second-moment blobs follow in the same order.
//! Live parameters are kept on the f32 grid, so save/load round-trips are
//! bit-identical.

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::nn::graph::Mat;
use crate::nn::optim::Adam;
use crate::nn::ParamStore;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NESTCK01";

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    train_config: TrainConfig,
    network_config: NetworkConfig,
    epoch: usize,
    adam_step: u64,
    has_optimizer: bool,
    params: Vec<ParamMeta>,
}

/// Everything needed to resume training or run inference.
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub network_config: NetworkConfig,
    pub epoch: usize,
    pub adam_step: u64,
    pub store: ParamStore,
    pub adam_moments: Option<(Vec<Mat>, Vec<Mat>)>,
}

/// Stable hex digest of the serialized configuration pair.
pub fn config_hash(train: &TrainConfig, net: &NetworkConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(train).expect("config serializes"));
    h.update(serde_json::to_vec(net).expect("config serializes"));
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_blob(out: &mut impl Write, m: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_blob(input: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    let mut buf = vec![0u8; rows * cols * 4];
    input.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Mat::from_shape_vec((rows, cols), vals)
        .map_err(|e| Error::Checkpoint(format!("blob shape: {e}")))
}

/// Write a checkpoint archive.
pub fn save(
    path: &Path,
    train_config: &TrainConfig,
    network_config: &NetworkConfig,
    epoch: usize,
    store: &ParamStore,
    adam: Option<&Adam>,
) -> Result<()> {
    let params: Vec<ParamMeta> = store
        .iter()
        .map(|(name, v)| ParamMeta {
            name: name.to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
        })
        .collect();
    let header = Header {
        format_version: 1,
        config_hash: config_hash(train_config, network_config),
        train_config: train_config.clone(),
        network_config: network_config.clone(),
        epoch,
        adam_step: adam.map(|a| a.step_count).unwrap_or(0),
        has_optimizer: adam.is_some(),
        params,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, v) in store.iter() {
        write_blob(&mut f, v)?;
    }
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        for blob in m.iter().chain(v.iter()) {
            write_blob(&mut f, blob)?;
        }
    }
    Ok(())
}

/// Read a checkpoint archive back.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; header_len];
    f.read_exact(&mut header_buf)?;
    let header: Header = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut store = ParamStore::new();
    for meta in &header.params {
        let blob = read_blob(&mut f, meta.rows, meta.cols)?;
        store.define(&meta.name, blob);
    }
    let adam_moments = if header.has_optimizer {
        let mut m = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            m.push(read_blob(&mut f, meta.rows, meta.cols)?);
        }
        let mut v = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            v.push(read_blob(&mut f, meta.rows, meta.cols)?);
        }
        Some((m, v))
    } else {
        None
    };
    Ok(Checkpoint {
        train_config: header.train_config,
        network_config: header.network_config,
        epoch: header.epoch,
        adam_step: header.adam_step,
        store,
        adam_moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use tempfile::TempDir;

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = TempDir::new().unwrap();
        let train_cfg = TrainConfig::default();
        let mut net_cfg = NetworkConfig::default();
        net_cfg.patch_size = 64;
        net_cfg.knn = 6;
        net_cfg.scale0_dim = 8;
        net_cfg.scale1_dim = 8;
        net_cfg.global_dim = 8;
        net_cfg.local_dim = 8;
        net_cfg.embed_dim = 8;
        net_cfg.state_dim = 4;
        net_cfg.dt_rank = 2;
        let mut store = ParamStore::new();
        Model::init(net_cfg.clone(), &mut store, 5).unwrap();
        store.quantize_f32();
        let adam = Adam::new(&store);

        let p1 = dir.path().join("a.ckpt");
        save(&p1, &train_cfg, &net_cfg, 3, &store, Some(&adam)).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.network_config, net_cfg);
        assert_eq!(loaded.store.len(), store.len());
        for ((n1, v1), (n2, v2)) in store.iter().zip(loaded.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.as_ref(), v2.as_ref(), "parameter {n1} changed");
        }
        // saving the loaded state reproduces the file byte for byte
        let p2 = dir.path().join("b.ckpt");
        let adam2 = {
            let mut a = Adam::new(&loaded.store);
            let (m, v) = loaded.adam_moments.clone().unwrap();
            a.restore(m, v, loaded.adam_step);
            a
        };
        save(&p2, &loaded.train_config, &loaded.network_config, loaded.epoch, &loaded.store, Some(&adam2)).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("junk");
        fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
    }
}
