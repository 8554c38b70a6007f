//! Binary network checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u64 metadata length, JSON
//! metadata, then the parameters as little-endian f64. The metadata carries
//! the full network config plus a hash of the derived architecture (layer
//! spec and parameter layout), so a checkpoint can never be loaded into a
//! network it was not trained for.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::nn::{ParamSlot, UNet};
use crate::regnet::{build_regnet, RegNet, RegNetConfig};
use crate::segnet::{build_segnet, SegNet, SegNetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SEMIRGCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Registration,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regnet: Option<RegNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segnet: Option<SegNetConfig>,
    /// Image shape for registration, patch shape for segmentation.
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_labels: Option<usize>,
    architecture_hash: String,
    slots: Vec<ParamSlot>,
    num_params: usize,
    params_sha256: String,
}

/// A decoded checkpoint before it is turned into a network.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    meta: Meta,
    params: Vec<f64>,
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        self.meta.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn architecture_hash(&self) -> &str {
        &self.meta.architecture_hash
    }

    pub fn regnet_config(&self) -> Option<&RegNetConfig> {
        self.meta.regnet.as_ref()
    }

    pub fn segnet_config(&self) -> Option<&SegNetConfig> {
        self.meta.segnet.as_ref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.meta.shape
    }

    pub fn num_labels(&self) -> Option<usize> {
        self.meta.num_labels
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn params_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

/// Hash of everything that determines the parameter layout.
fn architecture_hash(net: &UNet) -> String {
    let text = serde_json::to_string(&(net.spec(), net.slots())).expect("spec serializes");
    sha256_hex(text.as_bytes())
}

fn encode(meta: &Meta, params: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&params_bytes(params));
    out
}

fn meta_for(net: &UNet, kind: CheckpointKind, shape: Vec<usize>) -> Meta {
    Meta {
        kind,
        regnet: None,
        segnet: None,
        shape,
        num_labels: None,
        architecture_hash: architecture_hash(net),
        slots: net.slots().to_vec(),
        num_params: net.num_params(),
        params_sha256: sha256_hex(&params_bytes(net.params())),
    }
}

pub fn write_regnet(net: &RegNet, path: &Path) -> Result<()> {
    let mut meta = meta_for(net.network(), CheckpointKind::Registration, net.shape().to_vec());
    meta.regnet = Some(net.config().clone());
    write_atomic(path, &encode(&meta, net.params()))
}

pub fn write_segnet(net: &SegNet, path: &Path) -> Result<()> {
    let mut meta = meta_for(
        net.network(),
        CheckpointKind::Segmentation,
        net.config().patch_size.clone(),
    );
    meta.segnet = Some(net.config().clone());
    meta.num_labels = Some(net.num_labels());
    write_atomic(path, &encode(&meta, net.params()))
}

/// Decode and integrity-check a checkpoint without building a network.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let b = read_bytes(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if b.len() < 20 || &b[..8] != MAGIC {
        return Err(bad("not a semireg checkpoint".into()));
    }
    let version = u32::from_le_bytes(b[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|&e| e <= b.len())
        .ok_or_else(|| bad(format!("metadata length {meta_len} exceeds file size")))?;
    let meta: Meta =
        serde_json::from_slice(&b[20..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;
    let body = &b[meta_end..];
    if body.len() != 8 * meta.num_params {
        return Err(bad(format!(
            "expected {} parameters, file holds {} bytes of data",
            meta.num_params,
            body.len()
        )));
    }
    if sha256_hex(body) != meta.params_sha256 {
        return Err(bad("parameter checksum mismatch".into()));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint { meta, params })
}

fn ensure_kind(ck: &Checkpoint, kind: CheckpointKind, path: &Path) -> Result<()> {
    if ck.meta.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("checkpoint holds a {:?} network, expected {:?}", ck.meta.kind, kind),
        });
    }
    Ok(())
}

fn ensure_arch(found: &str, expected: String) -> Result<()> {
    if found != expected {
        return Err(Error::ArchitectureMismatch {
            found: found.to_string(),
            expected,
        });
    }
    Ok(())
}

/// Load a registration network. With `expected`, the stored architecture
/// must match the one `expected` would build.
pub fn read_regnet(path: &Path, expected: Option<(&RegNetConfig, &[usize])>) -> Result<RegNet> {
    let ck = read_checkpoint(path)?;
    ensure_kind(&ck, CheckpointKind::Registration, path)?;
    let cfg = ck.meta.regnet.clone().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "registration checkpoint without network config".into(),
    })?;
    let (cfg, shape) = match expected {
        Some((c, s)) => (c.clone(), s.to_vec()),
        None => (cfg, ck.meta.shape.clone()),
    };
    let template = build_regnet(&cfg, &shape, &mut ChaCha8Rng::seed_from_u64(0))?;
    ensure_arch(&ck.meta.architecture_hash, architecture_hash(template.network()))?;
    RegNet::from_params(&cfg, &shape, ck.params)
}

/// Load a segmentation network, optionally checking it against an expected config.
pub fn read_segnet(path: &Path, expected: Option<(&SegNetConfig, usize)>) -> Result<SegNet> {
    let ck = read_checkpoint(path)?;
    ensure_kind(&ck, CheckpointKind::Segmentation, path)?;
    let stored = ck.meta.segnet.clone().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "segmentation checkpoint without network config".into(),
    })?;
    let stored_l = ck.meta.num_labels.unwrap_or(0);
    let (cfg, l) = match expected {
        Some((c, l)) => (c.clone(), l),
        None => (stored, stored_l),
    };
    let template = build_segnet(&cfg, l, &mut ChaCha8Rng::seed_from_u64(0))?;
    ensure_arch(&ck.meta.architecture_hash, architecture_hash(template.network()))?;
    SegNet::from_params(&cfg, l, ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RegNetConfig {
        RegNetConfig {
            enc_filters: vec![4, 4],
            dec_filters: vec![4, 4, 4],
            levels: 2,
            ..RegNetConfig::default()
        }
    }

    #[test]
    fn regnet_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        let mut net = build_regnet(&small_cfg(), &[8, 8], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        net.scale_output_layer(1e4);
        write_regnet(&net, &p).unwrap();
        let back = read_regnet(&p, None).unwrap();
        assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.config(), net.config());
        assert_eq!(back.shape(), net.shape());
        let same = read_regnet(&p, Some((&small_cfg(), &[8, 8]))).unwrap();
        assert_eq!(same.params(), net.params());
    }

    #[test]
    fn segnet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        let cfg = SegNetConfig {
            network: small_cfg(),
            patch_size: vec![8, 8],
            patch_stride: None,
        };
        let net = build_segnet(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        write_segnet(&net, &p).unwrap();
        let back = read_segnet(&p, None).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.num_labels(), 3);
        assert!(matches!(read_regnet(&p, None), Err(Error::Format { .. })));
        assert!(matches!(
            read_segnet(&p, Some((&cfg, 4))),
            Err(Error::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        let net = build_regnet(&small_cfg(), &[8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        write_regnet(&net, &p).unwrap();
        let mut b = std::fs::read(&p).unwrap();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&p, &b).unwrap();
        let err = read_regnet(&p, None).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        let net = build_regnet(&small_cfg(), &[8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        write_regnet(&net, &p).unwrap();
        let other = RegNetConfig {
            dec_filters: vec![4, 4, 8],
            ..small_cfg()
        };
        assert!(matches!(
            read_regnet(&p, Some((&other, &[8, 8]))),
            Err(Error::ArchitectureMismatch { .. })
        ));
        // a 3D model on a 2D checkpoint differs in kernel shapes
        assert!(matches!(
            read_regnet(&p, Some((&small_cfg(), &[8, 8, 8]))),
            Err(Error::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn corrupted_parameters_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        let net = build_regnet(&small_cfg(), &[8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        write_regnet(&net, &p).unwrap();
        let mut b = std::fs::read(&p).unwrap();
        let n = b.len();
        b[n - 3] ^= 0x40;
        std::fs::write(&p, &b).unwrap();
        assert!(read_checkpoint(&p).unwrap_err().to_string().contains("checksum"));
        std::fs::write(&p, &b[..n - 8]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format { .. })));
    }
}
