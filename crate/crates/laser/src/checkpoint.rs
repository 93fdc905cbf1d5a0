//! Checkpoint persistence: JSON header plus little-endian f64 parameter
//! block, with a content hash so corruption is refused at load time.

use crate::error::{LaserError, Result};
use crate::policy::{Arch, Policy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LSRCKPT1";

/// Checkpoint metadata stored ahead of the parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub version: u64,
    pub run_seed: u64,
    pub c_ref: f64,
    pub config_hash: String,
    pub param_sha256: String,
}

fn theta_bytes(theta: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(theta.len() * 8);
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Hex SHA-256 of the raw little-endian parameter bytes.
pub fn param_sha256(policy: &Policy) -> String {
    let mut hasher = Sha256::new();
    hasher.update(theta_bytes(&policy.theta));
    hex::encode(hasher.finalize())
}

/// Serializes a checkpoint to `path`.
pub fn save(
    path: &Path,
    policy: &Policy,
    run_seed: u64,
    c_ref: f64,
    config_hash: &str,
) -> Result<()> {
    let header = CheckpointHeader {
        arch: policy.arch,
        version: policy.version,
        run_seed,
        c_ref,
        config_hash: config_hash.to_string(),
        param_sha256: param_sha256(policy),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&theta_bytes(&policy.theta))?;
    Ok(())
}

/// Loads a checkpoint, refusing files whose parameter hash mismatches.
pub fn load(path: &Path) -> Result<(Policy, CheckpointHeader)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| LaserError::CheckpointCorrupt("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(LaserError::CheckpointCorrupt("bad magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| LaserError::CheckpointCorrupt("file too short for header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|_| LaserError::CheckpointCorrupt("file too short for header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| LaserError::CheckpointCorrupt(format!("header parse: {e}")))?;
    let n = header.arch.n_params();
    let mut block = vec![0u8; n * 8];
    f.read_exact(&mut block)
        .map_err(|_| LaserError::CheckpointCorrupt("parameter block truncated".into()))?;
    let mut trailing = Vec::new();
    f.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(LaserError::CheckpointCorrupt(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }
    let theta: Vec<f64> = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let policy = Policy {
        arch: header.arch,
        theta,
        version: header.version,
    };
    let actual = param_sha256(&policy);
    if actual != header.param_sha256 {
        return Err(LaserError::CheckpointCorrupt(format!(
            "parameter hash mismatch: header {} vs block {}",
            header.param_sha256, actual
        )));
    }
    Ok((policy, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Arch;

    fn sample_policy() -> Policy {
        let mut p = Policy::init(Arch::default(), 99);
        p.version = 42;
        p
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let p = sample_policy();
        save(&path, &p, 99, -27.5, "deadbeef").unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let (loaded, header) = load(&path).unwrap();
        assert_eq!(loaded.arch, p.arch);
        assert_eq!(loaded.version, 42);
        assert_eq!(header.run_seed, 99);
        assert_eq!(header.c_ref, -27.5);
        assert_eq!(header.config_hash, "deadbeef");
        for (a, b) in loaded.theta.iter().zip(p.theta.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // save(load(file)) reproduces the file bytes exactly
        let path2 = dir.path().join("ckpt2.bin");
        save(&path2, &loaded, header.run_seed, header.c_ref, &header.config_hash).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_block_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &sample_policy(), 1, -27.5, "h").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(LaserError::CheckpointCorrupt(_))
        ));
    }

    #[test]
    fn truncated_file_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &sample_policy(), 1, -27.5, "h").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load(&path),
            Err(LaserError::CheckpointCorrupt(_))
        ));
    }
}
