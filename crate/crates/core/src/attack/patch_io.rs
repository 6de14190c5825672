//! Binary patch format and its JSON sidecar.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "LVPN" | version u16 | s u32 | c u32 | domain u8 | f32 values
//! ```
//!
//! Values are row-major `[s, s, c]`. Domain tag: 0 network, 1 image.
//! Round-trips are bit-exact. Generation metadata (target class, seed,
//! iterations, convergence) travels in a JSON sidecar next to the patch.

use crate::attack::{NoiseDomain, Patch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

pub const PATCH_MAGIC: &[u8; 4] = b"LVPN";
pub const PATCH_VERSION: u16 = 1;

/// Metadata recorded alongside a trained patch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchSidecar {
    pub target_class: usize,
    pub domain: NoiseDomain,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn patch_to_bytes(patch: &Patch<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&PATCH_VERSION.to_le_bytes());
    out.extend_from_slice(&(patch.size() as u32).to_le_bytes());
    out.extend_from_slice(&(patch.values().shape()[2] as u32).to_le_bytes());
    out.push(match patch.domain() {
        NoiseDomain::Network => 0,
        NoiseDomain::Image => 1,
    });
    for v in patch.values().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn patch_from_bytes(bytes: &[u8]) -> Result<Patch<f32>> {
    let header = 4 + 2 + 4 + 4 + 1;
    if bytes.len() < header {
        return Err(Error::bad_file("<patch>", "truncated header"));
    }
    if &bytes[0..4] != PATCH_MAGIC {
        return Err(Error::bad_file("<patch>", format!("bad magic {:?}, want \"LVPN\"", &bytes[0..4])));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != PATCH_VERSION {
        return Err(Error::bad_file("<patch>", format!("unsupported version {version}")));
    }
    let s = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let domain = match bytes[14] {
        0 => NoiseDomain::Network,
        1 => NoiseDomain::Image,
        other => return Err(Error::bad_file("<patch>", format!("unknown domain tag {other}"))),
    };
    let n = s * s * c;
    let want = header + 4 * n;
    if bytes.len() != want {
        return Err(Error::bad_file(
            "<patch>",
            format!("expected {want} bytes for a {s}x{s}x{c} patch, got {}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Patch::new(Tensor::from_vec(&[s, s, c], data)?, domain)
}

pub fn save_patch(patch: &Patch<f32>, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&patch_to_bytes(patch)).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

pub fn load_patch(path: &Path) -> Result<Patch<f32>> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    patch_from_bytes(&bytes).map_err(|e| match e {
        Error::BadFile { message, .. } => Error::bad_file(&display, message),
        other => other,
    })
}

/// Sidecar path convention: `<patch>.json`.
pub fn sidecar_path(patch_path: &Path) -> std::path::PathBuf {
    let mut os = patch_path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

pub fn save_sidecar(sidecar: &PatchSidecar, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::bad_file(&display, e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(&display, e))
}

pub fn load_sidecar(path: &Path) -> Result<PatchSidecar> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::bad_file(&display, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{init_patch, PatchInit};

    #[test]
    fn round_trip_bit_exact() {
        let patch = init_patch::<f32>(NoiseDomain::Image, 5, 77, PatchInit::Uniform).unwrap();
        let bytes = patch_to_bytes(&patch);
        let back = patch_from_bytes(&bytes).unwrap();
        assert_eq!(patch.values().data(), back.values().data());
        assert_eq!(patch.domain(), back.domain());
    }

    #[test]
    fn corrupt_and_truncated_rejected() {
        let patch = init_patch::<f32>(NoiseDomain::Network, 4, 1, PatchInit::Uniform).unwrap();
        let bytes = patch_to_bytes(&patch);
        assert!(patch_from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(patch_from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(patch_from_bytes(&long).is_err());
    }

    #[test]
    fn image_domain_file_with_out_of_range_values_rejected() {
        let patch = init_patch::<f32>(NoiseDomain::Image, 3, 1, PatchInit::Uniform).unwrap();
        let mut bytes = patch_to_bytes(&patch);
        let header = 15;
        bytes[header..header + 4].copy_from_slice(&2.5f32.to_le_bytes());
        assert!(patch_from_bytes(&bytes).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patch.lvpn.json");
        let sc = PatchSidecar {
            target_class: 3,
            domain: NoiseDomain::Network,
            seed: 42,
            iterations: 123,
            converged: true,
        };
        save_sidecar(&sc, &p).unwrap();
        assert_eq!(load_sidecar(&p).unwrap(), sc);
    }
}
