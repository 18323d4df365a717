//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "RSNN" | version u32 | layer-count u32 | per layer: rows u32, cols u32,
//! rows*cols f64 weights (row-major), rows f64 biases | head-count u32 |
//! per head: len u32, len f64 | veq layer-count u32 (0 = none) | veq layers
//! ```
//!
//! The feature layers all use tanh; the equilibrium network's last layer is
//! linear. A JSON sidecar describes widths, embedding and scales.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use super::state::SharedHeadNet;
use super::veq::VeqNet;
use crate::error::{Error, Result};
use crate::scales::Scales;

pub const MAGIC: &[u8; 4] = b"RSNN";
pub const FORMAT_VERSION: u32 = 1;
pub const EMBEDDING: &str = "t->2t-1; x->(cos 2pi x, sin 2pi x)";

/// A trained state network, plus the equilibrium network when it was learned.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: SharedHeadNet,
    pub veq: Option<VeqNet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub feature_widths: Vec<usize>,
    pub heads: Vec<String>,
    pub veq_widths: Option<Vec<usize>>,
    pub embedding: String,
    pub scales: Scales,
}

impl Checkpoint {
    pub fn meta(&self, scales: Scales) -> CheckpointMeta {
        let mut heads = vec!["rho".to_string()];
        if self.net.has_velocity_head() {
            heads.push("v".to_string());
        }
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            feature_widths: self.net.features().widths().to_vec(),
            heads,
            veq_widths: self.veq.as_ref().map(|v| v.psi().widths().to_vec()),
            embedding: EMBEDDING.to_string(),
            scales,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_mlp(&mut out, self.net.features());
        let heads: Vec<&[f64]> = std::iter::once(self.net.head_rho()).chain(self.net.head_v()).collect();
        put_u32(&mut out, heads.len() as u32);
        for h in heads {
            put_u32(&mut out, h.len() as u32);
            h.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        match &self.veq {
            Some(v) => put_mlp(&mut out, v.psi()),
            None => put_u32(&mut out, 0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let features = r.mlp(Activation::Tanh)?
            .ok_or_else(|| Error::Format("checkpoint has no feature layers".into()))?;
        let n_heads = r.u32()?;
        if !(1..=2).contains(&n_heads) {
            return Err(Error::Format(format!("expected 1 or 2 heads, found {n_heads}")));
        }
        let mut heads = Vec::new();
        for _ in 0..n_heads {
            let len = r.u32()? as usize;
            heads.push(r.f64s(len)?);
        }
        let head_v = if n_heads == 2 { heads.pop() } else { None };
        let head_rho = heads.pop().expect("one head");
        let net = SharedHeadNet::from_parts(features, head_rho, head_v)?;
        let veq = r.mlp(Activation::Identity)?.map(VeqNet::from_psi).transpose()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { net, veq })
    }

    /// Writes the binary file and a `<path>.json` sidecar.
    pub fn save(&self, path: &Path, scales: Scales) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())?;
        crate::io::write_json(&sidecar_path(path), &self.meta(scales))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
        crate::io::read_json(&sidecar_path(path))
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_mlp(out: &mut Vec<u8>, mlp: &Mlp) {
    put_u32(out, mlp.n_layers() as u32);
    for l in 0..mlp.n_layers() {
        let (w, b) = mlp.layer(l);
        put_u32(out, w.nrows() as u32);
        put_u32(out, w.ncols() as u32);
        w.iter().chain(b.iter()).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mlp(&mut self, output: Activation) -> Result<Option<Mlp>> {
        let n_layers = self.u32()? as usize;
        if n_layers == 0 {
            return Ok(None);
        }
        let mut widths = Vec::with_capacity(n_layers + 1);
        let mut params = Vec::new();
        for l in 0..n_layers {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Format(format!("layer {l} has a zero dimension")));
            }
            if l == 0 {
                widths.push(cols);
            } else if widths[l] != cols {
                return Err(Error::Format(format!(
                    "layer {l} expects {cols} inputs but previous layer has {} outputs",
                    widths[l]
                )));
            }
            widths.push(rows);
            params.extend(self.f64s(rows * cols + rows)?);
        }
        Ok(Some(Mlp::from_params(widths, params, output)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::InitScheme;

    #[test]
    fn round_trip_with_and_without_optional_parts() {
        let net = SharedHeadNet::new(&[4, 3], true, 1, InitScheme::FanInUniform);
        let veq = VeqNet::new(&[1, 3, 1], 2, InitScheme::FanInUniform);
        for ck in [
            Checkpoint { net: net.clone(), veq: Some(veq) },
            Checkpoint { net: net.density_only(), veq: None },
        ] {
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], MAGIC);
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let net = SharedHeadNet::new(&[2], false, 1, InitScheme::FanInUniform);
        let bytes = Checkpoint { net: net.clone(), veq: None }.to_bytes();
        // magic, version, layers=1, rows=2, cols=3, 6 weights, 2 biases,
        // heads=1, len=3, 3 values, veq layers=0
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 * 8 + 4 + 4 + 3 * 8 + 4);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        let w0 = net.features().layer(0).0[[0, 0]];
        assert_eq!(&bytes[20..28], &w0.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        let net = SharedHeadNet::new(&[2], false, 1, InitScheme::FanInUniform);
        let bytes = Checkpoint { net, veq: None }.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
