//! Binary checkpoints: magic, u64 LE header length, JSON header, raw LE f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetParams, Topology};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FTDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub topology: Topology,
    pub n_params: usize,
    /// Free-form tag (architecture, step, ...).
    #[serde(default)]
    pub tag: String,
}

pub fn write_checkpoint<W: Write>(params: &NetParams, tag: &str, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        topology: params.topology().clone(),
        n_params: params.n_params(),
        tag: tag.to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(params.n_params() * 8);
    for v in params.flat() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(NetParams, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format_version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.n_params * 8 {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), header.n_params * 8)));
    }
    let flat = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params = NetParams::from_flat(header.topology.clone(), flat)?;
    Ok((params, header))
}

pub fn save_checkpoint(params: &NetParams, tag: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, tag, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetParams, CheckpointHeader)> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::net::NetConfig;

    #[test]
    fn bit_exact_round_trip() {
        let mut net = NetConfig::new(7, 1).build(42).unwrap();
        net.flat_mut()[0] = f64::MIN_POSITIVE / 3.0; // subnormal
        net.flat_mut()[1] = -0.0;
        let mut buf = Vec::new();
        write_checkpoint(&net, "mlp", &mut buf).unwrap();
        let (back, header) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(header.tag, "mlp");
        let bits = |p: &NetParams| p.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));
        assert_eq!(back.topology(), net.topology());
    }

    #[test]
    fn rejects_truncated_payload() {
        let net = NetConfig::new(2, 1).build(0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, "", &mut buf).unwrap();
        buf.pop();
        assert!(read_checkpoint(buf.as_slice()).is_err());
        assert!(read_checkpoint(&b"garbage!"[..]).is_err());
    }
}
