//! Checkpoint file: magic, version, length-prefixed config JSON, tensor count,
//! then `(u32 name length, name, tensor record)` for every tensor, buffers
//! included, in traversal order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_network, Network, NetworkConfig};
use crate::error::{CtmError, Result};
use crate::params::Module;
use crate::rng::Rng;
use crate::tensor::{read_exact, read_u32, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest accepted config or tensor name, in bytes.
const MAX_STRING: u32 = 1 << 24;

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)?;
    if len > MAX_STRING {
        return Err(CtmError::format(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| CtmError::format(format!("{what} is not UTF-8")))
}

impl Network {
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_string(w, &self.config().to_json())?;
        let mut records = Vec::new();
        self.visit("", &mut |name, t, _| records.push((name, t)));
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, t) in records {
            write_string(w, &name)?;
            t.write_to(w)?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by any network.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Network> {
        let (cfg, tensors) = read_parts(r)?;
        let mut net = build_network(&cfg, &mut Rng::new(0))
            .map_err(|e| CtmError::format(format!("checkpoint config is invalid: {e}")))?;
        net.assign(tensors)?;
        Ok(net)
    }

    /// Loads weights into this network. The checkpoint must hold exactly this
    /// network's tensor names and shapes; on error `self` is untouched.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let (_, tensors) = read_parts(&mut BufReader::new(File::open(path)?))?;
        let mut staged = self.clone();
        staged.assign(tensors)?;
        *self = staged;
        Ok(())
    }

    fn assign(&mut self, mut tensors: BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        self.visit_mut("", &mut |name, t, _| match tensors.remove(&name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => bad_shape.push(format!("{name}: {:?} vs {:?}", v.shape(), t.shape())),
            None => missing.push(name),
        });
        if !missing.is_empty() || !tensors.is_empty() || !bad_shape.is_empty() {
            let unexpected: Vec<_> = tensors.keys().cloned().collect();
            return Err(CtmError::ParamMismatch(format!(
                "missing {missing:?}, unexpected {unexpected:?}, shape mismatch {bad_shape:?}"
            )));
        }
        Ok(())
    }
}

fn read_parts<R: Read>(r: &mut R) -> Result<(NetworkConfig, BTreeMap<String, Tensor>)> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CtmError::format("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CtmError::format(format!("unsupported checkpoint version {version}")));
    }
    let json = read_string(r, "checkpoint config")?;
    let cfg = NetworkConfig::from_json(&json).map_err(|e| CtmError::format(format!("checkpoint config: {e}")))?;
    let count = read_u32(r, "tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = read_string(r, "tensor name")?;
        let t = Tensor::read_from(r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CtmError::format(format!("duplicate tensor '{name}' in checkpoint")));
        }
    }
    Ok((cfg, tensors))
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    net.write_checkpoint(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    Network::read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::CtmVariant;
    use crate::layers::Mode;
    use crate::rng::randn;

    fn cfg(plan: Vec<(usize, usize)>) -> NetworkConfig {
        NetworkConfig {
            stage_channels: vec![8, 8],
            stage_depths: vec![1, 1],
            input_spatial: (4, 4),
            num_classes: 2,
            ctm_plan: plan,
            ctm_reduction: 2,
            ctm_variant: CtmVariant::Full,
        }
    }

    #[test]
    fn round_trip_in_memory() {
        let net = build_network(&cfg(vec![(0, 1)]), &mut Rng::new(3)).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = Network::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let x = randn(&[1, 2, 3, 4, 4], &mut Rng::new(1), 1.0).unwrap();
        assert_eq!(back.forward(&x, Mode::Eval).unwrap(), net.forward(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn corrupt_and_truncated() {
        let net = build_network(&cfg(vec![]), &mut Rng::new(3)).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Network::read_checkpoint(&mut bad.as_slice()), Err(CtmError::Format(_))));
        for cut in [4, 12, 40, buf.len() - 1] {
            assert!(matches!(
                Network::read_checkpoint(&mut &buf[..cut]),
                Err(CtmError::Format(_))
            ));
        }
    }

    #[test]
    fn baseline_rejected_by_ctm_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        save_checkpoint(&build_network(&cfg(vec![]), &mut Rng::new(1)).unwrap(), &path).unwrap();
        let mut ctm = build_network(&cfg(vec![(1, 0)]), &mut Rng::new(1)).unwrap();
        let before = ctm.clone();
        assert!(matches!(ctm.load_weights(&path), Err(CtmError::ParamMismatch(_))));
        assert_eq!(ctm, before);
    }
}
