//! `TYCK` checkpoint: magic, `u32` length of a JSON manifest, the manifest,
//! then one `TYT1` tensor per parameter in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TyrppgParams};
use crate::tensor::{read_tensor_from, write_tensor_to};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TYCK";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub seed: u64,
    /// Epoch (1-based) the parameters were taken from; 0 means untrained.
    pub epoch: usize,
    pub tensors: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: TyrppgParams,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            model: self.params.cfg,
            seed: self.seed,
            epoch: self.epoch,
            tensors: self.params.named().into_iter().map(|(n, _)| n).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_vec(&self.manifest())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.named() {
            write_tensor_to(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
        let mut params = TyrppgParams::init(&manifest.model, 0)?;
        let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if expected != manifest.tensors {
            return Err(Error::Format("checkpoint tensor list does not match its model config".into()));
        }
        let mut values = Vec::with_capacity(expected.len());
        for (name, (_, slot)) in expected.iter().zip(params.named()) {
            let t = read_tensor_from(r)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            values.push(t.to_vec());
        }
        params.load_values(&values)?;
        Ok(Checkpoint {
            params,
            seed: manifest.seed,
            epoch: manifest.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_every_value() {
        let params = TyrppgParams::init(&ModelConfig::default(), 9).unwrap();
        let ck = Checkpoint { params, seed: 9, epoch: 4 };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TYCK");
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!((back.seed, back.epoch), (9, 4));
        for ((na, a), (nb, b)) in ck.params.named().iter().zip(back.params.named()) {
            assert_eq!(na, &nb);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_truncation() {
        let params = TyrppgParams::init(&ModelConfig::default(), 1).unwrap();
        let mut bytes = Checkpoint { params, seed: 1, epoch: 0 }.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &b"NOPE"[..]).is_err());
    }
}
