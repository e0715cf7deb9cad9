//! `BNNM` checkpoints: magic, u32 version, u64 length + UTF-8 JSON metadata,
//! u32 tensor count, then per tensor a u32 name length, the name, a u8
//! trainable flag and the tensor in `TNSR` encoding. All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Model, ModelSpec, Param, ParamStore};
use crate::bayes::PriorConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNNM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub spec: ModelSpec,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub prior: PriorConfig,
    /// How posterior spreads are stored: `sigma = softplus(rho)`.
    pub rho_parameterization: String,
    /// Whether the training split was rebalanced before fitting.
    #[serde(default)]
    pub resampled: bool,
}

impl CheckpointMeta {
    pub fn new(model: &Model, class_names: Vec<String>, seed: u64) -> Self {
        Self {
            architecture: model.spec.architecture,
            spec: model.spec.clone(),
            class_names,
            seed,
            prior: model.spec.prior,
            rho_parameterization: "softplus".into(),
            resampled: false,
        }
    }
}

impl Model {
    pub fn write_checkpoint(&self, meta: &CheckpointMeta, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_vec(meta)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[p.trainable as u8])?;
            p.value.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<(Model, CheckpointMeta)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        if meta.rho_parameterization != "softplus" {
            return Err(Error::Format(format!(
                "unknown spread parameterization {:?}",
                meta.rho_parameterization
            )));
        }
        let count = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let value = Tensor::read_from(r)?;
            params.insert(
                name,
                Param {
                    value,
                    trainable: flag[0] != 0,
                },
            );
        }
        let model = Model {
            spec: meta.spec.clone(),
            params,
        };
        model.check_params()?;
        Ok((model, meta))
    }

    /// Verify names and shapes against a freshly built model of the same spec.
    fn check_params(&self) -> Result<()> {
        let reference = Model::new(self.spec.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Format("checkpoint tensors do not match the architecture".into()));
        }
        for (name, p) in &reference.params {
            match self.params.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                _ => return Err(Error::Format(format!("checkpoint tensor {name} missing or misshapen"))),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(meta, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::read_checkpoint(&mut BufReader::new(f))
    }
}
