//! Binary checkpoint container: magic, version, `key:value` metadata, named tensor blocks.
//!
//! All integers are little-endian. Each block is `u32` name length, name bytes, `u32` rank,
//! one `u64` per dimension, then the raw values as little-endian floats of the build's width.

use std::collections::BTreeMap;
use std::path::Path;

use super::TrainError;
use crate::model::{DeformerModel, HeadKind, IdentityLayout, ModelConfig};
use crate::numerics::{Float, ParamStore, Tensor};
use crate::transformer::TransformerConfig;

pub const MAGIC: &[u8; 8] = b"DEFORMCK";
pub const VERSION: u32 = 1;
const FLOAT_BYTES: usize = std::mem::size_of::<Float>();

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, TrainError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, TrainError> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| TrainError::Checkpoint(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(&format!("{k}:{v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| TrainError::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| TrainError::Checkpoint(format!("metadata line {line:?} has no ':'")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if let Some(bits) = metadata.get("float_bits") {
            if bits.parse::<usize>().ok() != Some(8 * FLOAT_BYTES) {
                return Err(TrainError::Checkpoint(format!("checkpoint has {bits}-bit floats, build uses {}", 8 * FLOAT_BYTES)));
            }
        }
        let mut blocks = Vec::new();
        while r.pos < bytes.len() {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| TrainError::Checkpoint("block name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| TrainError::Checkpoint(format!("block {name:?} is too large")))?;
            let raw = r.take(n.checked_mul(FLOAT_BYTES).ok_or_else(|| TrainError::Checkpoint("block too large".into()))?)?;
            let data = raw.chunks_exact(FLOAT_BYTES).map(|c| Float::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            blocks.push((name, tensor));
        }
        Ok(Self { metadata, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| TrainError::Io(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Adds every tensor of `store` as a block named `{prefix}{param name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            let t = store.get(id);
            let plain = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent tensor");
            self.blocks.push((format!("{prefix}{}", store.name(id)), plain));
        }
    }

    /// Overwrites every tensor of `store` from the blocks named `{prefix}{param name}`.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), TrainError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.name(id));
            let src = self.block(&name).ok_or_else(|| TrainError::Checkpoint(format!("missing block {name:?}")))?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(TrainError::Checkpoint(format!("block {name:?} has shape {:?}, expected {:?}", src.shape(), dst.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes a model configuration as `model.*` metadata.
pub fn write_model_config(ck: &mut Checkpoint, c: &ModelConfig) {
    ck.set("float_bits", 8 * FLOAT_BYTES);
    match c.layout {
        IdentityLayout::Pixels { height, width } => {
            ck.set("model.layout", "pixels");
            ck.set("model.height", height);
            ck.set("model.width", width);
        }
        IdentityLayout::Columns { count, embedding_dim } => {
            ck.set("model.layout", "columns");
            ck.set("model.columns", count);
            ck.set("model.embedding_dim", embedding_dim);
        }
    }
    match c.head {
        HeadKind::Bernoulli => ck.set("model.head", "bernoulli"),
        HeadKind::Categorical(k) => {
            ck.set("model.head", "categorical");
            ck.set("model.classes", k);
        }
        HeadKind::GaussianMixture(j) => {
            ck.set("model.head", "mixture");
            ck.set("model.components", j);
        }
    }
    let t = c.transformer;
    ck.set("model.d_model", t.d_model);
    ck.set("model.n_heads", t.n_heads);
    ck.set("model.d_ff", t.d_ff);
    ck.set("model.n_layers", t.n_layers);
    ck.set("model.dropout", format!("{:?}", t.dropout_p));
    ck.set("model.mlp_widths", c.mlp_widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
}

pub fn read_model_config(ck: &Checkpoint) -> Result<ModelConfig, TrainError> {
    let layout = match ck.get("model.layout")? {
        "pixels" => IdentityLayout::Pixels {
            height: ck.parse("model.height")?,
            width: ck.parse("model.width")?,
        },
        "columns" => IdentityLayout::Columns {
            count: ck.parse("model.columns")?,
            embedding_dim: ck.parse("model.embedding_dim")?,
        },
        other => return Err(TrainError::Checkpoint(format!("unknown layout {other:?}"))),
    };
    let head = match ck.get("model.head")? {
        "bernoulli" => HeadKind::Bernoulli,
        "categorical" => HeadKind::Categorical(ck.parse("model.classes")?),
        "mixture" => HeadKind::GaussianMixture(ck.parse("model.components")?),
        other => return Err(TrainError::Checkpoint(format!("unknown head {other:?}"))),
    };
    let mlp_widths = ck
        .get("model.mlp_widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| TrainError::Checkpoint(format!("bad MLP width {w:?}"))))
        .collect::<Result<Vec<usize>, _>>()?;
    Ok(ModelConfig {
        layout,
        head,
        transformer: TransformerConfig {
            d_model: ck.parse("model.d_model")?,
            n_heads: ck.parse("model.n_heads")?,
            d_ff: ck.parse("model.d_ff")?,
            n_layers: ck.parse("model.n_layers")?,
            dropout_p: ck.parse("model.dropout")?,
        },
        mlp_widths,
    })
}

/// Checkpoint holding only a model's configuration and parameters.
pub fn model_checkpoint(model: &DeformerModel) -> Checkpoint {
    let mut ck = Checkpoint::default();
    write_model_config(&mut ck, model.config());
    ck.push_store("param/", model.params());
    ck
}

/// Rebuilds a model from the `param/` blocks of any checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<DeformerModel, TrainError> {
    restore_model(ck, "param/")
}

pub(crate) fn restore_model(ck: &Checkpoint, prefix: &str) -> Result<DeformerModel, TrainError> {
    let config = read_model_config(ck)?;
    // Parameters are overwritten below; the RNG only shapes the throwaway initial values.
    let mut model = DeformerModel::new(config, &mut rand::rngs::mock::StepRng::new(0, 1))?;
    ck.fill_store(prefix, model.params_mut())?;
    Ok(model)
}

pub fn save_model(model: &DeformerModel, path: &Path) -> Result<(), TrainError> {
    model_checkpoint(model).save(path)
}

pub fn load_model(path: &Path) -> Result<DeformerModel, TrainError> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
