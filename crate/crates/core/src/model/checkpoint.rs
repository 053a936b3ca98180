//! Binary checkpoint: `LLVLCKPT`, u32 version, u64 header length, JSON
//! header, then little-endian f32 tensor data. The tokenizer is written as
//! JSON next to the checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, ModelError};
use crate::model::{LlavulModel, LoraConfig, ModelConfig, Stage};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::tokenizer::TokenizerModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LLVLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct ParamEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    rank: usize,
    alpha: f64,
}

/// Model-specific header fields; the tensor table is added by the container.
#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    stages: Vec<Stage>,
    lora: BTreeMap<String, AdapterEntry>,
    tokenizer: String,
}

#[derive(Serialize, Deserialize)]
struct Container<M> {
    #[serde(flatten)]
    meta: M,
    params: BTreeMap<String, ParamEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Path of the tokenizer file that accompanies `checkpoint`.
pub fn tokenizer_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tokenizer.json");
    checkpoint.with_file_name(name)
}

/// Writes the container and the tokenizer JSON next to it.
pub(crate) fn write_container<T: Scalar, M: Serialize>(
    path: &Path,
    meta: M,
    store: &ParamStore<T>,
    tokenizer: &TokenizerModel,
) -> Result<(), CheckpointError> {
    let mut params = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (_, p) in store.iter() {
        params.insert(
            p.name.clone(),
            ParamEntry {
                dtype: "f32".into(),
                shape: p.tensor.shape().to_vec(),
                offset: payload.len() as u64,
                trainable: p.trainable,
            },
        );
        for v in p.tensor.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Container { meta, params }).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(io_err(path))?;
    let tok_path = tokenizer_path(path);
    std::fs::write(&tok_path, tokenizer.to_json()).map_err(io_err(&tok_path))?;
    Ok(())
}

fn take<'b>(bytes: &'b [u8], at: &mut usize, n: usize, what: &str) -> Result<&'b [u8], CheckpointError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| CheckpointError::Truncated(format!("file ends inside the {what}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// A parsed container whose tensors have not been bound to a store yet.
pub(crate) struct RawContainer<M> {
    pub meta: M,
    params: BTreeMap<String, ParamEntry>,
    payload: Vec<u8>,
}

pub(crate) fn read_container<M: DeserializeOwned>(path: &Path) -> Result<RawContainer<M>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut at = 0;
    if take(&bytes, &mut at, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(take(&bytes, &mut at, 8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
    let header: Container<M> = serde_json::from_slice(take(&bytes, &mut at, hlen, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok(RawContainer { meta: header.meta, params: header.params, payload: bytes[at..].to_vec() })
}

impl<M> RawContainer<M> {
    /// Payload offset of a tensor; tensors are stored in parameter order.
    pub fn offset_of(&self, name: &str) -> Option<u64> {
        self.params.get(name).map(|e| e.offset)
    }

    /// Overwrites every tensor of `store`, which must hold exactly the
    /// container's names and shapes.
    pub fn fill<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        if names.len() != self.params.len() {
            return Err(CheckpointError::Header(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                names.len()
            )));
        }
        for name in names {
            let entry = self
                .params
                .get(&name)
                .ok_or_else(|| CheckpointError::Header(format!("missing tensor {name}")))?;
            if entry.dtype != "f32" {
                return Err(CheckpointError::Header(format!("unsupported dtype {} for {name}", entry.dtype)));
            }
            let id = store.id(&name).expect("listed");
            let expected = store.tensor(id).shape().to_vec();
            if entry.shape != expected {
                return Err(CheckpointError::ShapeMismatch { name, found: entry.shape.clone(), expected });
            }
            let n: usize = expected.iter().product();
            let mut off =
                usize::try_from(entry.offset).map_err(|_| CheckpointError::Header("offset overflows".into()))?;
            let raw = take(&self.payload, &mut off, n * 4, "tensor payload")?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            let p = store.get_mut(id);
            p.tensor = Tensor::new(expected, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
            p.trainable = entry.trainable;
        }
        Ok(())
    }
}

pub(crate) fn load_tokenizer_beside(path: &Path, file_name: &str) -> Result<TokenizerModel, ModelError> {
    Ok(TokenizerModel::load(&path.with_file_name(file_name))?)
}

const MODEL_KIND: &str = "llavul";

pub fn save_checkpoint<T: Scalar>(model: &LlavulModel<T>, path: &Path) -> Result<(), ModelError> {
    let meta = ModelMeta {
        kind: MODEL_KIND.into(),
        config: model.config.clone(),
        stages: model.stages().to_vec(),
        lora: model
            .adapters()
            .iter()
            .map(|(t, a)| (t.clone(), AdapterEntry { rank: a.rank, alpha: a.alpha }))
            .collect(),
        tokenizer: tokenizer_path(path).file_name().expect("has file name").to_string_lossy().into_owned(),
    };
    Ok(write_container(path, meta, &model.params, &model.tokenizer)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LlavulModel<T>, ModelError> {
    let raw: RawContainer<ModelMeta> = read_container(path)?;
    if raw.meta.kind != MODEL_KIND {
        return Err(CheckpointError::Header(format!("expected a {MODEL_KIND} checkpoint, found {}", raw.meta.kind)).into());
    }
    let tokenizer = load_tokenizer_beside(path, &raw.meta.tokenizer)?;
    let mut model = LlavulModel::<T>::new(raw.meta.config.clone(), tokenizer)?;
    let mut adapters: Vec<(&String, &AdapterEntry)> = raw.meta.lora.iter().collect();
    adapters.sort_by_key(|(t, _)| raw.offset_of(&format!("{t}.lora_a")));
    for (t, a) in adapters {
        model.lora_attach(std::slice::from_ref(t), LoraConfig { rank: a.rank, alpha: a.alpha })?;
    }
    model.set_stages(raw.meta.stages.clone());
    raw.fill(&mut model.params)?;
    Ok(model)
}
