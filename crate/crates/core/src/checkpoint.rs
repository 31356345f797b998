//! Versioned checkpointing: a flat key->tensor binary archive plus a JSON
//! config snapshot, vocabulary, optimizer state, and RNG position, laid out
//! as a directory. A save/load round trip reproduces forward outputs bit
//! exactly (tensors are stored as raw little-endian f64).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};

const ARCHIVE_MAGIC: &[u8; 4] = b"SSTA";
const ARCHIVE_VERSION: u32 = 1;
const CHECKPOINT_VERSION: u32 = 1;

/// Write a flat key->tensor archive.
pub fn write_archive(store: &ParamStore, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(ARCHIVE_MAGIC)?;
    out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, tensor) in store {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&[tensor.ndim() as u8])?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a flat key->tensor archive.
pub fn read_archive(path: &Path) -> Result<ParamStore> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::Checkpoint("truncated tensor archive".into()));
        }
        let slice = &data[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    if take(&mut pos, 4)? != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint("bad archive magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = take(&mut pos, len * 8)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap());
    }
    Ok(store)
}

/// Adam first/second moment accumulators plus the step counter.
#[derive(Clone, Default)]
pub struct AdamState {
    pub first: ParamStore,
    pub second: ParamStore,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: RunConfig,
    num_classes: usize,
    vocab_table: usize,
    epoch: usize,
    adam_step: usize,
    rng_word_pos: u128,
    /// Sorted training identities; index = class label.
    identities: Vec<u32>,
}

/// Everything needed to resume training or run evaluation.
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub rng_word_pos: u128,
    pub identities: Vec<u32>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_archive(&self.model.params, &dir.join("params.tensors"))?;
        let mut optim = ParamStore::new();
        for (k, v) in &self.optimizer.first {
            optim.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.optimizer.second {
            optim.insert(format!("v.{k}"), v.clone());
        }
        write_archive(&optim, &dir.join("optimizer.tensors"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let meta = Meta {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            num_classes: self.model.num_classes,
            vocab_table: self.model.vocab_table,
            epoch: self.epoch,
            adam_step: self.optimizer.step,
            rng_word_pos: self.rng_word_pos,
            identities: self.identities.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                meta.version
            )));
        }
        let params = read_archive(&dir.join("params.tensors"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut model = Model::new(
            meta.config.model.clone(),
            meta.num_classes,
            meta.vocab_table,
            meta.config.train.seed,
        )?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        model.load_pretrained(&params)?;
        let optim_raw = read_archive(&dir.join("optimizer.tensors"))?;
        let mut optimizer = AdamState {
            step: meta.adam_step,
            ..Default::default()
        };
        for (k, v) in optim_raw {
            if let Some(name) = k.strip_prefix("m.") {
                optimizer.first.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("v.") {
                optimizer.second.insert(name.to_string(), v);
            }
        }
        Ok(Checkpoint {
            config: meta.config,
            model,
            optimizer,
            vocab,
            epoch: meta.epoch,
            rng_word_pos: meta.rng_word_pos,
            identities: meta.identities,
        })
    }

    /// Content hash of the parameter archive, for feature-cache keying.
    pub fn params_hash(dir: &Path) -> Result<String> {
        let bytes = std::fs::read(dir.join("params.tensors"))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// Latest-checkpoint path convention inside a training output directory.
pub fn latest_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint-latest")
}
