//! Checkpoint binary format: magic "ATNC", version, config echo, named
//! parameter tensors as little-endian 64-bit floats. Loading reproduces
//! every parameter bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{Model, TrainConfig};

pub const MAGIC: [u8; 4] = *b"ATNC";
pub const VERSION: u32 = 1;

/// A loaded checkpoint: config echo, bookkeeping, and the rebuilt model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub vocab_size: usize,
    pub model: Model,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Write the model under `config` at `epoch` to `path`.
pub fn save(
    path: &Path,
    config: &TrainConfig,
    epoch: usize,
    vocab_size: usize,
    model: &Model,
) -> Result<()> {
    let config_json = serde_json::to_string(config)
        .map_err(|e| format_err(path, format!("config serialization: {e}")))?;
    let params = model.named_params();

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(epoch as u32).to_le_bytes());
    out.extend_from_slice(&config.param_seed.to_le_bytes());
    out.extend_from_slice(&config.shuffle_seed.to_le_bytes());
    out.extend_from_slice(&(vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for value in tensor.values() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    file: fs::File,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.file
            .read_exact(&mut buf)
            .map_err(|_| format_err(self.path, format!("truncated checkpoint: {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, rebuilding the model and overwriting each parameter
/// with the stored values.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { file, path };

    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(path, "bad magic: not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.bytes(config_len, "config")?;
    let config: TrainConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| format_err(path, format!("bad config block: {e}")))?;
    let epoch = r.u32("epoch")? as usize;
    let param_seed = r.u64("param seed")?;
    let shuffle_seed = r.u64("shuffle seed")?;
    if param_seed != config.param_seed || shuffle_seed != config.shuffle_seed {
        return Err(format_err(path, "seed fields disagree with the config echo"));
    }
    let vocab_size = r.u32("vocab size")? as usize;
    let n_tensors = r.u32("tensor count")? as usize;

    let mut model = Model::init(&config, vocab_size)?;
    let mut params = model.named_params_mut();
    if params.len() != n_tensors {
        return Err(format_err(
            path,
            format!(
                "checkpoint holds {n_tensors} tensors but the model has {}",
                params.len()
            ),
        ));
    }
    for (name, tensor) in params.iter_mut() {
        let name_len = r.u32("tensor name length")? as usize;
        let stored_name = String::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        if stored_name != *name {
            return Err(format_err(
                path,
                format!("tensor order mismatch: stored {stored_name:?}, expected {name:?}"),
            ));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor extent")? as usize);
        }
        if shape != tensor.shape() {
            return Err(format_err(
                path,
                format!(
                    "tensor {name}: stored shape {shape:?} does not match model shape {:?}",
                    tensor.shape()
                ),
            ));
        }
        let count = tensor.len();
        let raw = r.bytes(count * 8, &format!("values of {name}"))?;
        for (slot, chunk) in tensor.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    // Anything left over means the writer and reader disagree on the layout.
    let mut probe = [0u8; 1];
    if r.file.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format_err(path, "trailing bytes after the last tensor"));
    }
    drop(params);

    Ok(Checkpoint {
        config,
        epoch,
        vocab_size,
        model,
    })
}
