//! Checkpoint serialization.
//!
//! Binary layout: magic `PSTM`, format version u32 LE, entry count u32 LE;
//! per entry a u32 name length + UTF-8 name, u32 rank, u32 dims, then the
//! values as IEEE-754 binary32 LE, row-major. Optimizer moments ride along
//! under `optim.m.` / `optim.v.` prefixes so runs can resume exactly. A JSON
//! sidecar (`<file>.json`) stores the model configuration and run metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::masking::MaskConfig;
use crate::model::{ModelConfig, ParameterStore, Stage};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"PSTM";
pub const CKPT_VERSION: u32 = 1;

/// Run metadata stored next to the binary arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub stage: Stage,
    /// Last completed epoch.
    pub epoch: usize,
    pub mask: Option<MaskConfig>,
    pub seed: u64,
    pub stride: usize,
    pub optimizer_steps: u64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

fn push_entry(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes parameters (and optimizer moments, when given) plus the sidecar.
pub fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    optimizer: Option<&Adam>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let optim_entries = optimizer.map(|a| a.state());
    let count = store.len() + optim_entries.map_or(0, |(m, _)| 2 * m.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        push_entry(&mut buf, name, tensor);
    }
    if let Some((m, v)) = optim_entries {
        for ((name, _), tensor) in store.iter().zip(m) {
            push_entry(&mut buf, &format!("optim.m.{name}"), tensor);
        }
        for ((name, _), tensor) in store.iter().zip(v) {
            push_entry(&mut buf, &format!("optim.v.{name}"), tensor);
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Everything a checkpoint holds.
pub struct Checkpoint {
    pub store: ParameterStore,
    pub meta: CheckpointMeta,
    /// `(m, v)` moment buffers aligned with store order, when present.
    pub optimizer: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.bytes.len(),
            Format,
            "{}: truncated checkpoint",
            self.path.display()
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint and verifies the arrays against a store freshly built
/// from the sidecar's configuration (same names, same shapes, same order).
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let meta_text = fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", sidecar_path(path).display()),
        ))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    meta.config.validate()?;

    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?
        .read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    ensure!(
        cur.take(4)? == CKPT_MAGIC,
        Format,
        "{}: bad magic",
        path.display()
    );
    let version = cur.u32()?;
    ensure!(
        version == CKPT_VERSION,
        Format,
        "{}: unknown checkpoint version {version}",
        path.display()
    );
    let count = cur.u32()? as usize;

    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: non-UTF-8 entry name", path.display())))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    ensure!(
        cur.pos == bytes.len(),
        Format,
        "{}: trailing bytes",
        path.display()
    );

    let reference = match meta.stage {
        Stage::Pretrain => ParameterStore::new_stage1(&meta.config, 0)?,
        Stage::Finetune => ParameterStore::new_stage2(&meta.config, 0)?,
    };
    let mut store = ParameterStore::empty(meta.stage);
    let mut iter = entries.iter();
    for (expected_name, expected) in reference.iter() {
        let (name, tensor) = iter.next().ok_or_else(|| {
            Error::Format(format!(
                "{}: missing parameter {expected_name}",
                path.display()
            ))
        })?;
        ensure!(
            name == expected_name,
            Format,
            "{}: expected parameter {expected_name}, found {name}",
            path.display()
        );
        ensure!(
            tensor.shape() == expected.shape(),
            Shape,
            "{}: parameter {name} has shape {:?}, config implies {:?}",
            path.display(),
            tensor.shape(),
            expected.shape()
        );
        store.insert_raw(name.clone(), tensor.clone());
    }
    let rest: Vec<_> = iter.collect();
    let optimizer = if rest.is_empty() {
        None
    } else {
        ensure!(
            rest.len() == 2 * store.len(),
            Format,
            "{}: unexpected optimizer entry count {}",
            path.display(),
            rest.len()
        );
        let (m_entries, v_entries) = rest.split_at(store.len());
        let param_names: Vec<String> = store.names().map(String::from).collect();
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for ((name, tensor), pname) in m_entries.iter().zip(&param_names) {
            ensure!(
                name == &format!("optim.m.{pname}"),
                Format,
                "{}: unexpected optimizer entry {name}",
                path.display()
            );
            m.push(tensor.clone());
        }
        for ((name, tensor), pname) in v_entries.iter().zip(&param_names) {
            ensure!(
                name == &format!("optim.v.{pname}"),
                Format,
                "{}: unexpected optimizer entry {name}",
                path.display()
            );
            v.push(tensor.clone());
        }
        Some((m, v))
    };
    Ok(Checkpoint {
        store,
        meta,
        optimizer,
    })
}
