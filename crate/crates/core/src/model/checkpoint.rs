//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"KPCK"`, `u32` version, `u32` header length, header JSON
//! (`{"config": .., "step": ..}`), `u32` tensor count, then per tensor
//! `u32` name length, name, `u8` dtype, `u32` rank, `u64` dims, row-major
//! data. Optimizer moments are stored as `adam_m/<name>` and `adam_v/<name>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, Init, ModelConfig, ModelError, ModelState, Scalar};

const MAGIC: &[u8; 4] = b"KPCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar>(
    state: &ModelState<T>,
    out: &mut impl Write,
) -> Result<(), ModelError> {
    let mut buf = Vec::with_capacity(3 * state.num_params() * T::BYTES + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: state.config.clone(),
        step: state.step,
    })
    .map_err(|e| bad(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let specs = &state.layout.tensors;
    buf.extend_from_slice(&((3 * specs.len()) as u32).to_le_bytes());
    for (prefix, data) in [
        ("", &state.params),
        ("adam_m/", &state.adam_m),
        ("adam_v/", &state.adam_v),
    ] {
        for spec in specs {
            let name = format!("{prefix}{}", spec.name);
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(T::DTYPE as u8);
            buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
            for &d in &spec.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &data[spec.range()] {
                x.write_le(&mut buf);
            }
        }
    }
    out.write_all(&buf)
        .map_err(|e| bad(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Reads a checkpoint stored in precision `T`.
pub fn read_checkpoint<T: Scalar>(input: &mut impl Read) -> Result<ModelState<T>, ModelError> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    let mut state = ModelState::<T>::new(header.config, Init::Zeros)?;
    state.step = header.step;
    let count = c.u32()? as usize;
    let layout = state.layout.clone();
    if count != 3 * layout.tensors.len() {
        return Err(bad(format!(
            "{count} tensors, expected {}",
            3 * layout.tensors.len()
        )));
    }
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name =
            std::str::from_utf8(c.take(nlen)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dtype = c.take(1)?[0];
        if dtype != T::DTYPE as u8 {
            let found = if dtype == DType::F32 as u8 {
                "f32"
            } else {
                "f64"
            };
            return Err(bad(format!(
                "tensor {name} is {found}, requested another precision"
            )));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let (base, target) = match name.split_once('/') {
            Some(("adam_m", rest)) => (rest, &mut state.adam_m),
            Some(("adam_v", rest)) => (rest, &mut state.adam_v),
            _ => (name, &mut state.params),
        };
        let spec = layout
            .tensor(base)
            .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        if spec.shape != shape {
            return Err(bad(format!(
                "tensor {name}: shape {shape:?}, expected {:?}",
                spec.shape
            )));
        }
        let data = c.take(spec.len() * T::BYTES)?;
        for (dst, chunk) in target[spec.range()]
            .iter_mut()
            .zip(data.chunks_exact(T::BYTES))
        {
            *dst = T::read_le(chunk);
        }
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(state)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<(), ModelError> {
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    write_checkpoint(state, &mut f)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>, ModelError> {
    let mut f = fs::File::open(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&mut f)
}
