//! The `SYW1` weights format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SYW1" | version u16 | mode u8 | task u8 | scale u8 | width u32
//! | fusion u8 | precision u8 | tensor count u32
//! table, per tensor: name length u16 | ascii name | dtype u8 | rank u8
//!                    | dims u32 x rank | byte offset u64 (from file start)
//! payload: tensors back to back in table order
//! ```
//!
//! Tensors are stored in the model's slot order, buffers included, so a file
//! restores a model exactly.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{FusionKind, Mode, NamedParam, SyeNetConfig, SyeNetModel, Task};
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 4] = b"SYW1";
pub const VERSION: u16 = 1;

/// Model identity recorded in a weights file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub version: u16,
    pub mode: Mode,
    pub task: Task,
    pub width: usize,
    pub fusion: FusionKind,
    pub precision: DType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub offset: u64,
}

impl TableEntry {
    pub fn byte_len(&self) -> u64 {
        self.dims.iter().product::<usize>() as u64 * self.dtype.size_bytes() as u64
    }
}

fn format_err<V>(msg: impl Into<String>) -> Result<V> {
    Err(Error::Format(msg.into()))
}

fn task_from_tag(tag: u8, scale: u8) -> Result<Task> {
    match tag {
        0 => Task::sr(usize::from(scale)),
        1 => Ok(Task::Isp),
        2 => Ok(Task::Lle),
        other => format_err(format!("unknown task tag {other}")),
    }
}

pub fn encode_weights<T: Element>(model: &SyeNetModel<T>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let params = model.named_params();
    let width = u32::try_from(cfg.width).map_err(|_| Error::Format("width does not fit in u32".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.mode().tag());
    out.push(cfg.task.tag());
    out.push(cfg.task.scale() as u8);
    out.extend_from_slice(&width.to_le_bytes());
    out.push(cfg.fusion.tag());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());

    let table_len: usize = params.iter().map(|p| 2 + p.name.len() + 2 + 4 * p.shape.len() + 8).sum();
    let mut offset = (out.len() + table_len) as u64;
    for p in &params {
        if !p.name.is_ascii() || p.name.len() > usize::from(u16::MAX) {
            return format_err(format!("tensor name {:?} is not short ascii", p.name));
        }
        if p.shape.len() > usize::from(u8::MAX) {
            return format_err(format!("tensor {} has too many dimensions", p.name));
        }
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (p.data.len() * T::DTYPE.size_bytes()) as u64;
    }
    for p in &params {
        for &v in &p.data {
            v.write_le(&mut out);
        }
    }
    debug_assert_eq!(out.len() as u64, offset);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!("file truncated at byte {} (needed {n} more)", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Parses and validates the header and tensor table. Offsets must tile the
/// payload exactly: contiguous, in table order, ending at the end of the file.
pub fn read_table(bytes: &[u8]) -> Result<(WeightsHeader, Vec<TableEntry>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::Format("not a weights file".into()))? != MAGIC {
        return format_err("bad magic: not a SYW1 weights file");
    }
    let version = c.u16()?;
    if version != VERSION {
        return format_err(format!("unsupported weights version {version} (expected {VERSION})"));
    }
    let mode = Mode::from_tag(c.u8()?).ok_or_else(|| Error::Format("unknown mode tag".into()))?;
    let task_tag = c.u8()?;
    let scale = c.u8()?;
    let task = task_from_tag(task_tag, scale)?;
    if task.scale() != usize::from(scale) {
        return format_err(format!("scale {scale} is inconsistent with task {}", task.name()));
    }
    let width = c.u32()? as usize;
    let fusion = FusionKind::from_tag(c.u8()?).ok_or_else(|| Error::Format("unknown fusion tag".into()))?;
    let precision = DType::from_tag(c.u8()?).ok_or_else(|| Error::Format("unknown precision tag".into()))?;
    let count = c.u32()? as usize;
    let header = WeightsHeader { version, mode, task, width, fusion, precision };

    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = usize::from(c.u16()?);
        let name = std::str::from_utf8(c.take(len)?)
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| Error::Format("tensor name is not ascii".into()))?
            .to_string();
        let dtype = DType::from_tag(c.u8()?).ok_or_else(|| Error::Format(format!("tensor {name}: unknown dtype")))?;
        if dtype != precision {
            return format_err(format!("tensor {name} is {} in a {} file", dtype.name(), precision.name()));
        }
        let rank = usize::from(c.u8()?);
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()?;
        table.push(TableEntry { name, dtype, dims, offset });
    }
    let mut expected = c.pos as u64;
    for e in &table {
        if e.offset != expected {
            return format_err(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset));
        }
        expected += e.byte_len();
    }
    let len = bytes.len() as u64;
    if len < expected {
        return format_err(format!("payload truncated: {len} bytes, table needs {expected}"));
    }
    if len > expected {
        return format_err(format!("{} trailing bytes after payload", len - expected));
    }
    Ok((header, table))
}

/// Checks the file's identity against `config` and element type `T`.
fn check_header<T: Element>(h: &WeightsHeader, config: &SyeNetConfig) -> Result<()> {
    if h.task != config.task || h.width != config.width || h.fusion != config.fusion {
        return format_err(format!(
            "weights are for {} x{} width {} {}, config is {} x{} width {} {}",
            h.task.name(),
            h.task.scale(),
            h.width,
            h.fusion,
            config.task.name(),
            config.task.scale(),
            config.width,
            config.fusion
        ));
    }
    if h.precision != T::DTYPE {
        return format_err(format!("weights are {}, requested {}", h.precision.name(), T::DTYPE.name()));
    }
    Ok(())
}

/// Builds a model of `config` from file bytes. Nothing is returned unless
/// every tensor matches by name and shape.
pub fn decode_weights<T: Element>(bytes: &[u8], config: &SyeNetConfig) -> Result<SyeNetModel<T>> {
    let (header, table) = read_table(bytes)?;
    check_header::<T>(&header, config)?;
    // The random draw is overwritten; only the structure matters.
    let mut model = SyeNetModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if header.mode == Mode::Folded {
        model = model.fold()?;
    }
    let kinds: Vec<_> = model.named_params().into_iter().map(|p| p.kind).collect();
    if kinds.len() != table.len() {
        return format_err(format!("model has {} tensors, file has {}", kinds.len(), table.len()));
    }
    let size = T::DTYPE.size_bytes();
    let params: Vec<NamedParam<T>> = table
        .into_iter()
        .zip(kinds)
        .map(|(e, kind)| {
            let start = e.offset as usize;
            let blob = &bytes[start..start + e.byte_len() as usize];
            let data = blob.chunks_exact(size).map(T::read_le).collect();
            NamedParam { name: e.name, kind, shape: e.dims, data }
        })
        .collect();
    model.load_params(&params)?;
    Ok(model)
}

pub fn save_weights<T: Element>(path: impl AsRef<Path>, model: &SyeNetModel<T>) -> Result<()> {
    fs::write(path, encode_weights(model)?)?;
    Ok(())
}

pub fn load_weights<T: Element>(path: impl AsRef<Path>, config: &SyeNetConfig) -> Result<SyeNetModel<T>> {
    decode_weights(&fs::read(path)?, config)
}
