//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFCK"  version:u32  count:u32
//! count x { name_len:u32 name:utf8 origin:u8 trainable:u8 rank:u32 extents:u32[rank] payload:f64[] }
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::backbone::ModuleGraph;
use crate::error::{Error, Result};
use crate::params::{Origin, Parameter};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFCK";
pub const VERSION: u32 = 1;

/// Which parameters a save writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointScope {
    /// Every parameter in the graph.
    Full,
    /// Only injected (origin = delta) tensors.
    DeltaOnly,
    /// Everything the attached method updates: delta tensors, the head and
    /// any unfrozen pretrained tensors.
    Trainable,
}

impl CheckpointScope {
    fn includes(self, p: &Parameter) -> bool {
        match self {
            CheckpointScope::Full => true,
            CheckpointScope::DeltaOnly => p.origin == Origin::Delta,
            CheckpointScope::Trainable => p.trainable,
        }
    }
}

/// How a load reconciles file entries with the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// The file must name exactly the graph's parameters.
    Exact,
    /// The file must name exactly the graph's trainable parameters, which is
    /// what a [`CheckpointScope::Trainable`] save of the same setup holds.
    Trainable,
    /// The file may cover part of the graph; every entry must still match.
    Subset,
}

/// One decoded checkpoint record.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub origin: Origin,
    pub trainable: bool,
    pub tensor: Tensor,
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.origin.code());
        out.push(e.trainable as u8);
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::CheckpointMismatch(format!("file truncated at byte {}", self.pos))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointMismatch("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CheckpointMismatch("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let origin = Origin::from_code(code).ok_or_else(|| {
            Error::CheckpointMismatch(format!("`{name}`: unknown origin code {code}"))
        })?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > bytes.len() {
            return Err(Error::CheckpointMismatch(format!("`{name}`: payload exceeds file")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::CheckpointMismatch(format!("`{name}`: {e}")))?;
        entries.push(Entry { name, origin, trainable, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointMismatch("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

/// Snapshot the parameters selected by `scope`, in graph order.
pub fn collect(graph: &ModuleGraph, scope: CheckpointScope) -> Vec<Entry> {
    graph
        .params()
        .iter()
        .filter(|p| scope.includes(p))
        .map(|p| Entry {
            name: p.name.clone(),
            origin: p.origin,
            trainable: p.trainable,
            tensor: p.value.clone(),
        })
        .collect()
}

pub fn save_weights(graph: &ModuleGraph, path: &Path, scope: CheckpointScope) -> Result<()> {
    fs::write(path, encode(&collect(graph, scope)))
        .map_err(|e| Error::WriteFailed(format!("{}: {e}", path.display())))
}

/// Copy `entries` into the graph after validating all of them; on error the
/// graph is left untouched. Trainable flags stay as the graph has them.
pub fn apply(graph: &mut ModuleGraph, entries: Vec<Entry>, mode: LoadMode) -> Result<()> {
    let mut seen: HashSet<&str> = HashSet::new();
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::CheckpointMismatch(format!("duplicate entry `{}`", e.name)));
        }
        let p = graph.params().get(&e.name).map_err(|_| {
            Error::CheckpointMismatch(format!("`{}` is not a parameter of this graph", e.name))
        })?;
        if p.value.shape() != e.tensor.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "`{}`: shape {:?} in file, {:?} in graph",
                e.name,
                e.tensor.shape(),
                p.value.shape()
            )));
        }
        if p.origin != e.origin {
            return Err(Error::CheckpointMismatch(format!(
                "`{}`: origin {:?} in file, {:?} in graph",
                e.name, e.origin, p.origin
            )));
        }
    }
    let required = |p: &Parameter| match mode {
        LoadMode::Exact => true,
        LoadMode::Trainable => p.trainable,
        LoadMode::Subset => false,
    };
    if let Some(p) = graph.params().iter().find(|p| required(p) && !seen.contains(p.name.as_str())) {
        return Err(Error::CheckpointMismatch(format!("`{}` missing from file", p.name)));
    }
    if mode == LoadMode::Trainable {
        for e in &entries {
            if !graph.params().get(&e.name)?.trainable {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}` is frozen in this graph but present in the file",
                    e.name
                )));
            }
        }
    }
    drop(seen);
    for e in entries {
        graph.params_mut().get_mut(&e.name)?.value = e.tensor;
    }
    Ok(())
}

pub fn load_weights(graph: &mut ModuleGraph, path: &Path, mode: LoadMode) -> Result<()> {
    let bytes = fs::read(path)?;
    apply(graph, decode(&bytes)?, mode)
}
