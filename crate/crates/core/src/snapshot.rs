//! Snapshot file format for an unloaded instance.
//!
//! ```text
//! magic "WOPS" | version u16 | instance uuid [16] | module hash [32] | memory pages u32
//! global count u32 | (index u32, tag u8, value [8])*
//! pending count u32 | async id u64*
//! flags u8 (bit 0: lz4) | memory length u64 | memory bytes
//! crc32 u32 over everything before it
//! ```
//! All integers are little-endian. `memory length` is the stored length,
//! which differs from `pages * 65536` only when compressed.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use uuid::Uuid;

pub const MAGIC: [u8; 4] = *b"WOPS";
pub const FORMAT_VERSION: u16 = 1;
pub const PAGE_SIZE: usize = 65536;
const FLAG_LZ4: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalValue {
    I32(i32),
    I64(i64),
    F32(u32),
    F64(u64),
}

impl GlobalValue {
    fn tag(self) -> u8 {
        match self {
            GlobalValue::I32(_) => 0,
            GlobalValue::I64(_) => 1,
            GlobalValue::F32(_) => 2,
            GlobalValue::F64(_) => 3,
        }
    }

    fn bits(self) -> u64 {
        match self {
            GlobalValue::I32(v) => v as u32 as u64,
            GlobalValue::I64(v) => v as u64,
            GlobalValue::F32(v) => u64::from(v),
            GlobalValue::F64(v) => v,
        }
    }

    fn from_parts(tag: u8, bits: u64) -> Option<Self> {
        Some(match tag {
            0 => GlobalValue::I32(bits as u32 as i32),
            1 => GlobalValue::I64(bits as i64),
            2 => GlobalValue::F32(bits as u32),
            3 => GlobalValue::F64(bits),
            _ => return None,
        })
    }
}

/// Everything besides linear memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub instance_id: Uuid,
    pub module_hash: [u8; 32],
    pub memory_pages: u32,
    pub globals: Vec<(u32, GlobalValue)>,
    pub pending: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    pub memory: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

fn corrupt(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Corrupt(msg.into())
}

/// Writes through a crc32 accumulator.
struct CrcWriter<W> {
    inner: W,
    crc: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Serializes a snapshot into `w`. Returns the number of bytes written.
pub fn write_to<W: Write>(w: W, header: &SnapshotHeader, memory: &[u8], compress: bool) -> io::Result<u64> {
    let mut w = CrcWriter { inner: w, crc: crc32fast::Hasher::new(), written: 0 };
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(header.instance_id.as_bytes())?;
    w.write_all(&header.module_hash)?;
    w.write_all(&header.memory_pages.to_le_bytes())?;
    w.write_all(&(header.globals.len() as u32).to_le_bytes())?;
    for (index, value) in &header.globals {
        w.write_all(&index.to_le_bytes())?;
        w.write_all(&[value.tag()])?;
        w.write_all(&value.bits().to_le_bytes())?;
    }
    w.write_all(&(header.pending.len() as u32).to_le_bytes())?;
    for id in &header.pending {
        w.write_all(&id.to_le_bytes())?;
    }
    if compress {
        let packed = lz4_flex::compress_prepend_size(memory);
        w.write_all(&[FLAG_LZ4])?;
        w.write_all(&(packed.len() as u64).to_le_bytes())?;
        w.write_all(&packed)?;
    } else {
        w.write_all(&[0])?;
        w.write_all(&(memory.len() as u64).to_le_bytes())?;
        w.write_all(memory)?;
    }
    let crc = w.crc.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(w.written + 4)
}

pub fn encode(header: &SnapshotHeader, memory: &[u8], compress: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(memory.len() + 128);
    write_to(&mut out, header, memory, compress).expect("writing to a Vec cannot fail");
    out
}

/// Writes to a temporary sibling, fsyncs, then renames over `path`.
pub fn write_file(path: &Path, header: &SnapshotHeader, memory: &[u8], compress: bool) -> io::Result<u64> {
    let tmp = tmp_path(path);
    let result = (|| {
        let file = File::create(&tmp)?;
        let mut buf = BufWriter::with_capacity(1 << 16, file);
        let n = write_to(&mut buf, header, memory, compress)?;
        let file = buf.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        if let Some(dir) = path.parent() {
            File::open(dir)?.sync_all()?;
        }
        Ok(n)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_owned();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated in {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SnapshotError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and verifies a snapshot. Any damage, including a crc mismatch,
/// yields [`SnapshotError::Corrupt`].
pub fn decode(bytes: &[u8]) -> Result<Snapshot, SnapshotError> {
    if bytes.len() < 4 {
        return Err(corrupt("shorter than the crc trailer"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("crc32 mismatch"));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let instance_id = Uuid::from_slice(c.take(16, "instance id")?).unwrap();
    let module_hash: [u8; 32] = c.take(32, "module hash")?.try_into().unwrap();
    let memory_pages = c.u32("memory pages")?;
    let n_globals = c.u32("global count")? as usize;
    let mut globals = Vec::with_capacity(n_globals.min(1 << 16));
    for _ in 0..n_globals {
        let index = c.u32("global index")?;
        let tag = c.u8("global tag")?;
        let bits = c.u64("global value")?;
        let value = GlobalValue::from_parts(tag, bits).ok_or_else(|| corrupt(format!("unknown global tag {tag}")))?;
        globals.push((index, value));
    }
    let n_pending = c.u32("pending count")? as usize;
    let mut pending = Vec::with_capacity(n_pending.min(1 << 16));
    for _ in 0..n_pending {
        pending.push(c.u64("pending id")?);
    }
    let flags = c.u8("flags")?;
    if flags & !FLAG_LZ4 != 0 {
        return Err(corrupt(format!("unknown flags {flags:#x}")));
    }
    let len = usize::try_from(c.u64("memory length")?).map_err(|_| corrupt("memory length overflows"))?;
    let stored = c.take(len, "memory")?;
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes after memory"));
    }
    let memory = if flags & FLAG_LZ4 != 0 {
        lz4_flex::decompress_size_prepended(stored).map_err(|e| corrupt(format!("lz4: {e}")))?
    } else {
        stored.to_vec()
    };
    if memory.len() != memory_pages as usize * PAGE_SIZE {
        return Err(corrupt(format!("memory is {} bytes, header says {memory_pages} pages", memory.len())));
    }
    Ok(Snapshot { header: SnapshotHeader { instance_id, module_hash, memory_pages, globals, pending }, memory })
}

pub fn read_file(path: &Path) -> Result<Snapshot, SnapshotError> {
    decode(&fs::read(path)?)
}
