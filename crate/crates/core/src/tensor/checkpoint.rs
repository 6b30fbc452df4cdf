//! Flat binary checkpoint:
//!
//! ```text
//! "COAE1"                          5 bytes
//! repeated until EOF, in name order:
//!   name_len   u32 LE
//!   name       name_len bytes, UTF-8
//!   rank       u32 LE
//!   dims       rank × u64 LE
//!   values     product(dims) × f64 LE (IEEE-754 binary64)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"COAE1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 5];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut params = ParamStore::new();
    loop {
        let mut len = [0u8; 4];
        // Clean EOF is only allowed on a record boundary.
        match r.read(&mut len[..1])? {
            0 => break,
            _ => read_exact_or(&mut r, &mut len[1..], "name length")?,
        }
        let n = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; n];
        read_exact_or(&mut r, &mut name, "name")?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let mut b4 = [0u8; 4];
        read_exact_or(&mut r, &mut b4, "rank")?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            read_exact_or(&mut r, &mut b8, "dims")?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            read_exact_or(&mut r, &mut b8, "values")?;
            data.push(f64::from_le_bytes(b8));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        t.ensure_finite(&name)?;
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter '{name}'")));
        }
        params.insert(name, t);
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
