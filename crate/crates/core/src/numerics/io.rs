//! `FTNS1` tensor files and manifest-indexed parameter directories.
//!
//! A tensor file is the magic line `FTNS1\n`, an ASCII header line
//! `<rank> <d0> <d1> ...\n`, then the row-major little-endian `f32` payload.
//!
//! A parameter directory holds one tensor file per parameter plus
//! `manifest.txt`, one `<name> <file>` line per parameter in store order. A
//! trailing ` frozen` token marks a frozen parameter.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"FTNS1\n";
pub const MANIFEST: &str = "manifest.txt";

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 32 + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    let mut header = t.rank().to_string();
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    out.extend_from_slice(header.as_bytes());
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("missing FTNS1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated FTNS1 header".into()))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::Format("non-ASCII FTNS1 header".into()))?;
    let mut fields = header.split_ascii_whitespace().map(|f| {
        f.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad FTNS1 header field {f:?}")))
    });
    let rank = fields
        .next()
        .ok_or_else(|| Error::Format("empty FTNS1 header".into()))??;
    let shape = fields.collect::<Result<Vec<_>>>()?;
    if shape.len() != rank {
        return Err(Error::Format(format!(
            "FTNS1 rank {rank} but {} dimensions",
            shape.len()
        )));
    }
    let payload = &rest[nl + 1..];
    let n: usize = shape.iter().product();
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "FTNS1 payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.ftns")
}

pub fn save_store(dir: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST);
    let file = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut manifest = BufWriter::new(file);
    for (_, p) in store.iter() {
        let fname = file_name(&p.name);
        write_tensor(&dir.join(&fname), &p.value)?;
        let flag = if p.frozen { " frozen" } else { "" };
        writeln!(manifest, "{} {fname}{flag}", p.name).map_err(|e| Error::io(&mpath, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&mpath, e))
}

pub fn load_store(dir: &Path) -> Result<ParamStore<f32>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut store = ParamStore::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (name, fname, frozen) = match parts.as_slice() {
            [n, f] => (*n, *f, false),
            [n, f, "frozen"] => (*n, *f, true),
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected `<name> <file> [frozen]`",
                    mpath.display(),
                    lineno + 1
                )))
            }
        };
        let id = store.add(name, read_tensor(&dir.join(fname))?)?;
        store.get_mut(id).frozen = frozen;
    }
    Ok(store)
}
