//! Text checkpoints of a [`ParamStore`].
//!
//! ```text
//! catt-checkpoint 1
//! param <name> <rank> <dim>...
//! <one line per row, values at 17 significant digits>
//! ```
//!
//! Each stored parameter appears once, so weights shared between views are
//! written a single time.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "catt-checkpoint";
pub const VERSION: u32 = 1;

/// Formats a value with 17 significant digits (exact f64 round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_string(store: &ParamStore) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n");
    for (_, p) in store.iter() {
        let shape = p.value().shape();
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {} {} {}", p.name(), shape.len(), dims.join(" "));
        let cols = p.value().cols().max(1);
        for row in p.value().data().chunks(cols) {
            let vals: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn parse(text: &str) -> Result<Vec<(String, Tensor)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let bad = |line: usize, msg: String| Error::Parse { line, msg };

    let (ln, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad(ln, format!("missing {MAGIC} header")));
    }
    match parts.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(VERSION) => {}
        other => return Err(bad(ln, format!("unsupported version {other:?}"))),
    }

    let mut out = Vec::new();
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("param") {
            return Err(bad(ln, "expected `param` record".into()));
        }
        let name = parts.next().ok_or_else(|| bad(ln, "missing name".into()))?.to_string();
        let rank: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(ln, "missing rank".into()))?;
        let shape: Vec<usize> = parts
            .map(|v| v.parse().map_err(|_| bad(ln, format!("bad dimension {v:?}"))))
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(bad(ln, format!("rank {rank} but {} dims", shape.len())));
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        while data.len() < total {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| bad(ln, format!("truncated values for {name}")))?;
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| bad(ln, format!("bad value {tok:?}")))?);
            }
            if data.len() > total {
                return Err(bad(ln, format!("too many values for {name}")));
            }
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, to_string(store).as_bytes())
}

/// Overwrites every parameter of `store` from `text`. The set of names and
/// every shape must match exactly.
pub fn load_str_into(store: &mut ParamStore, text: &str) -> Result<()> {
    let entries = parse(text)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, tensor)?;
    }
    Ok(())
}

pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_str_into(store, &text)
}
