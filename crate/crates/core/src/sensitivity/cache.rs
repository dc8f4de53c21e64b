//! Text cache of per-batch sensitivity matrices.
//!
//! One file per sensitivity batch, named `batch_NNNNN.sens`:
//!
//! ```text
//! mpq-sensitivity 1
//! layers 3
//! bits 2 4 8
//! layer_sizes 16 32 8
//! sample_count 64
//! same_layer zero
//! entries 45
//! 0 0 1.2345678901234567e-3
//! 0 1 0.0000000000000000e0
//! ...
//! ```
//!
//! Entry records cover the upper triangle (`row <= col`) in row-major order,
//! with values printed to 17 significant digits so they parse back to the
//! identical `f64`. Files from different batches combine with
//! [`merge_batches`](super::merge_batches).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{merge_batches, BitMenu, SameLayerCrossBits, SensitivityMatrix};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FORMAT_TAG: &str = "mpq-sensitivity";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "sens";

pub fn batch_file_name(index: u64) -> String {
    format!("batch_{index:05}.{EXTENSION}")
}

pub fn to_text(g: &SensitivityMatrix) -> String {
    let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
    let n = g.entries().dim();
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_TAG} {FORMAT_VERSION}");
    let _ = writeln!(out, "layers {}", g.num_layers());
    let _ = writeln!(
        out,
        "bits {}",
        join(&mut g.menu().bits().iter().map(u32::to_string))
    );
    let _ = writeln!(
        out,
        "layer_sizes {}",
        join(&mut g.layer_sizes().iter().map(usize::to_string))
    );
    let _ = writeln!(out, "sample_count {}", g.sample_count());
    let _ = writeln!(out, "same_layer {}", g.same_layer().as_str());
    let _ = writeln!(out, "entries {}", n * (n + 1) / 2);
    for r in 0..n {
        for c in r..n {
            let _ = writeln!(out, "{r} {c} {:.16e}", g.entries()[(r, c)]);
        }
    }
    out
}

fn header_field<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    key: &str,
) -> Result<&'a str> {
    let (no, line) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("missing header field {key:?}")))?;
    let rest = line
        .strip_prefix(key)
        .filter(|r| r.is_empty() || r.starts_with(' '))
        .ok_or_else(|| Error::Format(format!("line {}: expected {key:?}", no + 1)))?;
    Ok(rest.trim())
}

fn parse_num<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what}: {tok:?}")))
}

pub fn from_text(text: &str) -> Result<SensitivityMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let magic = header_field(&mut lines, FORMAT_TAG)?;
    if parse_num::<u32>(magic, "format version")? != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported cache version {magic}")));
    }
    let layers: usize = parse_num(header_field(&mut lines, "layers")?, "layer count")?;
    let bits = header_field(&mut lines, "bits")?
        .split_whitespace()
        .map(|t| parse_num::<u32>(t, "bit-width"))
        .collect::<Result<Vec<_>>>()?;
    let menu = BitMenu::new(bits.clone())?;
    if menu.bits() != bits.as_slice() {
        return Err(Error::Format(
            "bit menu must be listed in ascending order".into(),
        ));
    }
    let sizes = header_field(&mut lines, "layer_sizes")?
        .split_whitespace()
        .map(|t| parse_num::<usize>(t, "layer size"))
        .collect::<Result<Vec<_>>>()?;
    if sizes.len() != layers {
        return Err(Error::Format(format!(
            "header declares {layers} layers but lists {} sizes",
            sizes.len()
        )));
    }
    let sample_count: u64 = parse_num(header_field(&mut lines, "sample_count")?, "sample count")?;
    let same_layer = SameLayerCrossBits::parse(header_field(&mut lines, "same_layer")?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let count: usize = parse_num(header_field(&mut lines, "entries")?, "entry count")?;

    let n = layers * menu.len();
    let mut m = Matrix::zeros(n);
    let mut seen = vec![false; n * n];
    let mut read = 0;
    for (no, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Format(format!(
                "line {}: expected `row col value`",
                no + 1
            )));
        }
        let r: usize = parse_num(toks[0], "row")?;
        let c: usize = parse_num(toks[1], "col")?;
        let v: f64 = parse_num(toks[2], "value")?;
        if r > c || c >= n {
            return Err(Error::Format(format!(
                "line {}: entry ({r}, {c}) outside the upper triangle of a {n}x{n} matrix",
                no + 1
            )));
        }
        if std::mem::replace(&mut seen[r * n + c], true) {
            return Err(Error::Format(format!(
                "line {}: duplicate entry ({r}, {c})",
                no + 1
            )));
        }
        m[(r, c)] = v;
        m[(c, r)] = v;
        read += 1;
    }
    if read != count {
        return Err(Error::Format(format!(
            "header declares {count} entries, found {read}"
        )));
    }
    SensitivityMatrix::new(menu, sizes, m, sample_count, same_layer)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_file(path: impl AsRef<Path>, g: &SensitivityMatrix) -> Result<()> {
    fs::write(path, to_text(g))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<SensitivityMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    from_text(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Batch files in `dir`, sorted by name.
pub fn list_batches(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_batch = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("batch_") && n.ends_with(&format!(".{EXTENSION}")));
        if is_batch && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads and merges every batch file in `dir`, in file-name order.
pub fn load_merged(dir: impl AsRef<Path>) -> Result<SensitivityMatrix> {
    let dir = dir.as_ref();
    let files = list_batches(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no sensitivity batches in {}",
            dir.display()
        )));
    }
    let parts = files.iter().map(read_file).collect::<Result<Vec<_>>>()?;
    merge_batches(&parts)
}
