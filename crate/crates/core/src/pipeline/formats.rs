//! Feature-bag text files, the JSON manifest, and the grouping file.
//!
//! Feature bag:
//! ```text
//! SMB1 <n_groups> <dim>
//! <group_id> <n_tokens>
//! <dim floats>        (n_tokens lines)
//! ...
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BAG_MAGIC: &str = "SMB1";

pub fn format_bag(groups: &[(String, Tensor)]) -> Result<String> {
    let dim = groups.first().map(|(_, t)| t.last_dim()).unwrap_or(0);
    let mut out = format!("{BAG_MAGIC} {} {dim}\n", groups.len());
    for (id, tokens) in groups {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::config(format!("group id {id:?} must be a non-empty word")));
        }
        let (k, d) = match *tokens.shape() {
            [k, d] if d == dim => (k, d),
            _ => return Err(Error::dim("format_bag", tokens.shape(), &[0, dim])),
        };
        writeln!(out, "{id} {k}").unwrap();
        for row in tokens.data().chunks(d.max(1)).take(k) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_bag(path: &Path, groups: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, format_bag(groups)?).map_err(|e| Error::io(path, e))
}

pub fn parse_bag(text: &str, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let err = |line: usize, msg: String| Error::parse(path, format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (n_groups, dim) = match fields.as_slice() {
        [magic, g, d] if *magic == BAG_MAGIC => (
            g.parse::<usize>().map_err(|e| err(ln + 1, e.to_string()))?,
            d.parse::<usize>().map_err(|e| err(ln + 1, e.to_string()))?,
        ),
        _ => return Err(err(ln + 1, format!("expected header \"{BAG_MAGIC} <n_groups> <dim>\""))),
    };
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, "truncated: missing group header".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (id, k) = match fields.as_slice() {
            [id, k] => (
                id.to_string(),
                k.parse::<usize>().map_err(|e| err(ln + 1, e.to_string()))?,
            ),
            _ => return Err(err(ln + 1, "expected \"<group_id> <n_tokens>\"".into())),
        };
        let mut data = Vec::with_capacity(k * dim);
        for _ in 0..k {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("truncated: group {id} has fewer than {k} tokens")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|e| err(ln + 1, format!("{tok:?}: {e}")))?);
            }
            if data.len() - before != dim {
                return Err(err(
                    ln + 1,
                    format!("expected {dim} values, found {}", data.len() - before),
                ));
            }
        }
        groups.push((id, Tensor::new(&[k, dim], data)?));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln + 1, "trailing content after the last group".into()));
    }
    Ok(groups)
}

pub fn read_bag(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bag(&text, path)
}

fn bool_or_int<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u8),
    }
    match Flag::deserialize(d)? {
        Flag::Bool(b) => Ok(b),
        Flag::Int(0) => Ok(false),
        Flag::Int(1) => Ok(true),
        Flag::Int(other) => Err(serde::de::Error::custom(format!(
            "censored must be 0 or 1, got {other}"
        ))),
    }
}

fn as_int<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub histology: PathBuf,
    pub genomics: PathBuf,
    pub time_months: f64,
    #[serde(deserialize_with = "bool_or_int", serialize_with = "as_int")]
    pub censored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

/// Paths are resolved relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: Vec<ManifestPatient>,
    pub grouping: PathBuf,
    /// Finite bin edges `[0, q1, ..., q_{T-1}]`; the last bin is open-ended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
}
