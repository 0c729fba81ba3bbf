//! Checkpoint container: a short text header followed by a little-endian f64
//! blob.
//!
//! ```text
//! saod-checkpoint 1
//! <key> = <value>          (any number of metadata lines)
//! tensor <name> <len>      (one per tensor, in blob order)
//! end
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;

const MAGIC: &str = "saod-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn with_tensor(mut self, name: &str, values: Vec<f64>) -> Self {
        self.tensors.push((name.to_owned(), values));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid(format!("checkpoint: missing or bad key {key}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(['=', '\n']) && !v.contains('\n'));
            header.push_str(&format!("{k} = {v}\n"));
        }
        for (name, values) in &self.tensors {
            header.push_str(&format!("tensor {name} {}\n", values.len()));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for (_, values) in &self.tensors {
            bytes.extend(io::f64s_to_le_bytes(values));
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason.to_owned());
        let end = find_header_end(bytes).ok_or_else(|| bad("missing header terminator"))?;
        let header =
            std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a saod checkpoint"));
        }
        let mut meta = BTreeMap::new();
        let mut layout = Vec::new();
        for line in lines {
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, len) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| bad("bad tensor line"))?;
                let len: usize = len.parse().map_err(|_| bad("bad tensor length"))?;
                layout.push((name.to_owned(), len));
            } else {
                let (k, v) = line.split_once(" = ").ok_or_else(|| bad("bad metadata line"))?;
                meta.insert(k.to_owned(), v.to_owned());
            }
        }
        let values = io::f64s_from_le_bytes(&bytes[end..])
            .ok_or_else(|| bad("blob length is not a multiple of 8"))?;
        let total: usize = layout.iter().map(|(_, n)| n).sum();
        if total != values.len() {
            return Err(bad("blob length disagrees with header"));
        }
        let mut offset = 0;
        let tensors = layout
            .into_iter()
            .map(|(name, n)| {
                let t = values[offset..offset + n].to_vec();
                offset += n;
                (name, t)
            })
            .collect();
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    const TERM: &[u8] = b"\nend\n";
    bytes
        .windows(TERM.len())
        .position(|w| w == TERM)
        .map(|p| p + TERM.len())
}
