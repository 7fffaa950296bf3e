//! Single-file container for named `f64` tensors.
//!
//! Layout: a text header
//!
//! ```text
//! dfreloc-checkpoint
//! version 1
//! kind <kind>
//! config <key> <value>      (any number)
//! tensors <count>
//! end
//! ```
//!
//! followed, per tensor, by a line `<name> <ndim> <dims...>` and the
//! little-endian `f64` values.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const MAGIC: &str = "dfreloc-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Errors unless every expected entry is present with the same value.
    pub fn check_config(&self, expected: &[(String, String)]) -> Result<()> {
        for (key, want) in expected {
            let found = self
                .config
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .unwrap_or_else(|| "<absent>".into());
            if &found != want {
                return Err(Error::CheckpointConfigMismatch {
                    key: key.clone(),
                    found,
                    expected: want.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut header = format!("{MAGIC}\nversion {VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.config {
            assert!(!k.contains(char::is_whitespace), "config key `{k}` has whitespace");
            header.push_str(&format!("config {k} {v}\n"));
        }
        header.push_str(&format!("tensors {}\nend\n", self.tensors.len()));
        out.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            assert!(!name.contains(char::is_whitespace), "tensor name `{name}` has whitespace");
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("{name} {} {}\n", dims.len(), dims.join(" ")).as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of file".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = next_line(&mut r)?;
        if version != format!("version {VERSION}") {
            return Err(bad(format!("unsupported {version}")));
        }
        let kind = next_line(&mut r)?
            .strip_prefix("kind ")
            .ok_or_else(|| bad("missing kind".into()))?
            .to_string();
        let mut config = Vec::new();
        let count: usize = loop {
            let l = next_line(&mut r)?;
            if let Some(rest) = l.strip_prefix("config ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                config.push((k.to_string(), v.to_string()));
            } else if let Some(n) = l.strip_prefix("tensors ") {
                break n.parse().map_err(|e| bad(format!("tensor count: {e}")))?;
            } else {
                return Err(bad(format!("unexpected header line `{l}`")));
            }
        };
        if next_line(&mut r)? != "end" {
            return Err(bad("missing end of header".into()));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let mut parts = l.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("empty tensor header".into()))?.to_string();
            let nums: Vec<usize> = parts
                .map(|p| p.parse().map_err(|e| bad(format!("tensor {name}: {e}"))))
                .collect::<Result<_>>()?;
            let (&ndim, dims) = nums.split_first().ok_or_else(|| bad(format!("tensor {name}: no rank")))?;
            if dims.len() != ndim {
                return Err(bad(format!("tensor {name}: rank {ndim} with {} dims", dims.len())));
            }
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, data)));
        }
        Ok(Checkpoint { kind, config, tensors })
    }
}
