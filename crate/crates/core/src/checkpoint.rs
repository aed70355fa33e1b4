//! `crossmlp-ckpt-v1` archives: a text manifest followed by raw
//! little-endian tensor data.
//!
//! ```text
//! crossmlp-ckpt-v1
//! dtype f32
//! meta <key> <value>
//! tensor <name> <d0,d1,...>     ("-" for a scalar)
//! data <byte count>
//! <bytes, tensors in manifest order>
//! ```

use crossmlp_autograd::{Scalar, Tensor};

use crate::error::{ModelError, Result};

pub const CHECKPOINT_TAG: &str = "crossmlp-ckpt-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    /// Ordered key/value metadata; values must not contain newlines.
    pub meta: Vec<(String, String)>,
    /// Named tensors in archive order.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Self { meta: Vec::new(), tensors: Vec::new() }
    }
}

fn bad<V>(msg: impl Into<String>) -> Result<V> {
    Err(ModelError::Checkpoint(msg.into()))
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.contains(char::is_whitespace)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `(name, shape)` pairs and the dtype.
    pub fn manifest(&self) -> (Vec<(String, Vec<usize>)>, &'static str) {
        (self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(), T::DTYPE)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{CHECKPOINT_TAG}\ndtype {}\n", T::DTYPE);
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return bad(format!("metadata entry `{k}` cannot be encoded"));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut bytes = 0usize;
        for (name, t) in &self.tensors {
            if !valid_token(name) || !seen.insert(name.as_str()) {
                return bad(format!("tensor name `{name}` is empty, has whitespace, or is duplicated"));
            }
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            head.push_str(&format!("tensor {name} {dims}\n"));
            bytes += t.len() * T::BYTES;
        }
        head.push_str(&format!("data {bytes}\n"));
        let mut out = head.into_bytes();
        out.reserve(bytes);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i);
            let Some(end) = end else { return bad("truncated header") };
            let line = std::str::from_utf8(&bytes[pos..end])
                .map_err(|_| ModelError::Checkpoint("header is not UTF-8".into()))?;
            pos = end + 1;
            Ok(line.to_string())
        };
        if next_line()? != CHECKPOINT_TAG {
            return bad(format!("missing `{CHECKPOINT_TAG}` tag"));
        }
        let dtype = next_line()?;
        if dtype != format!("dtype {}", T::DTYPE) {
            return bad(format!("`{dtype}` does not match the requested {}", T::DTYPE));
        }
        let mut ckpt = Self::new();
        let mut shapes = Vec::new();
        let total = loop {
            let line = next_line()?;
            let (kind, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let Some((name, dims)) = rest.split_once(' ') else {
                        return bad(format!("bad tensor line `{line}`"));
                    };
                    let shape = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| ModelError::Checkpoint(format!("bad shape in `{line}`")))?
                    };
                    shapes.push((name.to_string(), shape));
                }
                "data" => {
                    break rest
                        .parse::<usize>()
                        .map_err(|_| ModelError::Checkpoint(format!("bad data line `{line}`")))?;
                }
                _ => return bad(format!("unexpected header line `{line}`")),
            }
        };
        let body = &bytes[pos..];
        let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>() * T::BYTES).sum();
        if body.len() != total || total != expected {
            return bad(format!("data section has {} bytes, header says {total}, shapes need {expected}", body.len()));
        }
        let mut off = 0;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| T::read_le(&body[off + i * T::BYTES..])).collect();
            off += n * T::BYTES;
            ckpt.tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
