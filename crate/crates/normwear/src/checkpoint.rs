//! Checkpoint file format: a text header (metadata plus tensor manifest)
//! followed by raw little-endian f32 payloads in manifest order.
//!
//! ```text
//! NORMWEAR-CKPT v1
//! meta <key> <value...>
//! tensor <name> <rows> <cols> <trainable 0|1>
//! END
//! <f32 payloads>
//! ```

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &str = "NORMWEAR-CKPT v1";

#[derive(Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor<f32>, bool)>,
}

impl Checkpoint {
    pub fn add_param_set(&mut self, prefix: &str, set: &ParamSet<f32>) {
        for (i, name) in set.names().iter().enumerate() {
            self.entries.push((
                format!("{prefix}{name}"),
                set.tensor(i).as_ref().clone(),
                set.is_trainable(i),
            ));
        }
    }

    /// Extract the tensors under `prefix` (stripped) as a ParamSet,
    /// preserving file order.
    pub fn param_set(&self, prefix: &str) -> ParamSet<f32> {
        ParamSet::from_named(
            self.entries
                .iter()
                .filter(|(n, _, _)| n.starts_with(prefix))
                .map(|(n, t, tr)| (n[prefix.len()..].to_string(), t.clone(), *tr))
                .collect(),
        )
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key '{key}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        writeln!(w, "{MAGIC}").map_err(io_err)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}").map_err(io_err)?;
        }
        for (name, t, trainable) in &self.entries {
            writeln!(
                w,
                "tensor {name} {} {} {}",
                t.rows,
                t.cols,
                u8::from(*trainable)
            )
            .map_err(io_err)?;
        }
        writeln!(w, "END").map_err(io_err)?;
        for (_, t, _) in &self.entries {
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for &v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

        // The header is UTF-8 up to the END line; locate it bytewise.
        let end_marker = b"\nEND\n";
        let end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("missing END marker".into()))?;
        let header =
            std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut payload = &bytes[end + end_marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("bad magic".into()));
        }
        let mut ckpt = Checkpoint::default();
        let mut manifest: Vec<(String, usize, usize, bool)> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed meta line '{line}'")))?;
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(bad(format!("malformed tensor line '{line}'")));
                }
                let rows: usize = parts[1].parse().map_err(|_| bad("bad rows".into()))?;
                let cols: usize = parts[2].parse().map_err(|_| bad("bad cols".into()))?;
                let trainable = parts[3] == "1";
                manifest.push((parts[0].to_string(), rows, cols, trainable));
            } else {
                return Err(bad(format!("unexpected header line '{line}'")));
            }
        }
        for (name, rows, cols, trainable) in manifest {
            let n = rows * cols * 4;
            if payload.len() < n {
                return Err(bad(format!("payload truncated at tensor {name}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in payload[..n].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            payload = &payload[n..];
            ckpt.entries
                .push((name, Tensor::from_vec(rows, cols, data), trainable));
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after tensor payload".into()));
        }
        Ok(ckpt)
    }
}
