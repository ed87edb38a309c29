//! Portable checkpoint format.
//!
//! ```text
//! dainv-checkpoint
//! version 1
//! byte_order little
//! dtype f32
//! input <channels> <height> <width>
//! layers <n>
//! layer conv1 out <o> in <i> kernel <k> stride <s> pad <p> relu <0|1>
//! ...
//! payload_bytes <n>
//! end
//! <payload>
//! ```
//!
//! The payload holds, layer by layer, the weights (`out × in × k × k`) then
//! the biases as little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Architecture, ConvParams, ConvSpec, ModelParams, Shape};
use crate::error::{Error, Result};

const MAGIC: &str = "dainv-checkpoint";
const VERSION: u32 = 1;

fn header(arch: &Architecture) -> String {
    let mut h = format!("{MAGIC}\nversion {VERSION}\nbyte_order little\ndtype f32\n");
    h += &format!("input {} {} {}\n", arch.input.channels, arch.input.height, arch.input.width);
    h += &format!("layers {}\n", arch.depth());
    for (i, l) in arch.layers.iter().enumerate() {
        h += &format!(
            "layer conv{} out {} in {} kernel {} stride {} pad {} relu {}\n",
            i + 1,
            l.out_channels,
            l.in_channels,
            l.kernel,
            l.stride,
            l.padding,
            u8::from(l.relu)
        );
    }
    h += &format!("payload_bytes {}\nend\n", 4 * arch.param_count());
    h
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut bytes = header(&params.arch).into_bytes();
    bytes.reserve(4 * params.param_count());
    for v in params.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct HeaderParser<'a> {
    lines: std::str::Lines<'a>,
    path: &'a Path,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint { path: PathBuf::from(self.path), reason: reason.into() }
    }

    fn line(&mut self) -> Result<&'a str> {
        self.lines.next().ok_or_else(|| self.err("header ends early"))
    }

    /// Reads `key v1 v2 ...` and returns the numeric values.
    fn numbers(&mut self, key: &str, count: usize) -> Result<Vec<usize>> {
        let line = self.line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`, found `{line}`")));
        }
        let vals: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| self.err(format!("bad number `{p}` in `{line}`"))))
            .collect::<Result<_>>()?;
        if vals.len() != count {
            return Err(self.err(format!("`{key}` expects {count} values")));
        }
        Ok(vals)
    }

    fn exact(&mut self, expected: &str) -> Result<()> {
        let line = self.line()?;
        if line.trim_end() != expected {
            return Err(self.err(format!("expected `{expected}`, found `{line}`")));
        }
        Ok(())
    }

    fn layer(&mut self, index: usize) -> Result<ConvSpec> {
        let line = self.line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let name = format!("conv{index}");
        let keys = ["out", "in", "kernel", "stride", "pad", "relu"];
        if parts.len() != 2 + 2 * keys.len() || parts[0] != "layer" || parts[1] != name {
            return Err(self.err(format!("bad layer line `{line}`")));
        }
        let mut vals = [0usize; 6];
        for (i, key) in keys.iter().enumerate() {
            if parts[2 + 2 * i] != *key {
                return Err(self.err(format!("expected `{key}` in `{line}`")));
            }
            vals[i] = parts[3 + 2 * i].parse().map_err(|_| self.err(format!("bad number in `{line}`")))?;
        }
        if vals[5] > 1 {
            return Err(self.err("relu flag must be 0 or 1"));
        }
        Ok(ConvSpec {
            out_channels: vals[0],
            in_channels: vals[1],
            kernel: vals[2],
            stride: vals[3],
            padding: vals[4],
            relu: vals[5] == 1,
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint { path: PathBuf::from(path), reason: reason.to_string() };
    let end = bytes.windows(5).position(|w| w == b"\nend\n").ok_or_else(|| bad("missing header terminator"))? + 5;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut p = HeaderParser { lines: text.lines(), path };
    p.exact(MAGIC)?;
    let version = p.numbers("version", 1)?[0];
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    p.exact("byte_order little")?;
    p.exact("dtype f32")?;
    let input = p.numbers("input", 3)?;
    let n_layers = p.numbers("layers", 1)?[0];
    let mut layers = Vec::with_capacity(n_layers);
    for i in 1..=n_layers {
        layers.push(p.layer(i)?);
    }
    let payload_bytes = p.numbers("payload_bytes", 1)?[0];
    p.exact("end")?;

    let arch = Architecture { input: Shape { channels: input[0], height: input[1], width: input[2] }, layers };
    arch.validate().map_err(|e| bad(&e.to_string()))?;
    if payload_bytes != 4 * arch.param_count() {
        return Err(bad("declared payload size does not match layer shapes"));
    }
    let payload = &bytes[end..];
    if payload.len() < payload_bytes {
        return Err(bad("truncated payload"));
    }
    if payload.len() > payload_bytes {
        return Err(bad("trailing bytes after payload"));
    }
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let layers = arch
        .layers
        .iter()
        .map(|spec| ConvParams {
            weight: values.by_ref().take(spec.weight_len()).collect(),
            bias: values.by_ref().take(spec.out_channels).collect(),
        })
        .collect();
    Ok(ModelParams { arch, layers })
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &Architecture) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(path)?;
    if &params.arch != expected {
        return Err(Error::Checkpoint {
            path: PathBuf::from(path),
            reason: "architecture differs from the configured model".into(),
        });
    }
    Ok(params)
}

/// `<file name>:<fnv1a-64 of the file>`.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(format!("{name}:{h:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use crate::rng::stream;

    fn saved() -> (tempfile::TempDir, PathBuf, ModelParams<f32>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = init_params(&Architecture::all_cnn_c_width(0.25), &mut stream(4, "init", 0, 0));
        save_checkpoint(&params, &path).unwrap();
        (dir, path, params)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (_d, path, params) = saved();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, params.arch);
        assert!(loaded.iter().zip(params.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(load_checkpoint_for(&path, &params.arch).is_ok());
        assert!(load_checkpoint_for(&path, &Architecture::all_cnn_c()).is_err());
    }

    #[test]
    fn edited_shape_is_rejected() {
        let (_d, path, _) = saved();
        let bytes = fs::read(&path).unwrap();
        let end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        let header = String::from_utf8(bytes[..end].to_vec()).unwrap();
        let edited = header.replacen("layer conv1 out 24 in 3", "layer conv1 out 25 in 3", 1);
        assert_ne!(edited, header);
        let mut rebuilt = edited.into_bytes();
        rebuilt.extend_from_slice(&bytes[end..]);
        fs::write(&path, rebuilt).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (_d, path, _) = saved();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (_d, path, _) = saved();
        let bytes = fs::read(&path).unwrap();
        let mut edited = bytes.clone();
        let pos = bytes.windows(9).position(|w| w == b"version 1").unwrap();
        edited[pos + 8] = b'7';
        fs::write(&path, edited).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));
    }
}
