//! Binary checkpoint format.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic "VTF1"
//! bytes 4..8    u32 LE, manifest byte length M
//! bytes 8..8+M  UTF-8 manifest, one line per tensor:
//!               "<name> <dtype> <d0>x<d1>x... <payload-offset>\n"
//! next          raw little-endian tensor payloads, in manifest order
//! last 4        u32 LE, CRC-32 (IEEE) of the payload region
//! ```
//!
//! Offsets are relative to the payload region start and must be exactly
//! sequential; the reader treats any gap or overlap as corruption. Values are
//! written as f64; f32 payloads are accepted on read and widened.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VTF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::Weights(format!("unknown dtype '{}'", other))),
        }
    }
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn shape_token(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(token: &str) -> Result<Vec<usize>> {
    token
        .split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Weights(format!("bad shape token '{}'", token)))
        })
        .collect()
}

/// Write every tensor in the model (parameters and running statistics) as
/// f64.
pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, entry) in model.params.iter() {
        let offset = payload.len();
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            name,
            Dtype::F64.name(),
            shape_token(entry.value.shape()),
            offset
        ));
        for &v in entry.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest_bytes = manifest.as_bytes();
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct ManifestEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

/// Parse and integrity-check a checkpoint, returning named tensors.
pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Weights(format!("{}: file too short", path.display())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Weights(format!("{}: bad magic, not a checkpoint", path.display())));
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8 + mlen;
    if bytes.len() < payload_start + 4 {
        return Err(Error::Weights(format!("{}: truncated manifest", path.display())));
    }
    let manifest = std::str::from_utf8(&bytes[8..payload_start])
        .map_err(|_| Error::Weights(format!("{}: manifest is not UTF-8", path.display())))?;

    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Weights(format!(
                "{}: manifest line {} malformed: '{}'",
                path.display(),
                lineno + 1,
                line
            )));
        }
        entries.push(ManifestEntry {
            name: parts[0].to_string(),
            dtype: Dtype::parse(parts[1])?,
            shape: parse_shape(parts[2])?,
            offset: parts[3]
                .parse::<usize>()
                .map_err(|_| Error::Weights(format!("bad offset '{}'", parts[3])))?,
        });
    }

    let payload = &bytes[payload_start..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(Error::Weights(format!(
            "{}: payload checksum mismatch (stored {:08x}, computed {:08x})",
            path.display(),
            stored_crc,
            actual_crc
        )));
    }

    let mut out = Vec::with_capacity(entries.len());
    let mut cursor = 0usize;
    for e in &entries {
        if e.offset != cursor {
            return Err(Error::Weights(format!(
                "{}: '{}' at offset {} but expected {}",
                path.display(),
                e.name,
                e.offset,
                cursor
            )));
        }
        let numel: usize = e.shape.iter().product();
        let nbytes = numel * e.dtype.size();
        let end = cursor + nbytes;
        if end > payload.len() {
            return Err(Error::Weights(format!(
                "{}: '{}' payload runs past end of file",
                path.display(),
                e.name
            )));
        }
        let raw = &payload[cursor..end];
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Weights(format!("{}: '{}': {}", path.display(), e.name, err)))?;
        out.push((e.name.clone(), t));
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(Error::Weights(format!(
            "{}: {} trailing payload bytes not covered by the manifest",
            path.display(),
            payload.len() - cursor
        )));
    }
    Ok(out)
}

/// Load a checkpoint into a model with the given configuration. The stored
/// name set and every shape must match the configuration exactly; the first
/// divergence is reported.
pub fn load_weights(config: &ModelConfig, path: &Path) -> Result<Model> {
    let stored = read_weights(path)?;
    let mut model = Model::new(config.clone(), 0)?;
    let expected = model.params.names();
    let got: Vec<String> = stored.iter().map(|(n, _)| n.clone()).collect();
    for (e, g) in expected.iter().zip(got.iter()) {
        if e != g {
            return Err(Error::Weights(format!(
                "{}: parameter names diverge: expected '{}', file has '{}'",
                path.display(),
                e,
                g
            )));
        }
    }
    if expected.len() != got.len() {
        let (longer, which) = if expected.len() > got.len() {
            (&expected[got.len()], "missing from file")
        } else {
            (&got[expected.len()], "unexpected in file")
        };
        return Err(Error::Weights(format!(
            "{}: parameter '{}' {}",
            path.display(),
            longer,
            which
        )));
    }
    for (name, tensor) in stored {
        model
            .params
            .set(&name, tensor)
            .map_err(|e| Error::Weights(format!("{}: {}", path.display(), e)))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{micro_config, xs_toy};
    use crate::nn::Mode;

    #[test]
    fn crc32_known_vector() {
        // The standard check value for the IEEE polynomial.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtf1");
        let model = Model::new(xs_toy(4, 32), 42).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&model.config, &path).unwrap();
        assert_eq!(model.params.len(), loaded.params.len());
        for ((na, ea), (nb, eb)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ea.value.shape(), eb.value.shape(), "{na}");
            assert_eq!(ea.value.data(), eb.value.data(), "{na}");
            assert_eq!(ea.trainable, eb.trainable, "{na}");
        }
    }

    #[test]
    fn round_trip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtf1");
        let model = Model::new(micro_config(3, 8), 7).unwrap();
        let x = Tensor::from_fn(&[2, 2, 8, 8], |ix| {
            ((ix[0] * 31 + ix[1] * 17 + ix[2] * 5 + ix[3]) % 11) as f64 / 11.0
        });
        let before = model.predict_probs(&x).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&model.config, &path).unwrap();
        let after = loaded.predict_probs(&x).unwrap();
        assert_eq!(before.data(), after.data());
        let pass = loaded.forward(&x, None, Mode::Eval).unwrap();
        assert_eq!(pass.tape.value(pass.probs).data(), before.data());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtf1");
        fs::write(&path, b"NOPE_this_is_not_a_checkpoint").unwrap();
        let err = read_weights(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn rejects_flipped_payload_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtf1");
        let model = Model::new(micro_config(3, 8), 1).unwrap();
        save_weights(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = read_weights(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtf1");
        let model = Model::new(micro_config(3, 8), 1).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_weights(&path).is_err());
    }

    #[test]
    fn rejects_config_mismatch_naming_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtf1");
        let model = Model::new(xs_toy(4, 32), 3).unwrap();
        save_weights(&model, &path).unwrap();
        // Wrong class count changes head.weight's shape.
        let err = load_weights(&xs_toy(7, 32), &path).unwrap_err().to_string();
        assert!(err.contains("head"), "{err}");
        // A different architecture diverges on parameter names.
        let err = load_weights(&micro_config(4, 32), &path).unwrap_err().to_string();
        assert!(err.contains("diverge") || err.contains("missing") || err.contains("unexpected"), "{err}");
    }

    #[test]
    fn accepts_f32_payloads() {
        // Hand-build a one-tensor f32 file and read it back widened.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.vtf1");
        let values = [0.5f32, -1.25, 3.0];
        let manifest = format!("w f32 3 0\n");
        let mut payload = Vec::new();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32(&payload).to_le_bytes());
        fs::write(&path, out).unwrap();
        let read = read_weights(&path).unwrap();
        assert_eq!(read.len(), 1);
        assert_eq!(read[0].0, "w");
        assert_eq!(read[0].1.data(), &[0.5, -1.25, 3.0]);
    }
}
