//! Checkpoint format: a JSON manifest naming every tensor (shape + byte
//! offset into a flat little-endian f32 blob), with the model config embedded
//! so a checkpoint is self-describing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub entries: Vec<ManifestEntry>,
    pub blob_len: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Write `<prefix>.json` and `<prefix>.bin`.
pub fn save<T: Real>(det: &Detector<T>, prefix: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let push = |name: &str, shape: Vec<usize>, data: &[T], trainable: bool,
                    entries: &mut Vec<ManifestEntry>,
                    blob: &mut Vec<u8>| {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape,
            offset: blob.len(),
            trainable,
        });
        for v in data {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for e in &det.params.entries {
        push(&e.name, e.shape.clone(), &e.data, true, &mut entries, &mut blob);
    }
    for b in &det.bn.entries {
        push(
            &format!("{}.running_mean", b.name),
            vec![b.mean.len()],
            &b.mean,
            false,
            &mut entries,
            &mut blob,
        );
        push(
            &format!("{}.running_var", b.name),
            vec![b.var.len()],
            &b.var,
            false,
            &mut entries,
            &mut blob,
        );
    }
    let manifest = Manifest {
        model: det.cfg.clone(),
        entries,
        blob_len: blob.len(),
    };
    write_file(
        &prefix.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    write_file(&prefix.with_extension("bin"), &blob)?;
    Ok(())
}

fn read_slice(blob: &[u8], offset: usize, len: usize, name: &str) -> Result<Vec<f32>> {
    let end = offset + 4 * len;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob too short for {} ({} bytes needed, {} present)",
            name,
            end,
            blob.len()
        )));
    }
    Ok(blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Rebuild the detector described by `<prefix>.json` and load its weights,
/// validating every shape against the freshly built model.
pub fn load<T: Real>(prefix: &Path) -> Result<Detector<T>> {
    let json_path = prefix.with_extension("json");
    let mut s = String::new();
    fs::File::open(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?
        .read_to_string(&mut s)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&s)?;

    let bin_path = prefix.with_extension("bin");
    let mut blob = Vec::new();
    fs::File::open(&bin_path)
        .map_err(|e| Error::io(bin_path.display().to_string(), e))?
        .read_to_end(&mut blob)
        .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    if blob.len() != manifest.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest ({})",
            blob.len(),
            manifest.blob_len
        )));
    }

    let mut det: Detector<T> = Detector::build(&manifest.model, 0)?;
    let lookup = |name: &str| -> Result<&ManifestEntry> {
        manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))
    };
    for e in det.params.entries.iter_mut() {
        let m = lookup(&e.name)?;
        if m.shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: checkpoint {:?}, model {:?}",
                e.name, m.shape, e.shape
            )));
        }
        let vals = read_slice(&blob, m.offset, e.data.len(), &e.name)?;
        e.data = vals.into_iter().map(|v| T::of(v as f64)).collect();
    }
    for b in det.bn.entries.iter_mut() {
        for (suffix, buf) in [("running_mean", &mut b.mean), ("running_var", &mut b.var)] {
            let name = format!("{}.{}", b.name, suffix);
            let m = lookup(&name)?;
            if m.shape != [buf.len()] {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: checkpoint {:?}, model [{}]",
                    name,
                    m.shape,
                    buf.len()
                )));
            }
            let vals = read_slice(&blob, m.offset, buf.len(), &name)?;
            *buf = vals.into_iter().map(|v| T::of(v as f64)).collect();
        }
    }
    Ok(det)
}
