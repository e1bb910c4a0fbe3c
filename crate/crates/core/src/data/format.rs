//! `MMDS1` files: magic, `u32` little-endian header length, JSON header, one
//! row-major little-endian `f32` block per modality, then `u16` labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultimodalDataset, Split};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"MMDS1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    #[serde(rename = "M")]
    pub modalities: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub split: Split,
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, message: message.into() })
}

pub fn write_dataset(ds: &MultimodalDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let header = DatasetHeader {
        format_version: DATASET_VERSION,
        modalities: ds.num_modalities(),
        classes: ds.classes,
        n: ds.len(),
        dims: ds.dims.clone(),
        seed: ds.seed,
        split: ds.split,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for block in &ds.features {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<MultimodalDataset> {
    if bytes.len() < 5 {
        return format_err(bytes.len(), "truncated before magic");
    }
    if &bytes[..5] != DATASET_MAGIC {
        return format_err(0, "bad magic, expected MMDS1");
    }
    if bytes.len() < 9 {
        return format_err(bytes.len(), "truncated header length");
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let mut pos = 9 + len;
    if bytes.len() < pos {
        return format_err(bytes.len(), format!("truncated header: {len} bytes declared"));
    }
    let header: DatasetHeader =
        serde_json::from_slice(&bytes[9..pos]).map_err(|e| Error::Format { offset: 9, message: format!("bad header json: {e}") })?;
    if header.format_version != DATASET_VERSION {
        return format_err(9, format!("unsupported dataset version {}", header.format_version));
    }
    if header.dims.len() != header.modalities {
        return format_err(9, format!("header lists {} dims for M = {}", header.dims.len(), header.modalities));
    }
    let n = header.n;
    let mut features = Vec::with_capacity(header.modalities);
    for (m, &d) in header.dims.iter().enumerate() {
        let need = n * d * 4;
        if bytes.len() < pos + need {
            return format_err(bytes.len(), format!("truncated feature block of modality {m}: expected {need} bytes at offset {pos}"));
        }
        let block = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        features.push(block);
        pos += need;
    }
    let need = n * 2;
    if bytes.len() < pos + need {
        return format_err(bytes.len(), format!("truncated labels: expected {need} bytes at offset {pos}"));
    }
    let labels: Vec<u16> =
        bytes[pos..pos + need].chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes"))).collect();
    pos += need;
    if pos != bytes.len() {
        return format_err(pos, format!("{} trailing bytes", bytes.len() - pos));
    }
    MultimodalDataset::new(header.dims, header.classes, header.seed, header.split, features, labels)
}

pub fn save_dataset(ds: &MultimodalDataset, path: &Path) -> Result<()> {
    fs::write(path, write_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<MultimodalDataset> {
    read_dataset(&fs::read(path)?)
}

/// One row per sample: label, then every modality's features in order.
pub fn export_csv<W: Write>(ds: &MultimodalDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    for (m, &d) in ds.dims.iter().enumerate() {
        header.extend((0..d).map(|j| format!("m{m}_{j}")));
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.labels[i].to_string()];
        for m in 0..ds.num_modalities() {
            rec.extend(ds.row(m, i).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
