//! Dataset export and import: one raw little-endian f32 file per image plus
//! `index.json`.

use std::path::Path;

use recttt_core::data::{ShapeSample, Split};
use recttt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub label: usize,
    pub split: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    /// `[C, H, W]` of every image.
    pub image_shape: Vec<usize>,
    pub samples: Vec<IndexEntry>,
}

fn split_name(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(HarnessError::Config(format!("unknown split `{s}`"))),
    }
}

pub fn export(dir: &Path, parts: &[(Split, &[ShapeSample])]) -> Result<Index> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut index = Index {
        image_shape: Vec::new(),
        samples: Vec::new(),
    };
    for (split, samples) in parts {
        for s in *samples {
            if index.image_shape.is_empty() {
                index.image_shape = s.image.shape().to_vec();
            } else if index.image_shape != s.image.shape() {
                return Err(HarnessError::Config(format!(
                    "sample {} has a different shape",
                    s.id
                )));
            }
            let file = format!("{}_{:06}.f32", split.as_str(), s.id);
            let bytes: Vec<u8> = s
                .image
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            let path = dir.join(&file);
            std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
            index.samples.push(IndexEntry {
                id: s.id,
                label: s.label,
                split: split.as_str().into(),
                file,
            });
        }
    }
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;
    Ok(index)
}

/// Reads an exported directory back, grouped by split in index order.
pub fn import(dir: &Path) -> Result<Vec<(Split, ShapeSample)>> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let index: Index = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let expected: usize = index.image_shape.iter().product();
    let mut out = Vec::with_capacity(index.samples.len());
    for e in index.samples {
        let p = dir.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|err| HarnessError::io(&p, err))?;
        if bytes.len() != expected * 4 {
            return Err(HarnessError::io(
                &p,
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "image file has the wrong length",
                ),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((
            split_name(&e.split)?,
            ShapeSample {
                id: e.id,
                image: Tensor::new(&index.image_shape, data)?,
                label: e.label,
            },
        ));
    }
    Ok(out)
}
