//! Volume files and dataset manifests.
//!
//! A volume is a JSON header (`case.json`) next to a raw blob (`case.bin`)
//! holding the little-endian f32 image followed by the little-endian u16
//! labels, both in `[D, H, W]` row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_FORMAT: &str = "voxelnext-vol-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format: String,
    pub case_id: String,
    pub extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub image_dtype: String,
    pub label_dtype: String,
    pub blob: String,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map(|d| d.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

pub fn write_volume(sample: &VolumeSample, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::format(path, "volume path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let header = VolumeHeader {
        format: VOLUME_FORMAT.to_string(),
        case_id: sample.case_id.clone(),
        extents: sample.extents(),
        spacing_mm: sample.spacing,
        image_dtype: "f32le".into(),
        label_dtype: "u16le".into(),
        blob: format!("{stem}.bin"),
    };
    let n = sample.image.len();
    let mut blob = Vec::with_capacity(n * 6);
    for v in sample.image.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.labels.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let bpath = sibling(path, &header.blob);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    let json =
        serde_json::to_string_pretty(&header).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("not a volume header: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(VOLUME_FORMAT) => {}
        Some(other) => {
            return Err(Error::format(
                path,
                format!("unsupported volume format `{other}` (expected `{VOLUME_FORMAT}`)"),
            ))
        }
        None => return Err(Error::format(path, "missing `format` field; not a volume header")),
    }
    let header: VolumeHeader = serde_json::from_value(value)
        .map_err(|e| Error::format(path, format!("bad volume header: {e}")))?;
    if header.image_dtype != "f32le" || header.label_dtype != "u16le" {
        return Err(Error::format(
            path,
            format!(
                "unsupported dtypes {}/{} (expected f32le/u16le)",
                header.image_dtype, header.label_dtype
            ),
        ));
    }
    let n: usize = header.extents.iter().product();
    let bpath = sibling(path, &header.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected = n * 6;
    if blob.len() != expected {
        return Err(Error::format(
            &bpath,
            format!(
                "expected {expected} bytes for extents {:?}, found {}",
                header.extents,
                blob.len()
            ),
        ));
    }
    let (img, lab) = blob.split_at(n * 4);
    let image = img
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels = lab
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let shape = header.extents.to_vec();
    VolumeSample::new(
        Tensor::from_vec(shape.clone(), image)?,
        Tensor::from_vec(shape, labels)?,
        header.spacing_mm,
        header.case_id,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

/// One manifest row: `case_id,path,split,fold`. `path` is relative to the
/// manifest's directory; `fold` is empty for cases outside the CV pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub path: String,
    pub split: String,
    pub fold: Option<usize>,
}

const MANIFEST_HEADER: &str = "case_id,path,split,fold";

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        for field in [&e.case_id, &e.path, &e.split] {
            if field.contains([',', '\n', '"']) {
                return Err(Error::format(
                    path,
                    format!("manifest field `{field}` contains a delimiter"),
                ));
            }
        }
        let fold = e.fold.map(|f| f.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", e.case_id, e.path, e.split, fold));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(
            path,
            format!("manifest must start with `{MANIFEST_HEADER}`"),
        ));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected 4 fields, found {}", i + 2, fields.len()),
            ));
        }
        let fold = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].parse().map_err(|_| {
                Error::format(path, format!("line {}: bad fold `{}`", i + 2, fields[3]))
            })?)
        };
        entries.push(ManifestEntry {
            case_id: fields[0].to_string(),
            path: fields[1].to_string(),
            split: fields[2].to_string(),
            fold,
        });
    }
    Ok(entries)
}
