//! Dataset interchange on disk: a CSV manifest
//! (`image_path,split,bbox_x0,bbox_y0,bbox_x1,bbox_y1,<class names...>`),
//! a JSON schema sidecar mapping attribute groups to ordered class names,
//! and PNG/PPM image files referenced by relative path.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

use super::{detect_scheme, AttributeSchema, BBox, Dataset, DatasetRecord, ImageBuf, Split};

pub const SCHEMA_FILE: &str = "schema.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Load a dataset from a manifest CSV. The schema sidecar `schema.json`
/// must sit next to the manifest; image paths resolve relative to the
/// manifest's directory. Errors are addressed by 1-based data row.
pub fn load_manifest(manifest_path: &Path) -> Result<Dataset> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let schema_path = dir.join(SCHEMA_FILE);
    let schema_bytes = fsutil::read_bytes(&schema_path)?;
    let schema: AttributeSchema = serde_json::from_slice(&schema_bytes)
        .map_err(|e| Error::corrupt(&schema_path, format!("bad schema JSON: {e}")))?;
    schema.validate()?;
    let class_names = schema.class_names();

    let bytes = fsutil::read_bytes(manifest_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());

    let headers = reader
        .headers()
        .map_err(|e| Error::corrupt(manifest_path, format!("bad CSV header: {e}")))?
        .clone();
    let fixed = ["image_path", "split", "bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1"];
    if headers.len() != fixed.len() + class_names.len() {
        return Err(Error::corrupt(
            manifest_path,
            format!(
                "header has {} columns, expected {} fixed + {} classes",
                headers.len(),
                fixed.len(),
                class_names.len()
            ),
        ));
    }
    for (i, name) in fixed.iter().enumerate() {
        if &headers[i] != *name {
            return Err(Error::corrupt(
                manifest_path,
                format!("header column {i} is {:?}, expected {name:?}", &headers[i]),
            ));
        }
    }
    for (i, class) in class_names.iter().enumerate() {
        if &headers[fixed.len() + i] != class.as_str() {
            return Err(Error::corrupt(
                manifest_path,
                format!(
                    "header class column {:?} does not match schema class {class:?}",
                    &headers[fixed.len() + i]
                ),
            ));
        }
    }

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| Error::Manifest {
            row: row_no,
            reason: format!("unreadable row: {e}"),
        })?;
        if row.len() != headers.len() {
            return Err(Error::Manifest {
                row: row_no,
                reason: format!(
                    "row has {} cells, expected {} (label arity mismatch)",
                    row.len(),
                    headers.len()
                ),
            });
        }
        let image_rel = &row[0];
        let split = Split::parse(&row[1]).map_err(|e| Error::Manifest {
            row: row_no,
            reason: e.to_string(),
        })?;

        let bbox_cells: Vec<&str> = (2..6).map(|i| row.get(i).unwrap_or("")).collect();
        let bbox = if bbox_cells.iter().all(|c| c.is_empty()) {
            None
        } else if bbox_cells.iter().any(|c| c.is_empty()) {
            return Err(Error::Manifest {
                row: row_no,
                reason: "bbox cells must be all present or all empty".into(),
            });
        } else {
            let mut vals = [0u32; 4];
            for (i, cell) in bbox_cells.iter().enumerate() {
                vals[i] = cell.parse().map_err(|_| Error::Manifest {
                    row: row_no,
                    reason: format!("bad bbox coordinate {cell:?}"),
                })?;
            }
            Some(BBox {
                x0: vals[0],
                y0: vals[1],
                x1: vals[2],
                y1: vals[3],
            })
        };

        let mut labels = Vec::with_capacity(class_names.len());
        for i in 0..class_names.len() {
            let cell = &row[6 + i];
            let v: i8 = cell.parse().map_err(|_| Error::Manifest {
                row: row_no,
                reason: format!("bad label value {cell:?}"),
            })?;
            if !(-1..=1).contains(&v) {
                return Err(Error::Manifest {
                    row: row_no,
                    reason: format!("label {v} outside -1/0/+1"),
                });
            }
            labels.push(v);
        }

        let image_path = dir.join(image_rel);
        let pixels = ImageBuf::load(&image_path).map_err(|e| Error::Manifest {
            row: row_no,
            reason: format!("image {image_rel:?}: {e}"),
        })?;
        if let Some(b) = &bbox {
            b.validate(pixels.width(), pixels.height())
                .map_err(|e| Error::Manifest {
                    row: row_no,
                    reason: e.to_string(),
                })?;
        }
        let image_id = Path::new(image_rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(image_rel)
            .to_string();
        records.push(DatasetRecord {
            image_id,
            pixels,
            bbox,
            labels,
            split,
        });
    }

    let scheme = detect_scheme(&records);
    Ok(Dataset {
        records,
        schema,
        scheme,
    })
}

/// Write a dataset directory: `manifest.csv`, `schema.json` and one PPM
/// per record under `images/`. Inverse of [`load_manifest`] on records.
pub fn write_manifest(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;

    let schema_json = serde_json::to_vec_pretty(&dataset.schema)
        .map_err(|e| Error::Config(format!("schema serialization: {e}")))?;
    fsutil::atomic_write(&dir.join(SCHEMA_FILE), &schema_json)?;

    let class_names = dataset.schema.class_names();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "image_path".to_string(),
        "split".to_string(),
        "bbox_x0".to_string(),
        "bbox_y0".to_string(),
        "bbox_x1".to_string(),
        "bbox_y1".to_string(),
    ];
    header.extend(class_names.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::Config(format!("manifest write: {e}")))?;

    for rec in &dataset.records {
        let rel = format!("images/{}.ppm", rec.image_id);
        rec.pixels.save(&dir.join(&rel))?;
        let mut row = vec![rel, rec.split.as_str().to_string()];
        match &rec.bbox {
            Some(b) => {
                row.push(b.x0.to_string());
                row.push(b.y0.to_string());
                row.push(b.x1.to_string());
                row.push(b.y1.to_string());
            }
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.extend(rec.labels.iter().map(|v| v.to_string()));
        writer
            .write_record(&row)
            .map_err(|e| Error::Config(format!("manifest write: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Config(format!("manifest write: {e}")))?;
    fsutil::atomic_write(&dir.join(MANIFEST_FILE), &bytes)
}
