//! Datasets: the attribute schema, record types, label mapping, the
//! procedural shape generator, CSV manifest ingestion, and the image
//! preprocessing/augmentation pipeline.

mod image_buf;
mod manifest;
mod preprocess;
mod synthetic;

pub use image_buf::ImageBuf;
pub use manifest::{load_manifest, write_manifest, MANIFEST_FILE, SCHEMA_FILE};
pub use preprocess::{
    augment, compute_mean_rgb, crop_bbox_margin, preprocess, AugmentMode, DEFAULT_BBOX_MARGIN,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four attribute groups every class belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeGroup {
    Color,
    Shape,
    Pattern,
    Texture,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 4] = [
        AttributeGroup::Color,
        AttributeGroup::Shape,
        AttributeGroup::Pattern,
        AttributeGroup::Texture,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeGroup::Color => "color",
            AttributeGroup::Shape => "shape",
            AttributeGroup::Pattern => "pattern",
            AttributeGroup::Texture => "texture",
        }
    }
}

/// Ordered class names per group. The flat class index order is
/// color ++ shape ++ pattern ++ texture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AttributeSchema {
    #[serde(default)]
    pub color: Vec<String>,
    #[serde(default)]
    pub shape: Vec<String>,
    #[serde(default)]
    pub pattern: Vec<String>,
    #[serde(default)]
    pub texture: Vec<String>,
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for name in self.class_names() {
            if name.is_empty() {
                return Err(Error::Config("empty class name in schema".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate class name {name:?}")));
            }
        }
        if seen.is_empty() {
            return Err(Error::Config("schema defines no classes".into()));
        }
        Ok(())
    }

    pub fn group_classes(&self, group: AttributeGroup) -> &[String] {
        match group {
            AttributeGroup::Color => &self.color,
            AttributeGroup::Shape => &self.shape,
            AttributeGroup::Pattern => &self.pattern,
            AttributeGroup::Texture => &self.texture,
        }
    }

    /// All class names in flat index order.
    pub fn class_names(&self) -> Vec<String> {
        AttributeGroup::ALL
            .iter()
            .flat_map(|g| self.group_classes(*g).iter().cloned())
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        AttributeGroup::ALL
            .iter()
            .map(|g| self.group_classes(*g).len())
            .sum()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|n| n == name)
    }

    pub fn group_of(&self, class_index: usize) -> Option<AttributeGroup> {
        let mut offset = 0;
        for g in AttributeGroup::ALL {
            let len = self.group_classes(g).len();
            if class_index < offset + len {
                return Some(g);
            }
            offset += len;
        }
        None
    }

    /// Flat index range of a group's classes.
    pub fn group_range(&self, group: AttributeGroup) -> std::ops::Range<usize> {
        let mut offset = 0;
        for g in AttributeGroup::ALL {
            let len = self.group_classes(g).len();
            if g == group {
                return offset..offset + len;
            }
            offset += len;
        }
        0..0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split {other:?}"))),
        }
    }
}

/// Exclusive-end bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn validate(&self, image_w: u32, image_h: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Parameter(format!("bbox {self:?} has no area")));
        }
        if self.x1 > image_w || self.y1 > image_h {
            return Err(Error::Parameter(format!(
                "bbox {self:?} exceeds {image_w}x{image_h} image"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Raw label encoding of a dataset. Three-valued data uses -1/0/+1 for
/// negative/ambiguous/positive; binary data uses 0/1 for negative/positive.
/// A dataset is treated as binary when no -1 appears anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    PosNegAmbiguous,
    Binary,
}

/// One image with its raw labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    pub pixels: ImageBuf,
    pub bbox: Option<BBox>,
    /// Raw values per class: {-1, 0, +1} or {0, 1} depending on the scheme.
    pub labels: Vec<i8>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub schema: AttributeSchema,
    pub scheme: LabelScheme,
}

impl Dataset {
    pub fn split_records(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

/// Detect the raw label scheme: any -1 means three-valued data.
pub fn detect_scheme(records: &[DatasetRecord]) -> LabelScheme {
    if records
        .iter()
        .any(|r| r.labels.contains(&-1))
    {
        LabelScheme::PosNegAmbiguous
    } else {
        LabelScheme::Binary
    }
}

/// Map raw three-valued labels to training targets: -1 -> 0, 0 -> 0.5,
/// +1 -> 1.
pub fn map_labels(raw: &[i8]) -> Result<Vec<f32>> {
    raw.iter()
        .map(|&v| match v {
            -1 => Ok(0.0),
            0 => Ok(0.5),
            1 => Ok(1.0),
            other => Err(Error::Parameter(format!(
                "raw label must be -1, 0 or +1, got {other}"
            ))),
        })
        .collect()
}

/// Training targets for a record under its dataset's scheme. Binary data
/// passes through unchanged; three-valued data goes through [`map_labels`].
pub fn train_targets(raw: &[i8], scheme: LabelScheme) -> Result<Vec<f32>> {
    match scheme {
        LabelScheme::PosNegAmbiguous => map_labels(raw),
        LabelScheme::Binary => raw
            .iter()
            .map(|&v| match v {
                0 => Ok(0.0),
                1 => Ok(1.0),
                other => Err(Error::Parameter(format!(
                    "binary label must be 0 or 1, got {other}"
                ))),
            })
            .collect(),
    }
}
