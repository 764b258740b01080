//! Dataset manifests, point annotations and fixed train/test splits.
//!
//! A manifest is a TOML document:
//!
//! ```toml
//! [declared_totals]          # optional
//! train_count = 138151
//! test_count = 88140
//!
//! [[records]]
//! id = "I01"
//! width = 5616
//! height = 3744
//! gsd = 0.045                # meters per pixel; optional for CCTV data
//! event_type = "sport"       # sport | fair | festival | city_center | other
//! split = "train"            # train | test
//! image_path = "images/I01.jpg"
//! annotation_path = "annotations/I01.csv"
//! ```
//!
//! Relative paths resolve against the manifest's directory. Annotation files
//! hold one `x,y` row per person (real-valued pixels, origin at the top-left
//! corner of the top-left pixel); a leading header row is allowed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GSD_MIN: f64 = 0.01;
pub const GSD_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Sport,
    Fair,
    Festival,
    CityCenter,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// Ground sampling distance in meters per pixel. CCTV corpora have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsd: Option<f64>,
    pub event_type: EventType,
    pub split: Split,
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
}

impl ImageRecord {
    /// The GSD, or a schema error naming the field when it is absent.
    pub fn require_gsd(&self) -> Result<f64> {
        self.gsd.ok_or_else(|| Error::Schema {
            path: PathBuf::from(&self.id),
            field: "gsd".into(),
            message: "required for GSD-adaptive ground truth and person detection".into(),
        })
    }

    fn validate(&self, index: usize, manifest: &Path) -> Result<()> {
        let schema = |field: &str, message: String| Error::Schema {
            path: manifest.to_path_buf(),
            field: format!("records[{index}].{field}"),
            message,
        };
        if self.id.trim().is_empty() {
            return Err(schema("id", "must be non-empty".into()));
        }
        if self.width == 0 {
            return Err(schema("width", "must be at least 1".into()));
        }
        if self.height == 0 {
            return Err(schema("height", "must be at least 1".into()));
        }
        if let Some(gsd) = self.gsd {
            if !(GSD_MIN..=GSD_MAX).contains(&gsd) {
                return Err(schema(
                    "gsd",
                    format!("{gsd} outside [{GSD_MIN}, {GSD_MAX}] m/pixel"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredTotals {
    pub train_count: u64,
    pub test_count: u64,
}

/// Person locations for one image, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointAnnotationSet {
    pub image_id: String,
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotationSet {
    pub fn new(image_id: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            image_id: image_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the first point outside `[0, width) × [0, height)` or non-finite.
    pub fn first_out_of_bounds(&self, width: usize, height: usize) -> Option<usize> {
        self.points
            .iter()
            .position(|&(x, y)| !in_bounds(x, y, width, height))
    }
}

pub(crate) fn in_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_totals: Option<DeclaredTotals>,
    #[serde(default)]
    pub records: Vec<ImageRecord>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// Annotation count per record, filled in by [`load_manifest`].
    #[serde(skip)]
    pub annotation_counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn load_annotations(&self, record: &ImageRecord) -> Result<PointAnnotationSet> {
        load_annotations(record, &self.base_dir)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Total annotations per split, from the counts gathered at load time.
    pub fn split_totals(&self) -> (u64, u64) {
        let mut train = 0u64;
        let mut test = 0u64;
        for (rec, n) in self.records.iter().zip(&self.annotation_counts) {
            match rec.split {
                Split::Train => train += *n as u64,
                Split::Test => test += *n as u64,
            }
        }
        (train, test)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest, including every referenced annotation
/// file and the declared per-split totals.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        field: toml_error_field(&e),
        message: e.message().to_string(),
    })?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut seen = std::collections::HashSet::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        rec.validate(i, path)?;
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                field: format!("records[{i}].id"),
                message: format!("duplicate image id {:?}", rec.id),
            });
        }
    }

    manifest.annotation_counts = manifest
        .records
        .iter()
        .map(|rec| manifest.load_annotations(rec).map(|a| a.len()))
        .collect::<Result<_>>()?;

    if let Some(declared) = manifest.declared_totals {
        let (train, test) = manifest.split_totals();
        if train != declared.train_count {
            return Err(Error::CountMismatch {
                split: "train",
                declared: declared.train_count,
                actual: train,
            });
        }
        if test != declared.test_count {
            return Err(Error::CountMismatch {
                split: "test",
                declared: declared.test_count,
                actual: test,
            });
        }
    }
    Ok(manifest)
}

fn toml_error_field(e: &toml::de::Error) -> String {
    // serde reports unknown/missing fields as "... field `name` ..."
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into())
}

/// Reads the annotation CSV of `record`, resolving relative paths against
/// `base_dir`.
pub fn load_annotations(record: &ImageRecord, base_dir: &Path) -> Result<PointAnnotationSet> {
    let path = if record.annotation_path.is_absolute() {
        record.annotation_path.clone()
    } else {
        base_dir.join(&record.annotation_path)
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let points = parse_points(&text, &path)?;
    let set = PointAnnotationSet::new(record.id.clone(), points);
    if let Some(index) = set.first_out_of_bounds(record.width as usize, record.height as usize) {
        let (x, y) = set.points[index];
        return Err(Error::PointOutOfBounds {
            path,
            index,
            x,
            y,
            width: record.width,
            height: record.height,
        });
    }
    Ok(set)
}

fn parse_points(text: &str, path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    let mut first_row = true;
    for (lineno, line) in text.lines().enumerate() {
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        let parsed = parse_row(row);
        let is_first = std::mem::replace(&mut first_row, false);
        match parsed {
            Some(p) => points.push(p),
            None if is_first && row.split(',').all(|f| f.trim().parse::<f64>().is_err()) => {}
            None => {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    row: row.to_string(),
                })
            }
        }
    }
    Ok(points)
}

fn parse_row(row: &str) -> Option<(f64, f64)> {
    let mut fields = row.split(',').map(str::trim);
    let x: f64 = fields.next()?.parse().ok()?;
    let y: f64 = fields.next()?.parse().ok()?;
    if fields.next().is_some() || x.is_nan() || y.is_nan() {
        return None;
    }
    Some((x, y))
}

/// Writes points as `x,y` rows with a header.
pub fn write_annotations(path: &Path, points: &PointAnnotationSet) -> Result<()> {
    let mut out = String::from("x,y\n");
    for (x, y) in &points.points {
        out.push_str(&format!("{x},{y}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Records of one split, in manifest order.
pub fn split(manifest: &DatasetManifest, which: Split) -> Vec<ImageRecord> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == which)
        .cloned()
        .collect()
}
