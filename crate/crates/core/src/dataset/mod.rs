//! VOC-layout segmentation datasets.
//!
//! A dataset root holds `JPEGImages/<id>.jpg|png`, `SegmentationClass/<id>.png`
//! (8-bit palette masks) and `ImageSets/Segmentation/<split>.txt`. Synthetic
//! roots use the same layout plus a `manifest.jsonl` recording where every
//! generated sample came from.

mod mask;
mod schema;

pub use mask::{classes_of, decode_mask, encode_mask, LabelMask};
pub use schema::{voc_palette, ClassDef, ClassId, LabelSchema, BACKGROUND, VOC_CLASSES, VOID};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil;

pub const IMAGE_DIR: &str = "JPEGImages";
pub const MASK_DIR: &str = "SegmentationClass";
pub const SPLIT_DIR: &str = "ImageSets/Segmentation";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "png", "jpeg", "JPG"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split file not found: {0}")]
    MissingSplit(PathBuf),
    #[error("sample {sample_id}: no image under {IMAGE_DIR}/")]
    MissingImage { sample_id: String },
    #[error("sample {sample_id}: no mask at {MASK_DIR}/{sample_id}.png")]
    MissingMask { sample_id: String },
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("sample {sample_id}: undecodable image: {reason}")]
    UndecodableImage { sample_id: String, reason: String },
    #[error("sample {sample_id}: image is {image:?} but mask is {mask:?}")]
    DimensionMismatch { sample_id: String, image: (u32, u32), mask: (u32, u32) },
    #[error("mask is not an 8-bit indexed PNG ({0})")]
    NotIndexed(String),
    #[error("mask value {0} is not background, void or a schema class")]
    OutOfSchema(u8),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("encoding failed: {0}")]
    Encode(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("datasets use different label schemas")]
    SchemaMismatch,
    #[error("manifest {path}: line {line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }

    fn for_sample(sample_id: &str, source: DatasetError) -> Self {
        DatasetError::Sample { sample_id: sample_id.to_string(), source: Box::new(source) }
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic { seed_id: String },
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub output_id: String,
    pub seed_id: String,
    pub target_class: ClassId,
    pub prompt: String,
    pub backend: String,
    pub request_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub mask: LabelMask,
    pub classes: BTreeSet<ClassId>,
    pub origin: Origin,
    pub caption: Option<String>,
}

impl SegSample {
    pub fn load_image(&self) -> Result<RgbImage, DatasetError> {
        let img = image::open(&self.image_path)
            .map_err(|e| DatasetError::UndecodableImage { sample_id: self.sample_id.clone(), reason: e.to_string() })?;
        Ok(img.to_rgb8())
    }

    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }
}

/// A sample to be written into an index.
#[derive(Debug, Clone)]
pub struct NewSample {
    pub sample_id: String,
    pub image: RgbImage,
    pub mask: LabelMask,
    /// Present for synthetic samples; appended to the manifest.
    pub provenance: Option<ManifestRecord>,
}

/// Ordered collection of samples sharing one label schema.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub schema: LabelSchema,
    pub samples: Vec<SegSample>,
    pub root: PathBuf,
    pub split: String,
}

pub fn split_path(root: &Path, split: &str) -> PathBuf {
    root.join(SPLIT_DIR).join(format!("{split}.txt"))
}

/// Reads the split file and every listed sample, in file order.
pub fn load_index(root: &Path, split: &str, schema: &LabelSchema) -> Result<DatasetIndex, DatasetError> {
    let split_file = split_path(root, split);
    if !split_file.is_file() {
        return Err(DatasetError::MissingSplit(split_file));
    }
    let text = fs::read_to_string(&split_file).map_err(|e| DatasetError::io(&split_file, e))?;
    let manifest = read_manifest(root)?;
    let seeds: HashMap<&str, &str> = manifest.iter().map(|r| (r.output_id.as_str(), r.seed_id.as_str())).collect();

    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if !seen.insert(id.to_string()) {
            return Err(DatasetError::DuplicateId(id.to_string()));
        }
        let origin = match seeds.get(id) {
            Some(seed) => Origin::Synthetic { seed_id: seed.to_string() },
            None => Origin::Real,
        };
        samples.push(load_sample(root, id, schema, origin)?);
    }
    Ok(DatasetIndex { schema: schema.clone(), samples, root: root.to_path_buf(), split: split.to_string() })
}

fn find_image(root: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().map(|ext| root.join(IMAGE_DIR).join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

fn load_sample(root: &Path, id: &str, schema: &LabelSchema, origin: Origin) -> Result<SegSample, DatasetError> {
    let image_path = find_image(root, id).ok_or_else(|| DatasetError::MissingImage { sample_id: id.into() })?;
    let mask_path = root.join(MASK_DIR).join(format!("{id}.png"));
    if !mask_path.is_file() {
        return Err(DatasetError::MissingMask { sample_id: id.into() });
    }
    let bytes = fs::read(&mask_path).map_err(|e| DatasetError::io(&mask_path, e))?;
    let mask = decode_mask(&bytes, schema).map_err(|e| DatasetError::for_sample(id, e))?;
    let dims = image::image_dimensions(&image_path)
        .map_err(|e| DatasetError::UndecodableImage { sample_id: id.into(), reason: e.to_string() })?;
    if dims != (mask.width(), mask.height()) {
        return Err(DatasetError::DimensionMismatch {
            sample_id: id.into(),
            image: dims,
            mask: (mask.width(), mask.height()),
        });
    }
    Ok(SegSample {
        sample_id: id.to_string(),
        image_path,
        mask_path,
        classes: classes_of(&mask),
        mask,
        origin,
        caption: None,
    })
}

/// Reads `manifest.jsonl` under `root`; a missing file is an empty manifest.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| DatasetError::Manifest {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

impl DatasetIndex {
    /// Creates the directory layout for a new, empty index.
    pub fn create(root: &Path, split: &str, schema: &LabelSchema) -> Result<Self, DatasetError> {
        for dir in [IMAGE_DIR, MASK_DIR, SPLIT_DIR] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(|e| DatasetError::io(&d, e))?;
        }
        let split_file = split_path(root, split);
        if !split_file.exists() {
            fsutil::write_atomic(&split_file, b"").map_err(|e| DatasetError::io(&split_file, e))?;
        }
        Ok(Self { schema: schema.clone(), samples: Vec::new(), root: root.to_path_buf(), split: split.into() })
    }

    /// Loads an existing index, or creates an empty one when the split file is absent.
    pub fn open_or_create(root: &Path, split: &str, schema: &LabelSchema) -> Result<Self, DatasetError> {
        if split_path(root, split).is_file() {
            load_index(root, split, schema)
        } else {
            Self::create(root, split, schema)
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SegSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.get(sample_id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.sample_id.as_str())
    }

    /// SHA-256 over the ordered (id, class set) listing, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.sample_id.as_bytes());
            hasher.update(b"\t");
            let classes: Vec<String> = s.classes.iter().map(|c| c.0.to_string()).collect();
            hasher.update(classes.join(",").as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes image, mask and (for synthetic samples) the manifest line, then
    /// rewrites the split file atomically. Single writer per index.
    pub fn write_sample(&mut self, sample: NewSample) -> Result<&SegSample, DatasetError> {
        let id = sample.sample_id.clone();
        if self.contains(&id) {
            return Err(DatasetError::DuplicateId(id));
        }
        if sample.image.dimensions() != (sample.mask.width(), sample.mask.height()) {
            return Err(DatasetError::DimensionMismatch {
                sample_id: id,
                image: sample.image.dimensions(),
                mask: (sample.mask.width(), sample.mask.height()),
            });
        }
        sample.mask.validate(&self.schema).map_err(|e| DatasetError::for_sample(&id, e))?;

        let image_path = self.root.join(IMAGE_DIR).join(format!("{id}.png"));
        let mask_path = self.root.join(MASK_DIR).join(format!("{id}.png"));
        let mut image_png = Vec::new();
        sample
            .image
            .write_to(&mut Cursor::new(&mut image_png), image::ImageFormat::Png)
            .map_err(|e| DatasetError::Encode(e.to_string()))?;
        fsutil::write_atomic(&image_path, &image_png).map_err(|e| DatasetError::io(&image_path, e))?;
        let mask_png = encode_mask(&sample.mask)?;
        fsutil::write_atomic(&mask_path, &mask_png).map_err(|e| DatasetError::io(&mask_path, e))?;

        let origin = match &sample.provenance {
            Some(record) => {
                let manifest = self.root.join(MANIFEST_FILE);
                let line = serde_json::to_string(record).map_err(|e| DatasetError::Encode(e.to_string()))?;
                fsutil::append_line(&manifest, &line).map_err(|e| DatasetError::io(&manifest, e))?;
                Origin::Synthetic { seed_id: record.seed_id.clone() }
            }
            None => Origin::Real,
        };

        self.samples.push(SegSample {
            sample_id: id,
            image_path,
            mask_path,
            classes: classes_of(&sample.mask),
            mask: sample.mask,
            origin,
            caption: None,
        });
        if let Err(e) = self.write_split_file() {
            self.samples.pop();
            return Err(e);
        }
        Ok(self.samples.last().expect("just pushed"))
    }

    pub fn write_split_file(&self) -> Result<(), DatasetError> {
        let path = split_path(&self.root, &self.split);
        let mut text = String::new();
        for s in &self.samples {
            text.push_str(&s.sample_id);
            text.push('\n');
        }
        fsutil::write_atomic(&path, text.as_bytes()).map_err(|e| DatasetError::io(&path, e))
    }
}
