//! Label schemas: class ids, names, display names and the VOC palette.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Mask value reserved for void / ignore pixels.
pub const VOID: u8 = 255;
/// Mask value reserved for background.
pub const BACKGROUND: u8 = 0;

/// Palette index of a class inside a label mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(BACKGROUND);

    pub fn is_foreground(self) -> bool {
        self.0 != BACKGROUND && self.0 != VOID
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
}

/// The 21 PASCAL VOC class names in devkit order (index = palette index).
pub const VOC_CLASSES: [&str; 21] = [
    "background",
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Set of classes a dataset is annotated with.
///
/// Class identity is the palette index. `display_names` maps a devkit name to
/// the wording used in prompts; names without an entry are used verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    classes: Vec<ClassDef>,
    #[serde(default)]
    display_names: BTreeMap<String, String>,
}

impl LabelSchema {
    pub fn new(mut classes: Vec<ClassDef>, display_names: BTreeMap<String, String>) -> Result<Self, DatasetError> {
        classes.sort_by_key(|c| c.id);
        let mut names = BTreeSet::new();
        for pair in classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DatasetError::Schema(format!("duplicate class id {}", pair[0].id)));
            }
        }
        for class in &classes {
            if class.id.0 == VOID {
                return Err(DatasetError::Schema("id 255 is reserved for void".into()));
            }
            if class.name.is_empty() {
                return Err(DatasetError::Schema(format!("class {} has an empty name", class.id)));
            }
            if !names.insert(class.name.as_str()) {
                return Err(DatasetError::Schema(format!("duplicate class name {:?}", class.name)));
            }
        }
        Ok(Self { classes, display_names })
    }

    /// The PASCAL VOC schema with human-readable prompt names for the
    /// concatenated devkit spellings.
    pub fn voc() -> Self {
        let classes = VOC_CLASSES
            .iter()
            .enumerate()
            .map(|(i, name)| ClassDef { id: ClassId(i as u8), name: (*name).to_string() })
            .collect();
        let display_names =
            [("diningtable", "dining table"), ("pottedplant", "potted plant"), ("tvmonitor", "tv monitor")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
        Self::new(classes, display_names).expect("VOC schema is valid")
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let raw: LabelSchema = serde_json::from_str(&text).map_err(|e| DatasetError::Schema(e.to_string()))?;
        Self::new(raw.classes, raw.display_names)
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    /// Foreground class ids in ascending order.
    pub fn foreground(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id).filter(|id| id.is_foreground())
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.classes.binary_search_by_key(&id, |c| c.id).is_ok()
    }

    /// Whether `value` may appear in a mask: background, void or a schema class.
    pub fn is_valid_pixel(&self, value: u8) -> bool {
        value == BACKGROUND || value == VOID || self.contains(ClassId(value))
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.classes.binary_search_by_key(&id, |c| c.id).ok().map(|i| self.classes[i].name.as_str())
    }

    /// Name used in prompt text.
    pub fn display_name(&self, id: ClassId) -> Option<&str> {
        let name = self.name(id)?;
        Some(self.display_names.get(name).map(String::as_str).unwrap_or(name))
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Number of confusion-matrix rows needed to hold every schema id.
    pub fn num_slots(&self) -> usize {
        self.classes.last().map(|c| c.id.0 as usize + 1).unwrap_or(1).max(1)
    }
}

/// Standard VOC colormap as a flat 768-byte RGB palette.
pub fn voc_palette() -> Vec<u8> {
    let mut palette = Vec::with_capacity(256 * 3);
    for index in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = index;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        palette.extend_from_slice(&[r, g, b]);
    }
    palette
}
