//! Text prompts for the generator: simple class prompts, captions, and
//! captions with the class list appended.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, LabelSchema, SegSample};
use crate::http::{b64_encode, HttpError, JsonClient};

pub const SEPARATOR: &str = "; ";
pub const CAPTION_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("class list is empty")]
    NoClasses,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("class {0} is not in the schema")]
    UnknownClass(ClassId),
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Bare,
    #[default]
    PhotoOf,
}

/// `c1, c2, ..., cM`, optionally prefixed with `A photo of `.
pub fn simple_class_prompt<S: AsRef<str>>(classes: &[S], template: Template) -> Result<String, PromptError> {
    if classes.is_empty() {
        return Err(PromptError::NoClasses);
    }
    let list = classes.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", ");
    Ok(match template {
        Template::Bare => list,
        Template::PhotoOf => format!("A photo of {list}"),
    })
}

/// `<caption>; <c1, ..., cM>`. Trailing whitespace and periods of the caption
/// are dropped first.
pub fn append_class_prompt<S: AsRef<str>>(caption: &str, classes: &[S]) -> Result<String, PromptError> {
    let caption = clean_caption(caption).ok_or(PromptError::EmptyCaption)?;
    let class_prompt = simple_class_prompt(classes, Template::Bare)?;
    Ok(format!("{caption}{SEPARATOR}{class_prompt}"))
}

fn clean_caption(caption: &str) -> Option<&str> {
    let trimmed = caption.trim().trim_end_matches('.').trim_end();
    (!trimmed.is_empty()).then_some(trimmed)
}

/// Prompt texts for one seed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub caption: Option<String>,
    pub class_prompt: String,
    /// Caption with the class prompt appended, or the fallback simple prompt
    /// when no caption is available. This is what gets sent to the backend.
    pub appended: String,
}

impl PromptBundle {
    /// Builds the bundle from the sample's classes in ascending id order.
    pub fn build(
        classes: impl IntoIterator<Item = ClassId>,
        caption: Option<&str>,
        schema: &LabelSchema,
        fallback: Template,
    ) -> Result<Self, PromptError> {
        let mut ids: Vec<ClassId> = classes.into_iter().filter(|c| c.is_foreground()).collect();
        ids.sort();
        ids.dedup();
        let names = ids
            .iter()
            .map(|&id| schema.display_name(id).ok_or(PromptError::UnknownClass(id)))
            .collect::<Result<Vec<_>, _>>()?;
        let class_prompt = simple_class_prompt(&names, Template::Bare)?;
        let caption = caption.and_then(clean_caption).map(str::to_string);
        let appended = match &caption {
            Some(c) => append_class_prompt(c, &names)?,
            None => simple_class_prompt(&names, fallback)?,
        };
        Ok(Self { caption, class_prompt, appended })
    }
}

/// Anything that can describe an image in words.
pub trait CaptionSource: Send + Sync {
    fn name(&self) -> &str;
    fn describe(&self, sample: &SegSample) -> Result<Option<String>, CaptionError>;
}

/// Reads `<dir>/<sample_id>.txt`.
#[derive(Debug, Clone)]
pub struct SidecarCaptions {
    dir: PathBuf,
}

impl SidecarCaptions {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `captions/` under a dataset root.
    pub fn for_root(root: &Path) -> Self {
        Self::new(root.join("captions"))
    }
}

impl CaptionSource for SidecarCaptions {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn describe(&self, sample: &SegSample) -> Result<Option<String>, CaptionError> {
        let path = self.dir.join(format!("{}.txt", sample.sample_id));
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CaptionError::Io(format!("{}: {e}", path.display()))),
        }
    }
}

/// Captioning service: `POST {base}/caption` with `{"image_png_b64"}`,
/// answering `{"caption"}`.
#[derive(Debug, Clone)]
pub struct HttpCaptioner {
    client: JsonClient,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: Option<String>,
}

impl HttpCaptioner {
    pub fn new(base: &str) -> Self {
        Self { client: JsonClient::new(base, CAPTION_TIMEOUT) }
    }
}

impl CaptionSource for HttpCaptioner {
    fn name(&self) -> &str {
        "service"
    }

    fn describe(&self, sample: &SegSample) -> Result<Option<String>, CaptionError> {
        let image = sample.load_image().map_err(|e| CaptionError::Io(e.to_string()))?;
        let mut png = Vec::new();
        image
            .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| CaptionError::Io(e.to_string()))?;
        let body = serde_json::json!({ "image_png_b64": b64_encode(&png) });
        let response: CaptionResponse = self.client.post("caption", &body)?;
        Ok(response.caption)
    }
}

/// First non-empty caption in source order. Source failures are logged and
/// treated as no answer.
pub fn resolve_caption(sample: &SegSample, sources: &[Box<dyn CaptionSource>]) -> Option<String> {
    if let Some(c) = sample.caption.as_deref().and_then(clean_caption) {
        return Some(c.to_string());
    }
    for source in sources {
        match source.describe(sample) {
            Ok(Some(text)) => {
                if let Some(c) = clean_caption(&text) {
                    return Some(c.to_string());
                }
            }
            Ok(None) => {}
            Err(e) => log::warn!("caption source {} failed for {}: {e}", source.name(), sample.sample_id),
        }
    }
    None
}
