//! Generative augmentation for semantic segmentation datasets.
//!
//! The pipeline indexes a VOC-style dataset, plans class-balancing
//! regenerations, builds a caption-plus-classes prompt and a blended edge
//! prior for every planned seed, sends both to a controllable generation
//! backend, and pairs each result with its seed's mask.

pub mod blend;
pub mod dataset;
pub mod generation;
pub mod hash;
pub mod http;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod prior;
pub mod prompt;
pub mod toy;

mod fsutil;

pub use blend::{blend_priors, export_control_image, BlendWeights};
pub use dataset::{classes_of, decode_mask, load_index, ClassId, DatasetIndex, LabelMask, LabelSchema, SegSample};
pub use planner::{auto_n_balance, make_plan, GenerationPlan, PlanEntry};
pub use prior::{canny_edges, mask_boundaries, CannyParams, PriorImage};
pub use prompt::{append_class_prompt, simple_class_prompt, PromptBundle};
