//! Input data: synthetic sprite videos, frame directories and the frozen
//! patch-feature encoder.

mod features;
mod io;
mod sprites;

pub use features::{extract_features, FeatureEncoderParams, FeatureGrid};
pub use io::{list_clips, load_clip, load_frames_dir, save_clip, ClipMeta};
pub use sprites::{generate_sprite_video, Annotation, GenConfig, Shape, SpriteVideo};
