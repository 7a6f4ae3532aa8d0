//! Registered RGB-D sequences on disk, and the probability/label map formats.
//!
//! Scene directory layout:
//!
//! ```text
//! scene/intrinsics.txt      fx fy cx cy \n width height
//! scene/classes.txt         optional, label space size (default 37)
//! scene/color/%06d.png      8-bit RGB
//! scene/depth/%06d.png      16-bit gray, millimeters, 0 = missing
//! scene/pose/%06d.txt       4×4 row-major camera-to-world
//! scene/label/%06d.png      optional, 8-bit gray, 255 = ignore
//! ```

mod pmap;
mod png;
mod scene;
mod types;

use std::path::PathBuf;

pub use pmap::{decode_probmap, encode_probmap, read_probmap, write_probmap, PMAP_HEADER_LEN, PMAP_MAGIC, PMAP_VERSION};
pub use png::{
    read_depth_png, read_label_png, read_mask_png, write_depth_png, write_label_png, write_mask_png,
    MILLIMETERS_PER_METER,
};
pub use scene::{frame_file_name, list_frame_indices, load_scene, load_scene_with, write_scene, LoadOptions};
pub use types::{
    argmax, Frame, InvariantError, LabelMap, ProbMap, SceneSequence, DEFAULT_NUM_CLASSES, IGNORE,
    PROB_SUM_TOLERANCE,
};

#[derive(Debug, thiserror::Error)]
pub enum FrameIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("frame {index}: {msg}")]
    Frame { index: usize, msg: String },
    #[error("probability map format: {0}")]
    Format(String),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

impl FrameIoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
