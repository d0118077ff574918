//! Deterministic core of interacted-object grounding and the GIO
//! evaluation protocol.
//!
//! Neural components (segmentation, video backbones, decoders) are out of
//! scope; their outputs are consumed as files through [`io`].

pub mod error;
pub mod geometry;
pub mod grounding;
pub mod io;
pub mod layout4d;
pub mod metrics;
pub mod splitter;
pub mod taxonomy;

pub use error::{Error, Result};
pub use geometry::{BBox, Mask};
