//! Tensor container and set manifests.

mod blob;
mod manifest;

pub use blob::{read_header, read_tensor, write_tensor, Role, TensorBlob, TensorError, TensorHeader, MAGIC};
pub use manifest::{
    load_manifest, validate_set, Label, ManifestError, MissingRoles, PoseConvention, TensorRef, TokenGrid,
    ValidationReport, ViewManifest, ViewRecord,
};
