//! On-disk formats: binary tensors, clip manifests and run configuration.

mod config;
mod manifest;
mod tensor_file;

pub use config::{ConditionMode, MotionSource, Precision, RunConfig};
pub use manifest::{load_manifest, parse_entries, write_manifest, ClipManifestEntry, Manifest};
pub use tensor_file::{read_tensor, write_tensor, DtypeCode, TensorData, TensorFile, MAGIC, VERSION};
