//! On-disk formats: per-image descriptor files and the dataset manifest.

mod descriptor_file;
mod manifest;

pub use descriptor_file::{
    descriptor_file_size, read_descriptor_file, read_descriptor_file_bytes, write_descriptor_file,
    DESCRIPTOR_HEADER_LEN,
};
pub use manifest::{
    load_manifest, Collection, DatasetManifest, LoadedManifest, ManifestImage, RelevanceEntry, SubsetEntry,
};
