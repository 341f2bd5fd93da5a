//! Dataset manifest: a TOML document listing the library, database, query
//! and distractor collections plus optional relevance and per-query database
//! subsets. Descriptor paths are resolved relative to the manifest.
//!
//! ```toml
//! version = 1
//!
//! [[library]]
//! image_id = 1
//! path = "library/000001.xdsc"
//! season = "AU"
//! route = 2
//! place_id = 17        # optional
//!
//! [[relevance]]
//! query_id = 5
//! relevant = [40, 41]  # explicit set, or:
//! # center = 40
//! # radius = 10        # window [center - radius, center + radius]
//!
//! [[db_subset]]
//! query_id = 5
//! database_ids = [40, 77, 90]
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_descriptor_file;
use crate::model::{DomainLabel, ImageRecord, Season};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: u64,
    pub path: PathBuf,
    pub season: String,
    pub route: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place_id: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceEntry {
    pub query_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub query_id: u64,
    pub database_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default)]
    pub library: Vec<ManifestImage>,
    #[serde(default)]
    pub database: Vec<ManifestImage>,
    #[serde(default)]
    pub query: Vec<ManifestImage>,
    /// Extra database images that are relevant to no query.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distractor: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relevance: Vec<RelevanceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub db_subset: Vec<SubsetEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            version: 1,
            notes: Vec::new(),
            library: Vec::new(),
            database: Vec::new(),
            query: Vec::new(),
            distractor: Vec::new(),
            relevance: Vec::new(),
            db_subset: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Collection {
    Library,
    /// Database images followed by distractors.
    Database,
    Query,
}

impl Collection {
    fn name(&self) -> &'static str {
        match self {
            Collection::Library => "library",
            Collection::Database => "database",
            Collection::Query => "query",
        }
    }
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            context: "manifest".into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self, collection: Collection) -> Vec<&ManifestImage> {
        match collection {
            Collection::Library => self.library.iter().collect(),
            Collection::Database => self.database.iter().chain(&self.distractor).collect(),
            Collection::Query => self.query.iter().collect(),
        }
    }
}

/// A parsed manifest plus the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub path: PathBuf,
    pub base_dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl LoadedManifest {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Manifest {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    pub fn resolve(&self, entry: &ManifestImage) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Reads every descriptor file of a collection, in manifest order.
    pub fn load_collection(&self, collection: Collection) -> Result<Vec<ImageRecord>> {
        self.manifest
            .entries(collection)
            .par_iter()
            .map(|e| {
                let (_, features) = read_descriptor_file(&self.resolve(e))?;
                let season: Season = e.season.parse()?;
                Ok(ImageRecord {
                    image_id: e.image_id,
                    features,
                    domain: DomainLabel::new(season, e.route),
                    place_id: e.place_id,
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.manifest.version != 1 {
            return Err(self.error(format!("unsupported manifest version {}", self.manifest.version)));
        }
        for collection in [Collection::Library, Collection::Database, Collection::Query] {
            let mut seen = HashSet::new();
            for e in self.manifest.entries(collection) {
                if !seen.insert(e.image_id) {
                    return Err(Error::DuplicateId {
                        collection: collection.name().into(),
                        id: e.image_id,
                    });
                }
                e.season.parse::<Season>()?;
                let p = self.resolve(e);
                if !p.is_file() {
                    return Err(self.error(format!(
                        "{} image {}: missing descriptor file {}",
                        collection.name(),
                        e.image_id,
                        p.display()
                    )));
                }
            }
        }
        let queries: HashSet<u64> = self.manifest.query.iter().map(|q| q.image_id).collect();
        let database: HashSet<u64> = self
            .manifest
            .entries(Collection::Database)
            .iter()
            .map(|d| d.image_id)
            .collect();
        for r in &self.manifest.relevance {
            if !queries.contains(&r.query_id) {
                return Err(self.error(format!("relevance for unknown query {}", r.query_id)));
            }
            if r.relevant.is_none() && r.center.is_none() {
                return Err(self.error(format!(
                    "relevance for query {} needs `relevant` or `center`",
                    r.query_id
                )));
            }
        }
        for s in &self.manifest.db_subset {
            if !queries.contains(&s.query_id) {
                return Err(self.error(format!("db_subset for unknown query {}", s.query_id)));
            }
            if let Some(bad) = s.database_ids.iter().find(|id| !database.contains(id)) {
                return Err(self.error(format!(
                    "db_subset for query {} lists unknown database image {bad}",
                    s.query_id
                )));
            }
        }
        Ok(())
    }
}

/// Parses a manifest and checks ids, season tokens and that every referenced
/// descriptor file exists.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string().trim().replace('\n', " "),
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedManifest {
        path: path.to_path_buf(),
        base_dir,
        manifest,
    };
    loaded.validate()?;
    Ok(loaded)
}
