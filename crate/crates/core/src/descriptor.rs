//! Sparse nearest-neighbour scene descriptors.
//!
//! Each input feature is replaced by the IDs of its nearest library features.
//! Query features keep a truncated similarity per ID; database features keep
//! the IDs only (their weight is implicitly 1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{self, truncated_similarity, NNExplanation};
use crate::library::{ExperienceLibrary, LibraryId};
use crate::model::{ancestor, cell_of, DomainLabel, ImageRecord, MinerConfig, Point, PyramidConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: LibraryId,
    pub weight: f64,
}

/// One feature's sparse explanation together with its spatial cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub pos: Point,
    /// Cell index at the finest pyramid level.
    pub finest_cell: u32,
    /// Sorted by descending weight, then ascending ID.
    pub entries: Vec<Entry>,
}

impl FeatureRecord {
    pub fn ids(&self) -> impl Iterator<Item = LibraryId> + '_ {
        self.entries.iter().map(|e| e.id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub image_id: u64,
    pub domain: DomainLabel,
    pub place_id: Option<u64>,
    pub role: Role,
    pub pyramid: PyramidConfig,
    pub miner: MinerConfig,
    pub library_fingerprint: u64,
    pub records: Vec<FeatureRecord>,
}

impl SceneDescriptor {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Multiplies every query weight by `factor`; used to probe scale
    /// invariance of the ranking.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            for e in &mut r.entries {
                e.weight *= factor;
            }
        }
        out
    }
}

impl SceneDescriptor {
    /// Same descriptor on a shallower pyramid; `levels = 0` gives the plain
    /// image-to-class form.
    pub fn coarsened(&self, levels: u8) -> Result<Self> {
        if levels > self.pyramid.levels {
            return Err(Error::InvalidConfig(format!(
                "cannot coarsen a depth-{} pyramid to depth {levels}",
                self.pyramid.levels
            )));
        }
        let mut out = self.clone();
        out.pyramid = PyramidConfig::new(levels)?;
        for r in &mut out.records {
            r.finest_cell = ancestor(r.finest_cell, self.pyramid.levels, levels);
        }
        Ok(out)
    }
}

/// Query-side descriptor: `K` neighbours, weights `max(D0^2 - d^2, 0)`.
pub fn describe_query(
    image: &ImageRecord,
    library: &ExperienceLibrary,
    cfg: &MinerConfig,
    pyr: &PyramidConfig,
) -> Result<SceneDescriptor> {
    describe(image, library, cfg, pyr, Role::Query)
}

/// Database-side descriptor: `K'` neighbour IDs, weight 1.
pub fn describe_database(
    image: &ImageRecord,
    library: &ExperienceLibrary,
    cfg: &MinerConfig,
    pyr: &PyramidConfig,
) -> Result<SceneDescriptor> {
    describe(image, library, cfg, pyr, Role::Database)
}

pub fn describe(
    image: &ImageRecord,
    library: &ExperienceLibrary,
    cfg: &MinerConfig,
    pyr: &PyramidConfig,
    role: Role,
) -> Result<SceneDescriptor> {
    cfg.validate()?;
    pyr.validate()?;
    let k = match role {
        Role::Query => cfg.k,
        Role::Database => cfg.k_prime,
    };
    let explanations = if image.is_empty() {
        Vec::new()
    } else {
        knn::mine_image(image, library, k, cfg.exclude_same_source)?
    };
    Ok(assemble(image, library, cfg, pyr, role, explanations))
}

/// Describes many images. Without same-source exclusion all features are
/// mined as one batch; results are in input order either way.
pub fn describe_all(
    images: &[ImageRecord],
    library: &ExperienceLibrary,
    cfg: &MinerConfig,
    pyr: &PyramidConfig,
    role: Role,
) -> Result<Vec<SceneDescriptor>> {
    cfg.validate()?;
    pyr.validate()?;
    if cfg.exclude_same_source {
        return images
            .iter()
            .map(|im| describe(im, library, cfg, pyr, role))
            .collect();
    }
    let k = match role {
        Role::Query => cfg.k,
        Role::Database => cfg.k_prime,
    };
    for im in images {
        if let Some(f) = im.features.iter().find(|f| f.dim() != library.dim()) {
            return Err(crate::Error::DimensionMismatch {
                image_id: im.image_id,
                expected: library.dim(),
                found: f.dim(),
            });
        }
    }
    let descs: Vec<&[f32]> = images
        .iter()
        .flat_map(|im| im.features.iter().map(|f| f.desc.as_slice()))
        .collect();
    let mut mined = knn::mine_descriptors(&descs, library, k, None)?.into_iter();
    Ok(images
        .iter()
        .map(|im| {
            let ex: Vec<NNExplanation> = mined.by_ref().take(im.len()).collect();
            assemble(im, library, cfg, pyr, role, ex)
        })
        .collect())
}

fn assemble(
    image: &ImageRecord,
    library: &ExperienceLibrary,
    cfg: &MinerConfig,
    pyr: &PyramidConfig,
    role: Role,
    explanations: Vec<NNExplanation>,
) -> SceneDescriptor {
    let records = image
        .features
        .iter()
        .zip(explanations)
        .map(|(f, ex)| {
            let mut entries: Vec<Entry> = ex
                .entries
                .iter()
                .map(|n| Entry {
                    id: n.id,
                    weight: match role {
                        Role::Query => truncated_similarity(n.sq_distance, cfg.d0),
                        Role::Database => 1.0,
                    },
                })
                .collect();
            entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.id.cmp(&b.id)));
            FeatureRecord {
                pos: f.pos,
                finest_cell: cell_of(f.pos, pyr.levels),
                entries,
            }
        })
        .collect();
    SceneDescriptor {
        image_id: image.image_id,
        domain: image.domain,
        place_id: image.place_id,
        role,
        pyramid: *pyr,
        miner: *cfg,
        library_fingerprint: library.fingerprint(),
        records,
    }
}
