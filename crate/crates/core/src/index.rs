//! Immutable inverted file over database scene descriptors.
//!
//! Posting lists are keyed by library ID and record which database feature
//! (image, finest pyramid cell, feature ordinal) was explained by that library
//! feature. Coarser cells are derived from the finest one at query time.
//!
//! # File layout (`XDIX`, little-endian)
//!
//! ```text
//! magic        4 bytes  "XDIX"
//! version      u32      1
//! V            u64      library size
//! L            u8       pyramid depth of the stored cells
//! d            u32      descriptor dimension
//! fingerprint  u64      library fingerprint
//! flags        u32      bit 0: posting image ids are delta-encoded varints
//! k, k'        u32, u32 miner neighbour counts
//! D0           f64      truncation distance
//! exclude      u8       same-source exclusion used at build time
//! images       u64      image-table length, then per image:
//!                         image_id u64, N u32, has_place u8, place_id u64,
//!                         season u8, route u32
//! postings     for each ID 1..=V: count (LEB128), then per posting:
//!                image_id (LEB128 delta from the previous posting of the
//!                same list when flag bit 0 is set, else u64),
//!                finest_cell u16, feature_ordinal u32
//! ```

use std::collections::HashSet;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder};
use crate::descriptor::{Role, SceneDescriptor};
use crate::error::{Error, Result};
use crate::library::{ExperienceLibrary, LibraryId};
use crate::model::{DomainLabel, MinerConfig, PyramidConfig, Season};

const INDEX_MAGIC: &[u8; 4] = b"XDIX";
const INDEX_VERSION: u32 = 1;
const FLAG_DELTA_IMAGE_IDS: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Posting {
    /// Position of the image in the index's image table. The table is sorted
    /// by image id, so this orders postings exactly as the image id would.
    pub image: u32,
    pub finest_cell: u16,
    pub feature_ordinal: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u64,
    pub num_features: u32,
    pub place_id: Option<u64>,
    pub domain: DomainLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    library_size: usize,
    dim: usize,
    fingerprint: u64,
    pyramid: PyramidConfig,
    miner: MinerConfig,
    images: Vec<ImageEntry>,
    /// CSR offsets, length `V + 1`; list of ID `i` is `offsets[i-1]..offsets[i]`.
    offsets: Vec<usize>,
    postings: Vec<Posting>,
}

impl InvertedIndex {
    pub fn library_size(&self) -> usize {
        self.library_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn pyramid(&self) -> PyramidConfig {
        self.pyramid
    }

    pub fn miner(&self) -> MinerConfig {
        self.miner
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn total_postings(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, id: LibraryId) -> &[Posting] {
        &self.postings[self.offsets[id.index()]..self.offsets[id.index() + 1]]
    }

    pub fn image_slot(&self, image_id: u64) -> Option<usize> {
        self.images.binary_search_by_key(&image_id, |e| e.image_id).ok()
    }

    pub fn image_id(&self, slot: u32) -> u64 {
        self.images[slot as usize].image_id
    }

    /// Errors unless `library` is the one this index was built against.
    pub fn check_library(&self, library: &ExperienceLibrary) -> Result<()> {
        if library.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found: library.fingerprint(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(64 + self.images.len() * 30 + self.postings.len() * 8);
        enc.bytes(INDEX_MAGIC);
        enc.u32(INDEX_VERSION);
        enc.u64(self.library_size as u64);
        enc.u8(self.pyramid.levels);
        enc.u32(self.dim as u32);
        enc.u64(self.fingerprint);
        enc.u32(FLAG_DELTA_IMAGE_IDS);
        enc.u32(self.miner.k as u32);
        enc.u32(self.miner.k_prime as u32);
        enc.f64(self.miner.d0);
        enc.u8(self.miner.exclude_same_source as u8);
        enc.u64(self.images.len() as u64);
        for e in &self.images {
            enc.u64(e.image_id);
            enc.u32(e.num_features);
            enc.u8(e.place_id.is_some() as u8);
            enc.u64(e.place_id.unwrap_or(0));
            enc.u8(e.domain.season.code());
            enc.u32(e.domain.route);
        }
        for w in self.offsets.windows(2) {
            let list = &self.postings[w[0]..w[1]];
            enc.varint(list.len() as u64);
            let mut prev = 0u64;
            for p in list {
                let id = self.images[p.image as usize].image_id;
                enc.varint(id - prev);
                prev = id;
                enc.u16(p.finest_cell);
                enc.u32(p.feature_ordinal);
            }
        }
        enc.into_inner()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads an index, checking format and internal consistency.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Loads an index and verifies it was built against `library`.
    pub fn load_for(path: &Path, library: &ExperienceLibrary) -> Result<Self> {
        let index = Self::load(path)?;
        index.check_library(library)?;
        Ok(index)
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut dec = Decoder::new(bytes, context);
        dec.magic(INDEX_MAGIC)?;
        let version = dec.u32()?;
        if version != INDEX_VERSION {
            return Err(dec.format_error(format!("unsupported index version {version}")));
        }
        let library_size = dec.u64()? as usize;
        let levels = dec.u8()?;
        let pyramid = PyramidConfig::new(levels)
            .map_err(|_| dec.format_error(format!("bad pyramid depth {levels}")))?;
        let dim = dec.u32()? as usize;
        let fingerprint = dec.u64()?;
        let flags = dec.u32()?;
        if flags & !FLAG_DELTA_IMAGE_IDS != 0 {
            return Err(dec.format_error(format!("unknown flags {flags:#x}")));
        }
        let delta = flags & FLAG_DELTA_IMAGE_IDS != 0;
        let miner = MinerConfig {
            k: dec.u32()? as usize,
            k_prime: dec.u32()? as usize,
            d0: dec.f64()?,
            exclude_same_source: dec.u8()? != 0,
        };
        let n_images = dec.u64()? as usize;
        let mut images = Vec::with_capacity(n_images.min(dec.remaining() / 30));
        for _ in 0..n_images {
            let image_id = dec.u64()?;
            let num_features = dec.u32()?;
            let has_place = dec.u8()? != 0;
            let place = dec.u64()?;
            let code = dec.u8()?;
            let season = Season::from_code(code)
                .ok_or_else(|| dec.format_error(format!("bad season code {code}")))?;
            let route = dec.u32()?;
            images.push(ImageEntry {
                image_id,
                num_features,
                place_id: has_place.then_some(place),
                domain: DomainLabel::new(season, route),
            });
        }
        if images.windows(2).any(|w| w[0].image_id >= w[1].image_id) {
            return Err(dec.format_error("image table not strictly ascending"));
        }
        let finest = pyramid.finest_cells();
        let mut offsets = Vec::with_capacity(library_size.min(dec.remaining()) + 1);
        offsets.push(0);
        let mut postings = Vec::new();
        for list in 0..library_size {
            let count = dec.varint()? as usize;
            let mut prev = 0u64;
            let start = postings.len();
            for _ in 0..count {
                let image_id = if delta {
                    let id = prev
                        .checked_add(dec.varint()?)
                        .ok_or_else(|| dec.format_error("image id overflow"))?;
                    prev = id;
                    id
                } else {
                    dec.u64()?
                };
                let slot = images
                    .binary_search_by_key(&image_id, |e| e.image_id)
                    .map_err(|_| {
                        dec.format_error(format!(
                            "posting list {} references unknown image {image_id}",
                            list + 1
                        ))
                    })?;
                let finest_cell = dec.u16()?;
                let feature_ordinal = dec.u32()?;
                if finest_cell as usize >= finest || feature_ordinal >= images[slot].num_features {
                    return Err(dec.format_error(format!(
                        "posting list {}: cell {finest_cell} / ordinal {feature_ordinal} out of range",
                        list + 1
                    )));
                }
                postings.push(Posting {
                    image: slot as u32,
                    finest_cell,
                    feature_ordinal,
                });
            }
            if postings[start..].windows(2).any(|w| w[0] >= w[1]) {
                return Err(dec.format_error(format!("posting list {} not sorted", list + 1)));
            }
            offsets.push(postings.len());
        }
        dec.finish()?;
        Ok(Self {
            library_size,
            dim,
            fingerprint,
            pyramid,
            miner,
            images,
            offsets,
            postings,
        })
    }

    /// Hash of the serialized index; identical before and after any number of
    /// read-only queries.
    pub fn content_hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.to_bytes());
        h.finish()
    }
}

/// Builds the inverted file from database descriptors mined against `library`.
pub fn build_index(library: &ExperienceLibrary, databases: &[SceneDescriptor]) -> Result<InvertedIndex> {
    let (pyramid, miner) = match databases.first() {
        Some(d) => (d.pyramid, d.miner),
        None => (PyramidConfig::default(), MinerConfig::default()),
    };
    let mut seen = HashSet::new();
    for d in databases {
        if d.role != Role::Database {
            return Err(Error::ConfigMismatch(format!(
                "image {} was described as a query, not a database image",
                d.image_id
            )));
        }
        if d.library_fingerprint != library.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: library.fingerprint(),
                found: d.library_fingerprint,
            });
        }
        if d.pyramid != pyramid || d.miner.k_prime != miner.k_prime {
            return Err(Error::ConfigMismatch(format!(
                "image {} was described with a different pyramid or k'",
                d.image_id
            )));
        }
        if !seen.insert(d.image_id) {
            return Err(Error::DuplicateId {
                collection: "database".into(),
                id: d.image_id,
            });
        }
    }
    let mut order: Vec<usize> = (0..databases.len()).collect();
    order.sort_by_key(|&i| databases[i].image_id);
    let images: Vec<ImageEntry> = order
        .iter()
        .map(|&i| {
            let d = &databases[i];
            ImageEntry {
                image_id: d.image_id,
                num_features: d.records.len() as u32,
                place_id: d.place_id,
                domain: d.domain,
            }
        })
        .collect();

    let v = library.len();
    let mut counts = vec![0usize; v + 1];
    for d in databases {
        for r in &d.records {
            for e in &r.entries {
                if e.id.0 == 0 || e.id.index() >= v {
                    return Err(Error::ConfigMismatch(format!(
                        "image {} references library id {} outside 1..={v}",
                        d.image_id, e.id
                    )));
                }
                counts[e.id.0 as usize] += 1;
            }
        }
    }
    let mut offsets = vec![0usize; v + 1];
    for i in 1..=v {
        offsets[i] = offsets[i - 1] + counts[i];
    }
    let mut cursor = offsets.clone();
    let mut postings = vec![
        Posting {
            image: 0,
            finest_cell: 0,
            feature_ordinal: 0
        };
        offsets[v]
    ];
    // Visiting images in id order keeps each list sorted by (image, ordinal),
    // and the cell is a function of the ordinal.
    for (slot, &i) in order.iter().enumerate() {
        for (ordinal, r) in databases[i].records.iter().enumerate() {
            for e in &r.entries {
                let at = &mut cursor[e.id.index()];
                postings[*at] = Posting {
                    image: slot as u32,
                    finest_cell: r.finest_cell as u16,
                    feature_ordinal: ordinal as u32,
                };
                *at += 1;
            }
        }
    }
    for w in offsets.windows(2) {
        postings[w[0]..w[1]].sort_unstable();
    }
    Ok(InvertedIndex {
        library_size: v,
        dim: library.dim(),
        fingerprint: library.fingerprint(),
        pyramid,
        miner,
        images,
        offsets,
        postings,
    })
}
